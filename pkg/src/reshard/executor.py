"""Distributed application of reconfiguration plans over simulated workers.

Each worker owns one :class:`~reshard.store.TensorStore` served over the
transport. Device ``w:d`` keeps its cells at ``/<d>/<tensor path>`` in worker
``w``'s store. Applying a plan runs three barriered phases on every worker:

1. fetch   - each destination device pulls the fragments it lacks from the
             source device's store via range queries (or, in central mode,
             a hub pulls every fragment and pushes it to the destination);
2. assemble - fragments (fetched or already local) are merged into the new
             cells under ``/.staging/<plan-id>/``;
3. commit  - staged cells are renamed onto the live prefix and stale cells
             dropped, atomically per store.

A failure before commit discards staging and leaves every live entry intact.
"""
from __future__ import annotations

import hashlib
import logging
import multiprocessing as mp
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import CheckpointRequired, ExecutionFailed, LayoutMismatch, NotFound
from .planner import ReconfigPlan, generate_plan
from .ptc import PTC, DeviceId, hosted_subtensors, parse_parallel_config, serialize_parallel_config
from .store import STAGING, TensorStore
from .tensor import Range, Tensor, cells_within, merge
from .transport import Client, serve

log = logging.getLogger(__name__)

HUB = "central"


def cell_path(device: DeviceId, tid) -> str:
    return f"/{device.local}/{tid.path}"


def _frag_path(plan_id: str, device: DeviceId, tid, frag: Range) -> str:
    return f"/{STAGING}/{plan_id}/frag/{device.local}/{tid.path}/{frag}"


def _staged_cell_path(plan_id: str, device: DeviceId, tid) -> str:
    return f"/{STAGING}/{plan_id}/cell/{device.local}/{tid.path}"


# --- task compilation -----------------------------------------------------------

@dataclass(frozen=True)
class FetchTask:
    """Pull one fragment from ``src`` into ``dst``'s staging area."""

    tensor: object
    frag: Range
    src: DeviceId
    src_path: str
    src_range: Range  # fragment relative to the source cell
    dst: DeviceId
    dst_path: str
    nbytes: int


@dataclass(frozen=True)
class CellTask:
    """Assemble one target cell on ``device`` from staged or local parts.

    ``parts`` holds ``(frag_relative_to_cell, store_path, range_in_stored)``.
    ``keep`` marks a cell identical to the one already stored: nothing to do.
    """

    device: DeviceId
    tensor: object
    cell: Range
    parts: tuple
    keep: bool


@dataclass
class WorkerTasks:
    fetches: list = field(default_factory=list)  # distributed mode: pulled by this worker
    cells: list = field(default_factory=list)
    devices: set = field(default_factory=set)  # local devices whose live prefix may change
    keep_paths: set = field(default_factory=set)


def _cell_containing(cells, tid, frag: Range) -> Optional[Range]:
    for t, r in cells:
        if t == tid and r.contains(frag):
            return r
    return None


def _check_single_cells(layout: dict, what: str) -> None:
    for dev, cells in layout.items():
        tids = [t for t, _ in cells]
        if len(tids) != len(set(tids)):
            raise LayoutMismatch(f"{what} layout puts several cells of one tensor on {dev}")


def compile_tasks(plan: ReconfigPlan, plan_id: str) -> dict:
    """Split a plan into per-worker fetch and assembly work."""
    _check_single_cells(plan.sources, "source")
    _check_single_cells(plan.targets, "target")
    tasks = {}

    def for_worker(w):
        return tasks.setdefault(w, WorkerTasks())

    moved = {}
    for op in plan.moves:
        src_cell = _cell_containing(plan.sources.get(op.src, ()), op.tensor, op.range)
        if src_cell is None:
            raise ExecutionFailed(f"{op.src} does not hold {op.tensor} {op.range}")
        ft = FetchTask(
            op.tensor, op.range, op.src, cell_path(op.src, op.tensor), op.range.rebase(src_cell.lows),
            op.dst, _frag_path(plan_id, op.dst, op.tensor, op.range), op.nbytes,
        )
        for_worker(op.dst.worker).fetches.append(ft)
        moved[(op.dst, op.tensor, op.range)] = ft

    for dev, cells in plan.sources.items():
        wt = for_worker(dev.worker)
        wt.devices.add(dev)
    for dev, cells in plan.targets.items():
        wt = for_worker(dev.worker)
        wt.devices.add(dev)
        local = plan.sources.get(dev, [])
        for tid, rc in cells:
            wt.keep_paths.add(cell_path(dev, tid))
            if (tid, rc) in local:
                wt.cells.append(CellTask(dev, tid, rc, (), True))
                continue
            parts = []
            for f in cells_within(plan.refinements[tid], rc):
                ft = moved.get((dev, tid, f))
                if ft is not None:
                    parts.append((f.rebase(rc.lows), ft.dst_path, Range.full(f.shape)))
                    continue
                have = _cell_containing(local, tid, f)
                if have is None:
                    raise ExecutionFailed(f"{dev} neither holds nor fetches {tid} {f}")
                parts.append((f.rebase(rc.lows), cell_path(dev, tid), f.rebase(have.lows)))
            wt.cells.append(CellTask(dev, tid, rc, tuple(parts), False))
    return tasks


# --- worker ---------------------------------------------------------------------

class Worker:
    """A store, its listener, and the transformer logic for the devices it hosts."""

    def __init__(self, worker_id, endpoint: str):
        self.id = worker_id
        self.store = TensorStore(str(worker_id))
        self.listener = serve(self.store, endpoint)
        self.endpoint = self.listener.endpoint

    def close(self):
        self.listener.close()

    # plain store access used by the orchestrator
    def upload(self, path, t):
        return self.store.upload(path, t)

    def query(self, path, range=None):
        return self.store.query(path, range)

    def snapshot(self, prefix="/"):
        return self.store.snapshot(prefix)

    def delete_prefix(self, prefix):
        return self.store.delete_prefix(prefix)

    def persist(self, directory, prefix):
        return self.store.persist(directory, prefix)

    def load_dir(self, directory, prefix):
        return self.store.load_dir(directory, prefix)

    # transformer phases
    def fetch(self, fetches, peers: dict, upload_to: Optional[dict] = None) -> dict:
        """Pull fragments concurrently, one task per destination device.

        Without ``upload_to`` fragments land in this worker's store; with it
        (central mode) each is pushed on to the destination worker's endpoint.
        Returns traffic counters keyed by device string.
        """
        client = Client()
        ingress, egress = {}, {}
        lock = threading.Lock()
        by_dst = {}
        for ft in fetches:
            by_dst.setdefault(ft.dst, []).append(ft)

        def run(items):
            for ft in items:
                t = client.fetch(peers[ft.src.worker], ft.src_path, ft.src_range)
                if upload_to is None:
                    self.store.upload(ft.dst_path, t)
                else:
                    client.upload(upload_to[ft.dst.worker], ft.dst_path, t)
                with lock:
                    egress[str(ft.src)] = egress.get(str(ft.src), 0) + t.nbytes
                    ingress[str(ft.dst)] = ingress.get(str(ft.dst), 0) + t.nbytes

        if by_dst:
            with ThreadPoolExecutor(max_workers=len(by_dst)) as pool:
                for fut in [pool.submit(run, items) for items in by_dst.values()]:
                    fut.result()
        return {"ingress": ingress, "egress": egress, "payload": client.payload_bytes, "wire": client.wire_bytes}

    def assemble(self, plan_id: str, cells) -> int:
        n = 0
        for ct in cells:
            if ct.keep:
                continue
            parts = [(rel, self.store.query(path, rng)) for rel, path, rng in ct.parts]
            if len(parts) == 1:
                t = parts[0][1]
            else:
                t = merge(parts, ct.cell.shape)
            self.store.upload(_staged_cell_path(plan_id, ct.device, ct.tensor), t)
            n += 1
        return n

    def commit(self, plan_id: str, cells, devices, keep_paths) -> None:
        renames = [
            (_staged_cell_path(plan_id, ct.device, ct.tensor), cell_path(ct.device, ct.tensor))
            for ct in cells
            if not ct.keep
        ]
        deletes = []
        for dev in devices:
            for rel in self.store.list(f"/{dev.local}"):
                p = f"/{dev.local}/{rel}"
                if p not in keep_paths:
                    deletes.append(p)
        self.store.commit(renames, deletes)
        self.store.delete_prefix(f"/{STAGING}/{plan_id}")

    def abort(self, plan_id: str) -> None:
        self.store.delete_prefix(f"/{STAGING}/{plan_id}")


# --- worker handles -----------------------------------------------------------

class InprocHandle:
    def __init__(self, worker_id):
        self._worker = Worker(worker_id, f"inproc://w{worker_id}-{id(self):x}")
        self.endpoint = self._worker.endpoint

    def call(self, method, *args):
        return getattr(self._worker, method)(*args)

    def close(self):
        self._worker.close()


def _process_main(conn, worker_id):
    logging.basicConfig(level=logging.WARNING)
    w = Worker(worker_id, "tcp://127.0.0.1:0")
    conn.send(("ready", w.endpoint))
    while True:
        try:
            msg = conn.recv()
        except EOFError:
            break
        if msg is None:
            break
        method, args = msg
        try:
            conn.send(("ok", getattr(w, method)(*args)))
        except Exception as e:  # shipped back to the orchestrator
            conn.send(("err", e))
    w.close()


class ProcessHandle:
    _ctx = mp.get_context("spawn")

    def __init__(self, worker_id):
        self._conn, child = self._ctx.Pipe()
        self._proc = self._ctx.Process(target=_process_main, args=(child, worker_id), daemon=True)
        self._proc.start()
        child.close()
        self._lock = threading.Lock()
        tag, self.endpoint = self._conn.recv()

    def call(self, method, *args):
        with self._lock:
            self._conn.send((method, args))
            tag, value = self._conn.recv()
        if tag == "err":
            raise value
        return value

    def close(self):
        try:
            with self._lock:
                self._conn.send(None)
        except (OSError, BrokenPipeError):
            pass
        self._proc.join(timeout=5)
        if self._proc.is_alive():
            self._proc.kill()


# --- reports --------------------------------------------------------------------

@dataclass
class ExecutionReport:
    mode: str
    ingress: dict = field(default_factory=dict)  # node -> bytes
    egress: dict = field(default_factory=dict)
    ops: dict = field(default_factory=dict)  # SPLIT/MOVE/MERGE -> count
    moved_bytes: int = 0
    wire_bytes: int = 0
    payload_bytes: int = 0
    phases: dict = field(default_factory=dict)  # phase -> seconds
    digests: dict = field(default_factory=dict)
    committed: bool = False

    def node_traffic(self, node) -> int:
        return self.ingress.get(node, 0) + self.egress.get(node, 0)

    def max_device_traffic(self) -> int:
        nodes = (set(self.ingress) | set(self.egress)) - {HUB}
        return max((self.node_traffic(n) for n in nodes), default=0)

    def to_text(self) -> str:
        lines = [
            f"mode={self.mode}",
            f"committed={int(self.committed)}",
            f"moved_bytes={self.moved_bytes}",
            f"payload_bytes={self.payload_bytes}",
            f"wire_bytes={self.wire_bytes}",
        ]
        for k in ("SPLIT", "MOVE", "MERGE"):
            lines.append(f"ops.{k.lower()}={self.ops.get(k, 0)}")
        for n in sorted(set(self.ingress) | set(self.egress), key=str):
            lines.append(f"ingress.{n}={self.ingress.get(n, 0)}")
            lines.append(f"egress.{n}={self.egress.get(n, 0)}")
        for k, v in sorted(self.digests.items()):
            lines.append(f"digest.{k}={v}")
        return "\n".join(lines) + "\n"


def tensor_digest(t: Tensor) -> str:
    h = hashlib.sha256(f"{t.dtype.name}{list(t.shape)}".encode())
    h.update(t.payload)
    return h.hexdigest()[:16]


# --- cluster --------------------------------------------------------------------

class SimCluster:
    """Orchestrates simulated workers (threads in-process, or child processes)."""

    def __init__(self, workers: str = "inprocess"):
        if workers not in ("inprocess", "processes"):
            raise ValueError(f"unknown worker mode {workers!r}")
        self.kind = workers
        self.handles = {}
        self.checkpoint_reads = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _spawn(self, worker_id):
        return InprocHandle(worker_id) if self.kind == "inprocess" else ProcessHandle(worker_id)

    def ensure_workers(self, ids) -> None:
        missing = [w for w in ids if w not in self.handles]
        if len(missing) > 1:
            with ThreadPoolExecutor(max_workers=len(missing)) as pool:
                for w, h in zip(missing, pool.map(self._spawn, missing)):
                    self.handles[w] = h
        for w in missing:
            if w not in self.handles:
                self.handles[w] = self._spawn(w)

    def close(self) -> None:
        for h in self.handles.values():
            h.close()
        self.handles.clear()

    @property
    def endpoints(self) -> dict:
        return {w: h.endpoint for w, h in self.handles.items()}

    def _each(self, calls: dict) -> dict:
        """Run ``{worker: (method, *args)}`` concurrently; re-raise the first failure."""
        if not calls:
            return {}
        with ThreadPoolExecutor(max_workers=len(calls)) as pool:
            futs = {w: pool.submit(self.handles[w].call, *c) for w, c in calls.items()}
        out, errors = {}, []
        for w, f in futs.items():
            try:
                out[w] = f.result()
            except Exception as e:
                errors.append((w, e))
        if errors:
            raise errors[0][1]
        return out

    # -- state loading and inspection --

    def load_layout(self, ptc: PTC, state: dict) -> None:
        """Place each device's cells of ``state`` (tid -> full Tensor) into its store."""
        from .tensor import slice_tensor

        self.ensure_workers(sorted({d.worker for d in ptc.devices}))
        for dev in ptc.devices:
            for tid, r in hosted_subtensors(ptc, dev):
                self.handles[dev.worker].call("upload", cell_path(dev, tid), slice_tensor(state[tid], r))

    def device_entries(self, dev: DeviceId) -> dict:
        return self.handles[dev.worker].call("snapshot", f"/{dev.local}")

    def gather(self, ptc: PTC) -> dict:
        """Reassemble every base tensor from one replica of each cell."""
        snaps = {}
        out = {}
        for tid, info in ptc.catalog.items():
            parts = []
            for i, r in enumerate(ptc.cells(tid)):
                hosts = sorted(ptc.hosts(tid, i))
                if not hosts:
                    raise NotFound(f"{tid} cell {r} has no host")
                dev = hosts[0]
                if dev.worker not in snaps:
                    snaps[dev.worker] = self.handles[dev.worker].call("snapshot", "/")
                t = snaps[dev.worker].get(cell_path(dev, tid))
                if t is None:
                    raise NotFound(f"{cell_path(dev, tid)} missing on worker {dev.worker}")
                parts.append((r, t))
            out[tid] = merge(parts, info.shape)
        return out

    def digests(self, ptc: PTC) -> dict:
        return {tid.path: tensor_digest(t) for tid, t in self.gather(ptc).items()}

    def check_layout(self, ptc: PTC) -> list:
        """Problems where stores differ from exactly the cells ``ptc`` assigns."""
        problems = []
        snaps = {w: self.handles[w].call("snapshot", "/") for w in sorted({d.worker for d in ptc.devices})}
        for dev in ptc.devices:
            want = {cell_path(dev, tid): r for tid, r in hosted_subtensors(ptc, dev)}
            have = {p for p in snaps[dev.worker] if p.startswith(f"/{dev.local}/")}
            for p in sorted(set(want) - have):
                problems.append(f"{dev}: missing {p}")
            for p in sorted(have - set(want)):
                problems.append(f"{dev}: unexpected {p}")
            for p in sorted(set(want) & have):
                if snaps[dev.worker][p].shape != want[p].shape:
                    problems.append(f"{dev}: {p} has shape {snaps[dev.worker][p].shape}, want {want[p].shape}")
        for w, snap in snaps.items():
            if any(p.startswith(f"/{STAGING}/") for p in snap):
                problems.append(f"worker {w}: leftover staging entries")
        return problems

    def fail(self, devices) -> None:
        """Simulate device loss: their cells vanish; a worker with no devices left is stopped."""
        for dev in devices:
            h = self.handles.get(dev.worker)
            if h is not None:
                h.call("delete_prefix", f"/{dev.local}")

    def stop_worker(self, worker_id) -> None:
        h = self.handles.pop(worker_id, None)
        if h is not None:
            h.close()

    # -- plan execution --

    def apply_plan(self, plan: ReconfigPlan, mode: str = "distributed") -> ExecutionReport:
        return apply_plan(self, plan, mode)


def apply_plan(cluster: SimCluster, plan: ReconfigPlan, mode: str = "distributed") -> ExecutionReport:
    if mode not in ("distributed", "central"):
        raise ValueError(f"unknown mode {mode!r}")
    report = ExecutionReport(mode)
    report.ops = {"SPLIT": len(plan.splits), "MOVE": len(plan.moves), "MERGE": len(plan.merges)}
    for d in plan.devices:
        report.ingress[str(d)] = 0
        report.egress[str(d)] = 0
    if plan.is_empty():
        report.committed = True
        return report

    plan_id = plan.plan_id
    tasks = compile_tasks(plan, plan_id)
    missing = {m.src.worker for m in plan.moves} - set(cluster.handles)
    if missing:
        raise ExecutionFailed(f"source workers {sorted(missing)} are not running", report)
    # only destinations get fresh workers; a stopped source-only worker has nothing to commit
    cluster.ensure_workers(sorted({d.worker for d in plan.targets}))
    tasks = {w: wt for w, wt in tasks.items() if w in cluster.handles}
    peers = cluster.endpoints

    t0 = time.perf_counter()
    try:
        if mode == "distributed":
            results = cluster._each({w: ("fetch", wt.fetches, peers) for w, wt in tasks.items() if wt.fetches})
        else:
            cluster.ensure_workers([HUB])
            fetches = [ft for wt in tasks.values() for ft in wt.fetches]
            hub = cluster._each({HUB: ("fetch", fetches, peers, peers)})
            results = hub
            moved = sum(hub[HUB]["egress"].values())
            report.ingress[HUB] = moved
            report.egress[HUB] = moved
        t1 = time.perf_counter()
        cluster._each({w: ("assemble", plan_id, wt.cells) for w, wt in tasks.items() if wt.cells})
    except Exception as e:
        cluster._each({w: ("abort", plan_id) for w in tasks})
        report.phases["fetch"] = time.perf_counter() - t0
        raise ExecutionFailed(f"plan {plan_id} aborted: {e}", report) from e
    t2 = time.perf_counter()
    cluster._each({w: ("commit", plan_id, wt.cells, wt.devices, wt.keep_paths) for w, wt in tasks.items()})
    t3 = time.perf_counter()

    for r in results.values():
        for d, b in r["ingress"].items():
            report.ingress[d] = report.ingress.get(d, 0) + b
        for d, b in r["egress"].items():
            report.egress[d] = report.egress.get(d, 0) + b
        report.wire_bytes += r["wire"]
        report.payload_bytes += r["payload"]
    report.moved_bytes = sum(m.nbytes for m in plan.moves)
    report.phases = {"fetch": t1 - t0, "assemble": t2 - t1, "commit": t3 - t2}
    report.committed = True
    return report


# --- failure recovery and checkpoints -------------------------------------------

def recover(ptc: PTC, failed, ptc2: PTC) -> tuple:
    """Plan recovery from surviving replicas onto the caller-chosen layout ``ptc2``.

    Raises :class:`CheckpointRequired` when some cell lived only on failed devices.
    """
    failed = set(failed)
    survivors = ptc.without_devices(failed)
    lost = [(tid, ptc.cell_range(tid, i)) for (tid, i), devs in survivors.layout().items() if not devs]
    if lost:
        raise CheckpointRequired(lost)
    bad = failed & set(ptc2.devices)
    if bad:
        raise ValueError(f"target layout uses failed devices {sorted(map(str, bad))}")
    return ptc2, generate_plan(survivors, ptc2)


def save_checkpoint(cluster: SimCluster, ptc: PTC, directory) -> int:
    """Persist each device's cells under ``<dir>/<rank>/`` plus the layout document."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 0
    for rank, dev in enumerate(ptc.devices):
        n += cluster.handles[dev.worker].call("persist", str(directory / str(rank)), f"/{dev.local}")
    (directory / "layout.json").write_text(json.dumps(serialize_parallel_config(ptc), indent=1))
    return n


def load_checkpoint(cluster: SimCluster, directory, devices) -> PTC:
    """Load a checkpoint onto ``devices`` (one per saved rank) and return its layout there."""
    import json

    directory = Path(directory)
    doc = json.loads((directory / "layout.json").read_text())
    devices = list(devices)
    if len(devices) != len(doc):
        raise LayoutMismatch(f"checkpoint has {len(doc)} ranks, target has {len(devices)} devices")
    ptc = parse_parallel_config(doc, devices)
    cluster.ensure_workers(sorted({d.worker for d in devices}))
    for rank, dev in enumerate(devices):
        rdir = directory / str(rank)
        if rdir.exists():
            cluster.checkpoint_reads += cluster.handles[dev.worker].call("load_dir", str(rdir), f"/{dev.local}")
    return ptc


def checkpoint_roundtrip(cluster: SimCluster, ptc: PTC, directory, target: Optional[SimCluster] = None) -> PTC:
    """Save ``ptc``'s state and load it back on the same devices (of ``target`` if given)."""
    save_checkpoint(cluster, ptc, directory)
    return load_checkpoint(target or cluster, directory, ptc.devices)
