"""Scenario scripts: replay resource-change events against a simulated cluster.

A script is a JSON object::

    {
      "seed": 7,
      "model": {"preset": "toy-gpt", "L": 4, "d": 8}          # or {"tensors": [...]}
      "dataset": {"samples": 256, "sample_shape": [4], "files": 4},
      "job": {"global_batch": 16},
      "initial": {"cluster": {"workers": 4, "devices_per_worker": 4},
                  "config": {"tp": 2, "pp": 4, "dp": 2}},
      "events": [
        {"event": "scale_to", "cluster": ..., "config": ...},
        {"event": "redeploy", "cluster": ...},
        {"event": "fail", "devices": ["0:1"], "recover_to": {"cluster": ..., "config": ...}},
        {"event": "checkpoint"},
        {"event": "step", "count": 3}
      ]
    }

Clusters are ``{"workers": n, "devices_per_worker": k, "first_worker": w}``
or an explicit ``[[worker_id, devices], ...]`` list. Configs are
``{"tp":, "pp":, "dp":}`` or a ``[T, P, D]`` list.
"""
from __future__ import annotations

import json
import logging
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import EpochReader, write_dataset
from .errors import CheckpointRequired, ReshardError, ScriptError
from .executor import HUB, ExecutionReport, SimCluster, load_checkpoint, recover, save_checkpoint
from .planner import central_cost, generate_plan, plan_cost
from .ptc import ClusterSpec, DeviceId, JobConfig, ModelTensor, PTC, WorkerSpec, build_strategy, device_coords
from .tensor import Dtype, random_tensor

log = logging.getLogger(__name__)

EVENTS = ("scale_to", "redeploy", "fail", "checkpoint", "step")
CHECKPOINT_WORKER = 10_000  # storage pseudo-worker that checkpoints are restored onto

# per layer: (name, shape as multiples of d, tp slice dim)
LAYER_TABLE = (
    ("attn/weight", (1, 1), 0),
    ("mlp/weight", (1, 4), 1),
    ("ln/weight", (1,), None),
)
PRESETS = {
    "toy-gpt": {"L": 4, "d": 8},
    "gpt-xl": {"L": 24, "d": 16},
    "gpt-2.7b": {"L": 32, "d": 24},
    "gpt-6.7b": {"L": 32, "d": 32},
}


def gen_synthetic(preset: str, **sizes) -> dict:
    """Model catalog fragment for a desk-scale transformer-like preset."""
    if preset not in PRESETS:
        raise ScriptError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    params = dict(PRESETS[preset])
    for k, v in sizes.items():
        if k not in params:
            raise ScriptError(f"preset {preset} has no size {k!r}")
        if int(v) < 1:
            raise ScriptError(f"{k} must be positive")
        params[k] = int(v)
    L, d = params["L"], params["d"]
    tensors = []
    for i in range(L):
        for name, mult, dim in LAYER_TABLE:
            tensors.append({
                "path": f"layers/{i}/{name}",
                "shape": [d * m for m in mult],
                "dtype": "F32",
                "tp_dim": dim,
                "layer": i,
            })
    return {"model": {"tensors": tensors}}


# --- script parsing ---------------------------------------------------------------

@dataclass
class Event:
    kind: str
    line: Optional[int]
    cluster: Optional[object] = None
    config: Optional[tuple] = None  # (tp, pp, dp)
    devices: tuple = ()
    count: int = 1


@dataclass
class ScenarioScript:
    seed: int
    model: list
    dataset: Optional[dict]
    global_batch: int
    cluster: object
    config: tuple
    events: list


def _parse_cluster(spec, line=None):
    try:
        if isinstance(spec, dict):
            return ClusterSpec.uniform(int(spec["workers"]), int(spec["devices_per_worker"]), int(spec.get("first_worker", 0)))
        if isinstance(spec, list):
            return ClusterSpec(tuple(WorkerSpec(int(w), int(n)) for w, n in spec))
    except (KeyError, TypeError, ValueError) as e:
        raise ScriptError(f"bad cluster spec: {e}", line) from None
    raise ScriptError("cluster must be an object or a list of [worker, devices]", line)


def _parse_config(spec, line=None) -> tuple:
    try:
        if isinstance(spec, dict):
            return int(spec["tp"]), int(spec["pp"]), int(spec["dp"])
        tp, pp, dp = (int(x) for x in spec)
        return tp, pp, dp
    except (KeyError, TypeError, ValueError):
        raise ScriptError(f"config must be {{tp, pp, dp}} or [T, P, D], got {spec!r}", line) from None


def _event_lines(text: str) -> list:
    lines = []
    for m in re.finditer(r'"event"\s*:', text):
        lines.append(text.count("\n", 0, m.start()) + 1)
    return lines


def _model_tensors(spec, line=None) -> list:
    if "preset" in spec:
        sizes = {k: v for k, v in spec.items() if k != "preset"}
        spec = gen_synthetic(spec["preset"], **sizes)["model"]
    out = []
    for i, t in enumerate(spec.get("tensors", [])):
        try:
            out.append(ModelTensor(
                t["path"], tuple(int(x) for x in t["shape"]), Dtype.parse(t.get("dtype", "F32")),
                t.get("tp_dim", 0), t.get("layer"),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ScriptError(f"model tensor {i}: {e}", line) from None
    if not out:
        raise ScriptError("model has no tensors", line)
    return out


def parse_script(text: str) -> ScenarioScript:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScriptError(f"invalid JSON: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict):
        raise ScriptError("script must be a JSON object", 1)
    for key in ("model", "job", "initial"):
        if key not in doc:
            raise ScriptError(f"missing top-level key {key!r}", 1)
    lines = _event_lines(text)
    try:
        B = int(doc["job"]["global_batch"])
    except (KeyError, TypeError, ValueError):
        raise ScriptError("job.global_batch must be an integer", 1) from None
    events = []
    for i, ev in enumerate(doc.get("events", [])):
        line = lines[i] if i < len(lines) else None
        if not isinstance(ev, dict) or ev.get("event") not in EVENTS:
            raise ScriptError(f"event {i}: 'event' must be one of {', '.join(EVENTS)}", line)
        kind = ev["event"]
        e = Event(kind, line)
        if kind == "scale_to":
            e.cluster = _parse_cluster(ev.get("cluster"), line)
            e.config = _parse_config(ev.get("config"), line)
        elif kind == "redeploy":
            e.cluster = _parse_cluster(ev.get("cluster"), line)
        elif kind == "fail":
            try:
                e.devices = tuple(DeviceId.parse(d) for d in ev["devices"])
            except (KeyError, TypeError, ValueError) as err:
                raise ScriptError(f"fail event needs a devices list: {err}", line) from None
            rt = ev.get("recover_to")
            if rt is not None:
                e.cluster = _parse_cluster(rt.get("cluster"), line)
                e.config = _parse_config(rt.get("config"), line)
        elif kind == "step":
            e.count = int(ev.get("count", 1))
            if e.count < 1:
                raise ScriptError("step count must be positive", line)
        events.append(e)
    init = doc["initial"]
    return ScenarioScript(
        seed=int(doc.get("seed", 0)),
        model=_model_tensors(doc["model"], 1),
        dataset=doc.get("dataset"),
        global_batch=B,
        cluster=_parse_cluster(init.get("cluster"), 1),
        config=_parse_config(init.get("config"), 1),
        events=events,
    )


def load_script(path) -> ScenarioScript:
    return parse_script(Path(path).read_text())


# --- layout tracking shared by run and dry-run -------------------------------------

class _Layouts:
    """Follows the job's PTC through a script's events without touching data."""

    def __init__(self, script: ScenarioScript):
        self.script = script
        tp, pp, dp = script.config
        try:
            self.job = JobConfig.create(script.global_batch, dp, tp, pp)
            self.ptc = build_strategy(script.model, [], script.cluster, self.job)
        except ReshardError as e:
            raise ScriptError(f"initial configuration: {e}", 1) from None
        self.checkpoint = None  # (ptc, job) at the last checkpoint

    def target(self, ev: Event):
        """Return ``(job, ptc2)`` for a reconfiguring event."""
        try:
            if ev.kind == "scale_to":
                tp, pp, dp = ev.config
                job = self.job.reconfigure(dp, tp, pp)
                return job, build_strategy(self.script.model, [], ev.cluster, job)
            if ev.kind == "redeploy":
                return self.job, build_strategy(self.script.model, [], ev.cluster, self.job)
            if ev.kind == "fail":
                unknown = set(ev.devices) - set(self.ptc.devices)
                if unknown:
                    raise ScriptError(f"fail: devices {sorted(map(str, unknown))} are not in use", ev.line)
                if ev.config is not None:
                    tp, pp, dp = ev.config
                    job = self.job.reconfigure(dp, tp, pp)
                    return job, build_strategy(self.script.model, [], ev.cluster, job)
                return self._shrink(ev)
        except ReshardError as e:
            raise ScriptError(f"{ev.kind}: {e}", ev.line) from None
        raise AssertionError(ev.kind)

    def _shrink(self, ev: Event):
        # keep only data-parallel groups untouched by the failure
        failed = set(ev.devices)
        coords = device_coords(self.ptc.devices, self.job)
        groups = {}
        for d, (dp, _, _) in coords.items():
            groups.setdefault(dp, []).append(d)
        intact = [g for _, g in sorted(groups.items()) if not failed & set(g)]
        if not intact:
            raise ScriptError("fail: no intact data-parallel group; give recover_to", ev.line)
        job = self.job.reconfigure(len(intact), self.job.tp, self.job.pp)
        devices = [d for g in intact for d in g]
        return job, build_strategy(self.script.model, [], devices, job)

    def set(self, job: JobConfig, ptc: PTC) -> None:
        self.job, self.ptc = job, ptc


# --- metrics -----------------------------------------------------------------------

@dataclass
class EventRecord:
    index: int
    event: str
    config: tuple
    devices: int
    report: Optional[ExecutionReport]
    cumulative_bytes: int
    digests_ok: Optional[bool]
    data_checksum: str
    checkpoint_reads: int = 0
    note: str = ""

    def row(self) -> dict:
        r = self.report
        return {
            "index": self.index,
            "event": self.event,
            "tp_pp_dp": "{},{},{}".format(*self.config),
            "devices": self.devices,
            "splits": r.ops.get("SPLIT", 0) if r else 0,
            "moves": r.ops.get("MOVE", 0) if r else 0,
            "merges": r.ops.get("MERGE", 0) if r else 0,
            "moved_bytes": r.moved_bytes if r else 0,
            "wire_bytes": r.wire_bytes if r else 0,
            "central_traffic": r.node_traffic(HUB) if r else 0,
            "max_device_traffic": r.max_device_traffic() if r else 0,
            "cumulative_bytes": self.cumulative_bytes,
            "checkpoint_reads": self.checkpoint_reads,
            "digests_ok": "" if self.digests_ok is None else int(self.digests_ok),
            "data_checksum": self.data_checksum,
            "note": self.note,
        }


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    initial_digests: dict = field(default_factory=dict)

    @property
    def cumulative_bytes(self) -> int:
        return self.records[-1].cumulative_bytes if self.records else 0

    def to_tsv(self) -> str:
        if not self.records:
            return ""
        rows = [r.row() for r in self.records]
        cols = list(rows[0])
        out = ["\t".join(cols)]
        out += ["\t".join(str(r[c]) for c in cols) for r in rows]
        return "\n".join(out) + "\n"

    def portable(self) -> list:
        """Rows minus anything timing- or mode-dependent (for cross-mode comparison)."""
        keep = ("index", "event", "tp_pp_dp", "devices", "splits", "moves", "merges", "moved_bytes",
                "cumulative_bytes", "checkpoint_reads", "digests_ok", "data_checksum")
        return [{k: r.row()[k] for k in keep} for r in self.records]


# --- run -----------------------------------------------------------------------------

def _initial_state(script: ScenarioScript, ptc: PTC, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {tid: random_tensor(info.shape, info.dtype, rng) for tid, info in ptc.catalog.items()}


def _dataset(script: ScenarioScript, seed: int, directory: Path, workers):
    spec = script.dataset or {}
    n = int(spec.get("samples", 0))
    if not n:
        return None
    shape = tuple(spec.get("sample_shape", [4]))
    rng = np.random.default_rng(seed + 1)
    samples = [random_tensor(shape, Dtype.U8, rng) for _ in range(n)]
    return write_dataset(directory, samples, int(spec.get("files", 1)), seed, workers)


def run(script: ScenarioScript, verify: bool = False, mode: str = "distributed", workers: str = "inprocess",
        seed: Optional[int] = None, figures: Optional[str] = None) -> tuple:
    """Replay ``script``; return ``(MetricsLog, exit_code)``."""
    seed = script.seed if seed is None else seed
    lay = _Layouts(script)
    metrics = MetricsLog()
    with tempfile.TemporaryDirectory(prefix="reshard-") as tmp, SimCluster(workers) as cluster:
        tmp = Path(tmp)
        state = _initial_state(script, lay.ptc, seed)
        cluster.load_layout(lay.ptc, state)
        metrics.initial_digests = cluster.digests(lay.ptc)
        idx = _dataset(script, seed, tmp / "data", script.cluster.worker_ids())
        reader = EpochReader(idx, lay.job) if idx is not None else None
        cumulative = 0
        ckpt_dir = None

        for i, ev in enumerate(script.events):
            report, note, reads = None, "", 0
            try:
                if ev.kind == "step":
                    if reader is not None:
                        reader.step(ev.count)
                    note = f"steps={ev.count}"
                elif ev.kind == "checkpoint":
                    ckpt_dir = tmp / f"ckpt{i}"
                    n = save_checkpoint(cluster, lay.ptc, ckpt_dir)
                    lay.checkpoint = lay.ptc
                    note = f"saved={n}"
                else:
                    job, ptc2 = lay.target(ev)
                    if job.global_batch != script.global_batch:
                        raise ScriptError("global batch changed", ev.line)
                    if ev.kind == "fail":
                        report, reads, note = _run_failure(cluster, lay, ev, ptc2, ckpt_dir, mode)
                    else:
                        plan = generate_plan(lay.ptc, ptc2)
                        report = cluster.apply_plan(plan, mode)
                    if reader is not None and job.dp != lay.job.dp:
                        reader.reconfigure(job)
                    lay.set(job, ptc2)
                    cluster.stop_worker(CHECKPOINT_WORKER)
            except (CheckpointRequired, ReshardError) as e:
                if isinstance(e, ScriptError):
                    raise
                metrics.violations.append(f"event {i} ({ev.kind}): {e}")
                log.error("event %d (%s) failed: %s", i, ev.kind, e)
                break

            if report is not None:
                cumulative += report.moved_bytes
            ok = None
            if verify and ev.kind in ("scale_to", "redeploy", "fail"):
                problems = cluster.check_layout(lay.ptc)
                ok = not problems and cluster.digests(lay.ptc) == metrics.initial_digests
                if report is not None:
                    report.digests = cluster.digests(lay.ptc)
                if not ok:
                    metrics.violations.append(f"event {i} ({ev.kind}): state not preserved {problems[:3]}")
            metrics.records.append(EventRecord(
                i, ev.kind, (lay.job.tp, lay.job.pp, lay.job.dp), len(lay.ptc.devices), report, cumulative, ok,
                reader.checksum() if reader else "", reads, note,
            ))
            if ok is False:
                break

    if figures:
        from .report import render_figures

        render_figures(metrics, figures)
    return metrics, (1 if metrics.violations else 0)


def _run_failure(cluster: SimCluster, lay: _Layouts, ev: Event, ptc2: PTC, ckpt_dir, mode: str):
    cluster.fail(ev.devices)
    try:
        _, plan = recover(lay.ptc, ev.devices, ptc2)
        return cluster.apply_plan(plan, mode), 0, "replica"
    except CheckpointRequired:
        if ckpt_dir is None or lay.checkpoint is None:
            raise
    before = cluster.checkpoint_reads
    n = len(lay.checkpoint.devices)
    storage = [DeviceId(CHECKPOINT_WORKER, k) for k in range(n)]
    restored = load_checkpoint(cluster, ckpt_dir, storage)
    # survivors' stale cells are dropped: the restored copy is authoritative
    for d in set(lay.ptc.devices) - set(ev.devices):
        cluster.handles[d.worker].call("delete_prefix", f"/{d.local}")
    plan = generate_plan(restored, ptc2)
    report = cluster.apply_plan(plan, mode)
    return report, cluster.checkpoint_reads - before, "checkpoint"


# --- dry run -------------------------------------------------------------------------

def dry_run(script: ScenarioScript) -> str:
    """Plans and cost tables for every event, without a cluster. Deterministic."""
    lay = _Layouts(script)
    out = []
    for i, ev in enumerate(script.events):
        out.append(f"# event {i}: {ev.kind}")
        if ev.kind == "step":
            out.append(f"steps: {ev.count}")
            continue
        if ev.kind == "checkpoint":
            lay.checkpoint = lay.ptc
            out.append(f"checkpoint: {len(lay.ptc.devices)} ranks")
            continue
        job, ptc2 = lay.target(ev)
        if ev.kind == "fail":
            try:
                _, plan = recover(lay.ptc, ev.devices, ptc2)
                out.append("recovery: replica")
            except CheckpointRequired as e:
                if lay.checkpoint is None:
                    out.append(f"recovery: impossible ({e}; no checkpoint)")
                    break
                out.append("recovery: checkpoint")
                storage = [DeviceId(CHECKPOINT_WORKER, k) for k in range(len(lay.checkpoint.devices))]
                plan = generate_plan(lay.checkpoint.remap_devices(dict(zip(lay.checkpoint.devices, storage))), ptc2)
        else:
            plan = generate_plan(lay.ptc, ptc2)
        out.append("config: T={} P={} D={} devices={}".format(job.tp, job.pp, job.dp, len(ptc2.devices)))
        if plan.is_empty():
            out.append("plan: empty")
        else:
            out.append(f"plan: {len(plan.ops)} ops")
            out.append(plan.to_text().rstrip("\n"))
        out.append("cost (distributed):")
        out.append(plan_cost(plan).to_text().rstrip("\n"))
        out.append("cost (central):")
        out.append(central_cost(plan, HUB).to_text().rstrip("\n"))
        lay.set(job, ptc2)
    return "\n".join(out) + "\n"
