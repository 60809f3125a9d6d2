"""Parallelizable tensor collections: catalog plus slicing, partitioning, allocation.

A :class:`PTC` describes where every piece of a training job's state lives.
``sigma`` cuts each tensor into grid cells, ``phi`` groups cells into named
partitions and ``alpha`` places each partition on one or more devices. Data,
tensor and pipeline parallelism (and their compositions) are produced by
:func:`build_strategy`; expert and sequence parallelism are expressible by
hand through the same three maps.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import (
    CoverageGap,
    DeviceCountMismatch,
    IndivisibleBatch,
    IndivisibleLayerCount,
    IndivisibleSliceDim,
    InconsistentBaseShape,
    MalformedConfig,
    ReshardError,
    TilingGap,
    TilingOverlap,
    UnknownDevice,
)
from .tensor import Dtype, Range, SplitGrid, check_tiling, grid_cells, grid_from_ranges, numel


class Kind(str, enum.Enum):
    MODEL = "model"
    DATA = "data"


@dataclass(frozen=True, order=True)
class TensorId:
    kind: Kind
    path: str

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        segs = self.path.split("/")
        if not self.path or any(not s for s in segs):
            raise ValueError(f"invalid tensor path {self.path!r}")

    @property
    def segments(self) -> list:
        return self.path.split("/")

    def __str__(self):
        return self.path

    @classmethod
    def model(cls, path: str) -> "TensorId":
        return cls(Kind.MODEL, path)

    @classmethod
    def data(cls, path: str) -> "TensorId":
        return cls(Kind.DATA, path)


@dataclass(frozen=True, order=True)
class DeviceId:
    worker: int
    local: int

    def __post_init__(self):
        if self.worker < 0 or self.local < 0:
            raise ValueError(f"negative device index {self.worker}:{self.local}")

    def __str__(self):
        return f"{self.worker}:{self.local}"

    @classmethod
    def parse(cls, text: str) -> "DeviceId":
        try:
            w, d = text.split(":")
            return cls(int(w), int(d))
        except ValueError:
            raise ValueError(f"bad device id {text!r}, expected <worker>:<device>") from None


@dataclass(frozen=True)
class WorkerSpec:
    worker: int
    devices: int
    endpoint: Optional[str] = None


@dataclass(frozen=True)
class ClusterSpec:
    """Resource pool: workers with explicit ids so disjoint pools never alias."""

    workers: tuple

    def __post_init__(self):
        ws = tuple(w if isinstance(w, WorkerSpec) else WorkerSpec(*w) for w in self.workers)
        object.__setattr__(self, "workers", ws)
        ids = [w.worker for w in ws]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate worker ids in {ids}")
        if sum(w.devices for w in ws) < 1:
            raise ValueError("cluster has no devices")

    @classmethod
    def uniform(cls, n_workers: int, devices_per_worker: int, first_worker: int = 0) -> "ClusterSpec":
        return cls(tuple(WorkerSpec(first_worker + i, devices_per_worker) for i in range(n_workers)))

    @classmethod
    def from_devices(cls, devices: Iterable[DeviceId]) -> "ClusterSpec":
        per = {}
        for d in devices:
            per[d.worker] = max(per.get(d.worker, 0), d.local + 1)
        return cls(tuple(WorkerSpec(w, n) for w, n in sorted(per.items())))

    def devices(self) -> list:
        """Devices numbered worker-major, then by local index."""
        out = []
        for w in sorted(self.workers, key=lambda w: w.worker):
            out.extend(DeviceId(w.worker, i) for i in range(w.devices))
        return out

    @property
    def device_count(self) -> int:
        return sum(w.devices for w in self.workers)

    def worker_ids(self) -> list:
        return sorted(w.worker for w in self.workers)


@dataclass(frozen=True)
class TensorInfo:
    dtype: Dtype
    shape: tuple

    @property
    def nbytes(self) -> int:
        return numel(self.shape) * self.dtype.width


@dataclass(frozen=True)
class ModelTensor:
    """Catalog entry for a model (or optimizer) tensor.

    ``tp_dim`` is the dimension tensor parallelism slices; ``None`` keeps the
    tensor whole and replicates it across the tensor-parallel group.
    ``layer`` groups tensors for pipeline stages (defaults to catalog index).
    """

    path: str
    shape: tuple
    dtype: Dtype = Dtype.F32
    tp_dim: Optional[int] = 0
    layer: Optional[int] = None


@dataclass(frozen=True)
class DataTensor:
    path: str
    shape: tuple
    dtype: Dtype = Dtype.U8


@dataclass(frozen=True)
class JobConfig:
    global_batch: int
    micro_batch: int
    dp: int = 1
    tp: int = 1
    pp: int = 1

    def __post_init__(self):
        for name in ("global_batch", "micro_batch", "dp", "tp", "pp"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.global_batch != self.micro_batch * self.dp:
            raise IndivisibleBatch(
                f"global batch {self.global_batch} != micro batch {self.micro_batch} x dp {self.dp}"
            )

    @classmethod
    def create(cls, global_batch: int, dp: int = 1, tp: int = 1, pp: int = 1) -> "JobConfig":
        if global_batch % dp:
            raise IndivisibleBatch(f"global batch {global_batch} not divisible by dp {dp}")
        return cls(global_batch, global_batch // dp, dp, tp, pp)

    @property
    def devices(self) -> int:
        return self.dp * self.tp * self.pp

    def reconfigure(self, dp: int, tp: int, pp: int) -> "JobConfig":
        """New degrees with the global batch held fixed."""
        return JobConfig.create(self.global_batch, dp, tp, pp)

    def check_devices(self, count: int) -> None:
        if count != self.devices:
            raise DeviceCountMismatch(
                f"(T,P,D)=({self.tp},{self.pp},{self.dp}) needs {self.devices} devices, got {count}"
            )


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    ids: tuple = ()


@dataclass(frozen=True, eq=False)
class PTC:
    """Catalog + sigma (grid per tensor) + phi (cell -> partition) + alpha (partition -> devices).

    ``phi`` is keyed by ``(TensorId, cell_index)`` where cell indices follow
    :func:`grid_cells` order. Treat instances as immutable.
    """

    catalog: dict
    sigma: dict
    phi: dict
    alpha: dict

    def cells(self, tid: TensorId) -> list:
        return grid_cells(self.catalog[tid].shape, self.sigma[tid])

    @functools.cached_property
    def _cells(self) -> dict:
        return {tid: self.cells(tid) for tid in self.catalog}

    def cell_range(self, tid: TensorId, index: int) -> Range:
        return self._cells[tid][index]

    @functools.cached_property
    def devices(self) -> tuple:
        out = set()
        for devs in self.alpha.values():
            out.update(devs)
        return tuple(sorted(out))

    def hosts(self, tid: TensorId, index: int) -> frozenset:
        return frozenset(self.alpha.get(self.phi.get((tid, index)), ()))

    def layout(self) -> dict:
        """``(tid, cell_index) -> frozenset(devices)`` i.e. alpha composed with phi."""
        return {
            (tid, i): self.hosts(tid, i) for tid in self.catalog for i in range(len(self._cells[tid]))
        }

    def multi_cell_devices(self) -> list:
        """``(device, tid)`` pairs where a device hosts more than one cell of a tensor."""
        out = []
        for dev, cells in self._hosted.items():
            seen = set()
            for tid, _ in cells:
                if tid in seen:
                    out.append((dev, tid))
                seen.add(tid)
        return out

    @functools.cached_property
    def _hosted(self) -> dict:
        out = {d: [] for d in self.devices}
        for tid in self.catalog:
            for i, r in enumerate(self._cells[tid]):
                for d in self.hosts(tid, i):
                    out.setdefault(d, []).append((tid, r))
        return out

    def hosted_subtensors(self, device: DeviceId) -> list:
        return hosted_subtensors(self, device)

    def hosted_bytes(self, device: DeviceId, kind: Optional[Kind] = None) -> int:
        return sum(
            r.numel * self.catalog[tid].dtype.width
            for tid, r in self.hosted_subtensors(device)
            if kind is None or tid.kind == kind
        )

    def equivalent(self, other: "PTC") -> bool:
        """Same catalog, same grids, same cell placement (partition names may differ)."""
        return (
            self.catalog == other.catalog
            and self.sigma == other.sigma
            and self.layout() == other.layout()
        )

    def model_ids(self) -> list:
        return [t for t in self.catalog if t.kind == Kind.MODEL]

    def with_alpha(self, alpha: dict) -> "PTC":
        return PTC(self.catalog, self.sigma, self.phi, alpha)

    def without_devices(self, failed: Iterable[DeviceId]) -> "PTC":
        failed = set(failed)
        return self.with_alpha({p: frozenset(d for d in ds if d not in failed) for p, ds in self.alpha.items()})

    def remap_devices(self, mapping: dict) -> "PTC":
        return self.with_alpha({p: frozenset(mapping[d] for d in ds) for p, ds in self.alpha.items()})


def hosted_subtensors(ptc: PTC, device: DeviceId) -> list:
    """Cells placed on ``device`` in (catalog order, cell index) order."""
    if device not in ptc._hosted:
        raise UnknownDevice(f"device {device} is not in this PTC")
    return list(ptc._hosted[device])


def validate(ptc: PTC) -> list:
    out = []
    paths = {}
    for tid in ptc.catalog:
        if tid.path in paths:
            out.append(Violation("DuplicatePath", f"{tid.path} used by two tensors", (tid,)))
        paths[tid.path] = tid
    for tid, info in ptc.catalog.items():
        g = ptc.sigma.get(tid)
        if g is None:
            out.append(Violation("MissingSigma", f"no slicing for {tid}", (tid,)))
            continue
        if len(g.shape) != len(info.shape):
            out.append(Violation("SigmaRankMismatch", f"grid rank differs for {tid}", (tid,)))
            continue
        bad = [
            (d, p) for d, (pts, ext) in enumerate(zip(g.splits, info.shape)) for p in pts if not 0 < p < ext
        ]
        if bad:
            out.append(Violation("InvalidSplitPoint", f"{tid}: split points {bad} outside extents", (tid,)))
            continue
        if g.shape != info.shape:
            out.append(Violation("SigmaShapeMismatch", f"grid shape {g.shape} vs {info.shape}", (tid,)))
            continue
        for i in range(g.ncells):
            part = ptc.phi.get((tid, i))
            if part is None:
                out.append(Violation("UnpartitionedCell", f"{tid} cell {i} has no partition", ((tid, i),)))
            elif part not in ptc.alpha:
                out.append(Violation("UnallocatedPartition", f"partition {part} not allocated", (part,)))
    for tid, i in ptc.phi:
        g = ptc.sigma.get(tid)
        if tid not in ptc.catalog or g is None or not 0 <= i < g.ncells:
            out.append(Violation("UnknownCell", f"phi maps unknown cell {tid}#{i}", ((tid, i),)))
    used = set(ptc.phi.values())
    for part, devs in ptc.alpha.items():
        if part in used and not devs:
            out.append(Violation("UnhostedPartition", f"partition {part} has no device", (part,)))
    # dedupe repeated UnallocatedPartition reports
    uniq, keys = [], set()
    for v in out:
        k = (v.kind, v.ids)
        if k not in keys:
            keys.add(k)
            uniq.append(v)
    return uniq


def _stage_of_layers(n_layers: int, stages: int) -> list:
    # contiguous, balanced to within one layer, remainder to the earliest stages
    base, extra = divmod(n_layers, stages)
    out = []
    for s in range(stages):
        out.extend([s] * (base + (1 if s < extra else 0)))
    return out


def device_coords(devices: Sequence[DeviceId], job: JobConfig) -> dict:
    """Map each device to its (dp, pp, tp) coordinate, lexicographic over enumeration order."""
    P, T = job.pp, job.tp
    return {d: (i // (P * T), (i // T) % P, i % T) for i, d in enumerate(devices)}


def build_strategy(model: Sequence[ModelTensor], dataset: Sequence[DataTensor], cluster, job: JobConfig) -> PTC:
    """Lay out ``model`` and ``dataset`` for ``job``'s (T, P, D) degrees.

    ``cluster`` is a :class:`ClusterSpec` or an explicit device sequence; the
    sequence order is the device enumeration that coordinates follow.
    """
    devices = cluster.devices() if isinstance(cluster, ClusterSpec) else list(cluster)
    job.check_devices(len(devices))
    T, P, D = job.tp, job.pp, job.dp

    layer_keys = []
    for i, m in enumerate(model):
        key = i if m.layer is None else m.layer
        if key not in layer_keys:
            layer_keys.append(key)
    if model and len(layer_keys) < P:
        raise IndivisibleLayerCount(f"{len(layer_keys)} layers cannot fill {P} pipeline stages")
    stage_of = dict(zip(layer_keys, _stage_of_layers(len(layer_keys), P)))

    catalog, sigma, phi = {}, {}, {}
    for i, m in enumerate(model):
        tid = TensorId.model(m.path)
        shape = tuple(m.shape)
        if tid in catalog:
            raise MalformedConfig(f"duplicate tensor {m.path}")
        catalog[tid] = TensorInfo(Dtype.parse(m.dtype), shape)
        stage = stage_of[i if m.layer is None else m.layer]
        if m.tp_dim is None or T == 1:
            sigma[tid] = SplitGrid.identity(shape)
        else:
            if not 0 <= m.tp_dim < len(shape):
                raise MalformedConfig(f"{m.path}: tp_dim {m.tp_dim} out of range")
            if shape[m.tp_dim] % T:
                raise IndivisibleSliceDim(f"{m.path}: extent {shape[m.tp_dim]} not divisible by T={T}")
            sigma[tid] = SplitGrid.even(shape, m.tp_dim, T)
        if m.tp_dim is None:
            phi[(tid, 0)] = f"model/s{stage}/r"
        else:
            for j in range(sigma[tid].ncells):
                phi[(tid, j)] = f"model/s{stage}/t{j}" if T > 1 else f"model/s{stage}/t0"

    groups = _stage_of_layers(len(dataset), D) if len(dataset) >= D else list(range(len(dataset)))
    for k, dt in enumerate(dataset):
        tid = TensorId.data(dt.path)
        if tid in catalog or any(t.path == dt.path for t in catalog):
            raise MalformedConfig(f"duplicate tensor {dt.path}")
        shape = tuple(dt.shape)
        catalog[tid] = TensorInfo(Dtype.parse(dt.dtype), shape)
        sigma[tid] = SplitGrid.identity(shape)
        phi[(tid, 0)] = f"data/d{groups[k]}"

    coords = device_coords(devices, job)
    alpha = {}
    for part in sorted(set(phi.values())):
        bits = part.split("/")
        if bits[0] == "model":
            s = int(bits[1][1:])
            if bits[2] == "r":
                alpha[part] = frozenset(d for d, (_, pp, _) in coords.items() if pp == s)
            else:
                j = int(bits[2][1:])
                alpha[part] = frozenset(d for d, (_, pp, tp) in coords.items() if pp == s and tp == j)
        else:
            g = int(bits[1][1:])
            alpha[part] = frozenset(d for d, (dp, _, _) in coords.items() if dp == g)
    return PTC(catalog, sigma, phi, alpha)


# --- parallelization-configuration documents ---------------------------------

def _is_leaf(node) -> bool:
    return isinstance(node, dict) and "base" in node and "shape" in node


def _walk(node, prefix=()):
    if _is_leaf(node):
        yield prefix, node
        return
    if not isinstance(node, dict):
        raise MalformedConfig(f"expected object at {'/'.join(prefix) or '<root>'}")
    for k, v in node.items():
        yield from _walk(v, prefix + (k,))


def serialize_parallel_config(ptc: PTC) -> list:
    """One object per device rank (device enumeration order), mirroring the tensor tree."""
    doc = []
    for dev in ptc.devices:
        tree = {}
        for tid, r in hosted_subtensors(ptc, dev):
            info = ptc.catalog[tid]
            node = tree
            segs = tid.segments
            for s in segs[:-1]:
                node = node.setdefault(s, {})
            full = r == Range.full(info.shape)
            node[segs[-1]] = {
                "base": tid.path,
                "kind": tid.kind.value,
                "shape": list(info.shape),
                "range": None if full else [list(b) for b in r.bounds],
                "dtype": info.dtype.name,
            }
        doc.append(tree)
    return doc


def parse_parallel_config(doc, devices: Optional[Sequence[DeviceId]] = None) -> PTC:
    """Rebuild a PTC from per-rank documents.

    Rank ``i`` is bound to ``devices[i]`` (default ``DeviceId(0, i)``).
    Cells hosted by exactly the same device set share one partition.
    """
    if not isinstance(doc, list):
        raise MalformedConfig("top level must be a list of per-rank objects")
    if devices is None:
        devices = [DeviceId(0, i) for i in range(len(doc))]
    elif isinstance(devices, ClusterSpec):
        devices = devices.devices()
    if len(devices) != len(doc):
        raise DeviceCountMismatch(f"{len(doc)} ranks but {len(devices)} devices")

    infos = {}
    placed = {}  # tid -> {Range: set(devices)}
    order = []
    for rank, tree in enumerate(doc):
        for prefix, leaf in _walk(tree):
            try:
                base = leaf["base"]
                kind = Kind(leaf.get("kind", "model"))
                shape = tuple(int(x) for x in leaf["shape"])
                dtype = Dtype.parse(leaf.get("dtype", "F32"))
                rng = leaf.get("range")
                tid = TensorId(kind, base)
                r = Range.full(shape) if rng is None else Range(tuple(tuple(b) for b in rng))
            except ReshardError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedConfig(f"rank {rank} leaf {'/'.join(prefix)}: {e}") from None
            info = TensorInfo(dtype, shape)
            if tid in infos and infos[tid] != info:
                raise InconsistentBaseShape(f"ranks disagree on {base}: {infos[tid]} vs {info}")
            try:
                r.check_within(shape)
            except ReshardError as e:
                raise MalformedConfig(f"rank {rank} {base}: {e}") from None
            if tid not in infos:
                infos[tid] = info
                order.append(tid)
                placed[tid] = {}
            placed[tid].setdefault(r, set()).add(devices[rank])

    catalog, sigma, phi, groups = {}, {}, {}, {}
    for tid in order:
        info = infos[tid]
        ranges = list(placed[tid])
        try:
            check_tiling(ranges, info.shape)
        except (TilingGap, TilingOverlap) as e:
            raise CoverageGap(f"{tid.path}: {e}") from None
        g = grid_from_ranges(info.shape, ranges)
        cells = grid_cells(info.shape, g)
        if set(cells) != set(ranges):
            raise MalformedConfig(f"{tid.path}: declared ranges do not form an axis-aligned grid")
        catalog[tid] = info
        sigma[tid] = g
        for i, c in enumerate(cells):
            devs = frozenset(placed[tid][c])
            part = groups.setdefault(devs, f"p{len(groups)}")
            phi[(tid, i)] = part
    alpha = {p: devs for devs, p in groups.items()}
    return PTC(catalog, sigma, phi, alpha)
