"""Reconfiguration plans: split, move and merge operations between two layouts.

For every tensor the plan works on the common refinement of the old and new
grids. Each old cell splits into refinement fragments, every fragment a new
cell needs is fetched from a device that already holds it (unless the
destination holds it itself), and fragments are merged into the new cell.
Fragments are fetched independently per destination, so total movement is the
sum, over destinations, of the fragment bytes they do not already hold.
"""
from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import CatalogMismatch, NoSource, UnsatisfiableFragment
from .ptc import PTC, DeviceId, Kind, TensorId
from .tensor import Range, SplitGrid, cells_within, grid_refine


@dataclass(frozen=True)
class Split:
    device: DeviceId
    tensor: TensorId
    source: Range
    targets: tuple

    def __str__(self):
        return f"SPLIT dev={self.device} t={self.tensor} r={self.source} -> {_ranges(self.targets)}"


@dataclass(frozen=True)
class Move:
    tensor: TensorId
    range: Range
    src: DeviceId
    dst: DeviceId
    nbytes: int

    def __str__(self):
        return f"MOVE t={self.tensor} r={self.range} {self.src} -> {self.dst} bytes={self.nbytes}"


@dataclass(frozen=True)
class Merge:
    device: DeviceId
    tensor: TensorId
    parts: tuple
    merged: Range

    def __str__(self):
        return f"MERGE dev={self.device} t={self.tensor} {_ranges(self.parts)} -> {self.merged}"


PlanOp = Union[Split, Move, Merge]


def _ranges(rs) -> str:
    return ";".join(str(r) for r in rs)


@dataclass
class DeviceSummary:
    ingress: int = 0
    egress: int = 0
    splits: int = 0
    moves_in: int = 0
    moves_out: int = 0
    merges: int = 0


@dataclass
class ReconfigPlan:
    """Ordered ops plus the two layouts they connect.

    ``phases`` is ``(first_move_index, first_merge_index)``. The layouts map
    each device to the cells it hosts before (``sources``) and after
    (``targets``); the executor needs both to find local fragments.
    """

    ops: list
    phases: tuple
    catalog: dict
    sources: dict
    targets: dict
    refinements: dict = field(default_factory=dict)

    @property
    def splits(self) -> list:
        return self.ops[: self.phases[0]]

    @property
    def moves(self) -> list:
        return self.ops[self.phases[0]: self.phases[1]]

    @property
    def merges(self) -> list:
        return self.ops[self.phases[1]:]

    def is_empty(self) -> bool:
        return not self.ops

    @property
    def devices(self) -> list:
        return sorted(set(self.sources) | set(self.targets))

    def summary(self) -> dict:
        out = {d: DeviceSummary() for d in self.devices}
        for op in self.ops:
            if isinstance(op, Split):
                out[op.device].splits += 1
            elif isinstance(op, Move):
                out[op.src].egress += op.nbytes
                out[op.src].moves_out += 1
                out[op.dst].ingress += op.nbytes
                out[op.dst].moves_in += 1
            else:
                out[op.device].merges += 1
        return out

    def to_text(self) -> str:
        return "".join(f"{op}\n" for op in self.ops)

    @property
    def plan_id(self) -> str:
        body = self.to_text() + repr(sorted((str(d), [(t.path, str(r)) for t, r in c]) for d, c in self.targets.items()))
        return hashlib.sha1(body.encode()).hexdigest()[:12]


def _check_catalogs(a: PTC, b: PTC) -> None:
    if set(a.catalog) != set(b.catalog):
        missing = sorted(str(t) for t in set(a.catalog) ^ set(b.catalog))
        raise CatalogMismatch(f"tensor sets differ: {missing}")
    for tid, info in a.catalog.items():
        if b.catalog[tid] != info:
            raise CatalogMismatch(f"{tid}: {info} vs {b.catalog[tid]}")


def _containing_cell(grid: SplitGrid, frag: Range) -> int:
    # row-major index of the grid cell holding frag's low corner
    idx = 0
    for d, (lo, _) in enumerate(frag.bounds):
        k = bisect.bisect_right(grid.splits[d], lo)
        idx = idx * (len(grid.splits[d]) + 1) + k
    return idx


def choose_source(fragment, candidates, dst: DeviceId, egress: Optional[dict] = None) -> DeviceId:
    """Pick the device a fragment is read from.

    The destination itself when resident, else a device on the same worker,
    else the candidate with least egress so far (ties to the smallest id).
    """
    candidates = sorted(set(candidates))
    if not candidates:
        raise NoSource(f"no device holds {fragment}")
    if dst in candidates:
        return dst
    egress = egress or {}
    local = [c for c in candidates if c.worker == dst.worker]
    pool = local or candidates
    return min(pool, key=lambda c: (egress.get(c, 0), c))


def generate_plan(ptc: PTC, ptc2: PTC) -> ReconfigPlan:
    _check_catalogs(ptc, ptc2)
    refined = {tid: grid_refine(ptc.sigma[tid], ptc2.sigma[tid]) for tid in ptc.catalog}
    order = {tid: i for i, tid in enumerate(ptc.catalog)}

    splits = []
    sources = {d: ptc.hosted_subtensors(d) for d in ptc.devices}
    for dev, cells in sources.items():
        for tid, rc in cells:
            frags = cells_within(refined[tid], rc)
            if len(frags) > 1:
                splits.append(Split(dev, tid, rc, tuple(frags)))

    moves, merges = [], []
    egress = {}
    targets = {d: ptc2.hosted_subtensors(d) for d in ptc2.devices}
    for dst, cells in targets.items():
        for tid, rc in sorted(cells, key=lambda c: (order[c[0]], c[1])):
            width = ptc.catalog[tid].dtype.width
            frags = cells_within(refined[tid], rc)
            for f in frags:
                holders = ptc.hosts(tid, _containing_cell(ptc.sigma[tid], f))
                if not holders:
                    raise UnsatisfiableFragment(f"{tid} {f} is hosted nowhere")
                src = choose_source(f, holders, dst, egress)
                if src != dst:
                    nbytes = f.numel * width
                    egress[src] = egress.get(src, 0) + nbytes
                    moves.append(Move(tid, f, src, dst, nbytes))
            if len(frags) > 1:
                merges.append(Merge(dst, tid, tuple(frags), rc))

    ops = splits + moves + merges
    return ReconfigPlan(
        ops=ops,
        phases=(len(splits), len(splits) + len(moves)),
        catalog=dict(ptc.catalog),
        sources=sources,
        targets=targets,
        refinements=refined,
    )


@dataclass(frozen=True)
class PlanCost:
    ingress: dict
    egress: dict
    total: int

    def rows(self) -> list:
        devs = sorted(set(self.ingress) | set(self.egress), key=str)
        return [(d, self.ingress.get(d, 0), self.egress.get(d, 0)) for d in devs]

    def to_text(self) -> str:
        lines = ["device\tingress\tegress"]
        lines += [f"{d}\t{i}\t{e}" for d, i, e in self.rows()]
        lines.append(f"total\t{self.total}\t{self.total}")
        return "\n".join(lines) + "\n"


def plan_cost(plan: ReconfigPlan) -> PlanCost:
    ingress = {d: 0 for d in plan.devices}
    egress = dict(ingress)
    total = 0
    for op in plan.moves:
        ingress[op.dst] += op.nbytes
        egress[op.src] += op.nbytes
        total += op.nbytes
    return PlanCost(ingress, egress, total)


def central_cost(plan: ReconfigPlan, hub="central") -> PlanCost:
    """Traffic when one hub pulls every moved fragment and pushes it to its destination."""
    cost = plan_cost(plan)
    ingress, egress = dict(cost.ingress), dict(cost.egress)
    ingress[hub] = cost.total
    egress[hub] = cost.total
    return PlanCost(ingress, egress, 2 * cost.total)


# --- text format --------------------------------------------------------------

def _parse_ranges(text: str) -> tuple:
    return tuple(Range.parse(p) for p in text.split(";"))


def _kv(tok: str, key: str) -> str:
    if not tok.startswith(key + "="):
        raise ValueError(f"expected {key}=..., got {tok!r}")
    return tok[len(key) + 1:]


def parse_plan(text: str, catalog: Optional[dict] = None) -> list:
    """Parse the line format written by :meth:`ReconfigPlan.to_text`.

    Tensor kinds are looked up by path in ``catalog`` when given, else model.
    """
    kinds = {t.path: t for t in (catalog or {})}

    def tid(path):
        return kinds.get(path, TensorId(Kind.MODEL, path))

    ops = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        toks = line.split()
        try:
            if toks[0] == "SPLIT":
                _, dev, t, r, arrow, tgt = toks
                ops.append(Split(DeviceId.parse(_kv(dev, "dev")), tid(_kv(t, "t")), Range.parse(_kv(r, "r")), _parse_ranges(tgt)))
            elif toks[0] == "MOVE":
                _, t, r, src, arrow, dst, b = toks
                ops.append(Move(tid(_kv(t, "t")), Range.parse(_kv(r, "r")), DeviceId.parse(src), DeviceId.parse(dst), int(_kv(b, "bytes"))))
            elif toks[0] == "MERGE":
                _, dev, t, parts, arrow, merged = toks
                ops.append(Merge(DeviceId.parse(_kv(dev, "dev")), tid(_kv(t, "t")), _parse_ranges(parts), Range.parse(merged)))
            else:
                raise ValueError(f"unknown op {toks[0]!r}")
            if arrow != "->":
                raise ValueError("missing '->'")
        except (ValueError, IndexError) as e:
            raise ValueError(f"plan line {n}: {e}") from None
    return ops
