"""Dataset index, deterministic epoch shuffling and exactly-once repartitioning.

Sample order inside an epoch is fixed by ``(seed, epoch)`` alone, so every
worker derives the same permutation independently. Global step ``i`` always
covers epoch positions ``[i*B, (i+1)*B)``; changing the data-parallel degree
only changes how that window is cut among ranks, never which samples it
holds, so the global read order is unaffected by reconfiguration.
"""
from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence
from urllib.parse import unquote, urlparse

from .errors import IndivisibleBatch, NotFound, StepBeyondEpoch
from .ptc import JobConfig
from .tensor import Tensor, read_ptx, to_ptx

MASK64 = (1 << 64) - 1


def splitmix64(seed: int):
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


def permutation(n: int, seed: int, epoch: int) -> list:
    """Fisher-Yates (high index down) driven by splitmix64 seeded with ``seed ^ epoch``."""
    order = list(range(n))
    rng = splitmix64((seed ^ epoch) & MASK64)
    for i in range(n - 1, 0, -1):
        j = next(rng) % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


@dataclass(frozen=True)
class Sample:
    file_id: str
    offset: int
    length: int


@dataclass(frozen=True)
class Locator:
    """Where a copy of a dataset file lives: on a worker, or in remote storage."""

    kind: str  # "worker" | "remote"
    uri: str
    worker: Optional[int] = None


@dataclass(frozen=True)
class Location:
    source: str  # "local" | "peer" | "remote"
    locator: Locator
    offset: int
    length: int


@dataclass
class DatasetIndex:
    samples: list
    files: dict  # file id -> list of Locator
    seed: int = 0
    sizes: dict = field(default_factory=dict)  # file id -> byte size, when known
    cursor: tuple = (0, 0)  # (epoch, global step)

    def __post_init__(self):
        for s in self.samples:
            if s.file_id not in self.files:
                raise ValueError(f"sample references unknown file {s.file_id!r}")
            size = self.sizes.get(s.file_id)
            if s.offset < 0 or s.length <= 0 or (size is not None and s.offset + s.length > size):
                raise ValueError(f"sample {s} outside file bounds")
        self._orders = {}

    def __len__(self):
        return len(self.samples)

    def order(self, epoch: int) -> list:
        if epoch not in self._orders:
            self._orders[epoch] = permutation(len(self.samples), self.seed, epoch)
        return self._orders[epoch]

    def steps_per_epoch(self, global_batch: int) -> int:
        return -(-len(self.samples) // global_batch)

    def advance(self, global_batch: int, steps: int = 1) -> tuple:
        epoch, step = self.cursor
        step += steps
        per = self.steps_per_epoch(global_batch)
        while step >= per:
            step -= per
            epoch += 1
        self.cursor = (epoch, step)
        return self.cursor


def shuffle_epoch(idx: DatasetIndex, epoch: int) -> list:
    return list(idx.order(epoch))


@dataclass(frozen=True)
class PartitionIndex:
    rank: int
    positions: tuple
    epoch: int
    parent: DatasetIndex = field(repr=False, compare=False)
    batch_share: int = 0

    def __len__(self):
        return len(self.positions)

    def batch_positions(self, step: int, global_batch: int) -> list:
        # positions are ascending, so the step's window is one contiguous run
        lo = bisect.bisect_left(self.positions, step * global_batch)
        hi = bisect.bisect_left(self.positions, (step + 1) * global_batch)
        return list(self.positions[lo:hi])

    def sample(self, k: int) -> Sample:
        if not 0 <= k < len(self.positions):
            raise IndexError(f"local sample {k} out of range ({len(self.positions)} assigned)")
        return self.parent.samples[self.parent.order(self.epoch)[self.positions[k]]]


def repartition(idx: DatasetIndex, job: JobConfig, at_step: int, new_dp: int, epoch: Optional[int] = None) -> list:
    """Deal the rest of the epoch, from ``at_step`` on, to ``new_dp`` ranks.

    Rank ``d`` owns the ``d``-th contiguous slice of width ``B/new_dp`` of
    every remaining global batch. A final short batch is cut the same way.
    """
    B = job.global_batch
    if new_dp < 1 or B % new_dp:
        raise IndivisibleBatch(f"global batch {B} not divisible by dp {new_dp}")
    steps = idx.steps_per_epoch(B)
    if not 0 <= at_step <= steps:
        raise StepBeyondEpoch(f"step {at_step} outside epoch of {steps} steps")
    epoch = idx.cursor[0] if epoch is None else epoch
    n = len(idx)
    share = B // new_dp
    per_rank = [[] for _ in range(new_dp)]
    for i in range(at_step, steps):
        base = i * B
        for d in range(new_dp):
            per_rank[d].extend(range(base + d * share, min(base + (d + 1) * share, n)))
    return [PartitionIndex(d, tuple(p), epoch, idx, share) for d, p in enumerate(per_rank)]


def locate_sample(pidx: PartitionIndex, k: int, worker: Optional[int] = None) -> Location:
    """File and byte range of the ``k``-th local sample, preferring local > peer > remote copies."""
    s = pidx.sample(k)
    locs = pidx.parent.files[s.file_id]

    def rank(loc):
        if loc.kind == "worker":
            return (0 if loc.worker == worker else 1, loc.worker)
        return (2, 0)

    best = min(locs, key=rank)
    source = ("local", "peer", "remote")[rank(best)[0]]
    return Location(source, best, s.offset, s.length)


class EpochReader:
    """Simulated data loader: reads whole global steps, survives dp changes mid-epoch."""

    def __init__(self, idx: DatasetIndex, job: JobConfig):
        self.idx = idx
        self.job = job
        self.read_order = []  # (epoch, sample index) in global read order
        self._digest = hashlib.sha256()
        self.partitions = repartition(idx, job, idx.cursor[1], job.dp)

    def step(self, count: int = 1) -> None:
        B = self.job.global_batch
        for _ in range(count):
            epoch, step = self.idx.cursor
            order = self.idx.order(epoch)
            for p in self.partitions:
                for pos in p.batch_positions(step, B):
                    self.read_order.append((epoch, order[pos]))
                    self._digest.update(f"{epoch}:{order[pos]};".encode())
            self.idx.advance(B)
            if self.idx.cursor[0] != epoch:
                self.partitions = repartition(self.idx, self.job, 0, self.job.dp)

    def reconfigure(self, job: JobConfig) -> None:
        if job.global_batch != self.job.global_batch:
            raise ValueError("global batch size must stay constant across reconfigurations")
        self.job = job
        self.partitions = repartition(self.idx, job, self.idx.cursor[1], job.dp)

    def checksum(self) -> str:
        return self._digest.hexdigest()


# --- on-disk dataset files ----------------------------------------------------

def write_dataset(directory, samples: Sequence[Tensor], files: int = 1, seed: int = 0, workers: Sequence[int] = ()) -> DatasetIndex:
    """Write samples round-robin into ``files`` binary files plus an ``index.txt`` sidecar.

    Each file is recorded as held by the listed ``workers`` (file ``i`` on
    worker ``workers[i % len(workers)]``) and by remote storage.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = [bytearray() for _ in range(files)]
    entries = []
    for i, t in enumerate(samples):
        f = i % files
        data = to_ptx(t)
        entries.append(Sample(f"f{f}", len(blobs[f]), len(data)))
        blobs[f] += data
    locs, sizes = {}, {}
    for f, blob in enumerate(blobs):
        fid = f"f{f}"
        path = directory / f"{fid}.bin"
        path.write_bytes(bytes(blob))
        sizes[fid] = len(blob)
        locs[fid] = [Locator("remote", path.as_uri())]
        if workers:
            w = workers[f % len(workers)]
            locs[fid].insert(0, Locator("worker", str(path), w))
    (directory / "index.txt").write_text("".join(f"{s.file_id} {s.offset} {s.length}\n" for s in entries))
    return DatasetIndex(entries, locs, seed, sizes)


def read_index(directory, seed: int = 0) -> DatasetIndex:
    directory = Path(directory)
    entries = []
    for n, line in enumerate((directory / "index.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            fid, off, length = line.split()
            entries.append(Sample(fid, int(off), int(length)))
        except ValueError:
            raise ValueError(f"index.txt line {n}: expected '<file-id> <offset> <length>'") from None
    files, sizes = {}, {}
    for fid in {s.file_id for s in entries}:
        path = directory / f"{fid}.bin"
        if not path.exists():
            raise NotFound(f"missing data file {path}")
        files[fid] = [Locator("remote", path.as_uri())]
        sizes[fid] = path.stat().st_size
    return DatasetIndex(entries, files, seed, sizes)


def read_sample(loc: Location) -> Tensor:
    uri = loc.locator.uri
    path = unquote(urlparse(uri).path) if uri.startswith("file:") else uri
    with open(path, "rb") as fh:
        fh.seek(loc.offset)
        data = fh.read(loc.length)
    t, used = read_ptx(data)
    if used != loc.length:
        raise ValueError(f"sample at {loc.offset} has trailing bytes")
    return t
