"""Per-worker in-memory tensor store with hierarchical paths and range queries."""
from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import InvalidReplicaCount, NotFound
from .tensor import Range, Tensor, from_ptx, parse_range_spec, resolve_spec, slice_tensor, to_ptx

STAGING = ".staging"
REPLICA = ".replica"


@dataclass(frozen=True)
class StorePath:
    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("store path needs at least one segment")
        for s in segs:
            if not s or "/" in s or any(c.isspace() for c in s):
                raise ValueError(f"invalid path segment {s!r}")

    @classmethod
    def parse(cls, text: Union[str, "StorePath"]) -> "StorePath":
        if isinstance(text, StorePath):
            return text
        if not text.startswith("/"):
            raise ValueError(f"store paths are absolute: {text!r}")
        return cls(tuple(text.strip("/").split("/")) if text.strip("/") else ())

    def __str__(self):
        return "/" + "/".join(self.segments)

    def __truediv__(self, other) -> "StorePath":
        extra = other.segments if isinstance(other, StorePath) else tuple(str(other).strip("/").split("/"))
        return StorePath(self.segments + extra)

    def is_under(self, base: "StorePath") -> bool:
        return self.segments[: len(base.segments)] == base.segments


def _norm(path) -> str:
    return str(StorePath.parse(path))


def _norm_prefix(prefix) -> str:
    if prefix in ("/", "", None):
        return "/"
    return _norm(prefix) + "/"


@dataclass(frozen=True)
class StoreEntry:
    path: str
    tensor: Tensor
    version: int


class TensorStore:
    """Thread-safe path -> tensor map.

    Entries are immutable, so readers take a reference without locking; the
    lock only serialises writers and version bookkeeping.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._entries = {}
        self._versions = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, path) -> bool:
        return _norm(path) in self._entries

    def _next_version(self, key: str) -> int:
        v = self._versions.get(key, 0) + 1
        self._versions[key] = v
        return v

    def upload(self, path, t: Tensor) -> int:
        key = _norm(path)
        with self._lock:
            v = self._next_version(key)
            self._entries[key] = StoreEntry(key, t, v)
        return v

    def entry(self, path) -> StoreEntry:
        key = _norm(path)
        e = self._entries.get(key)
        if e is None:
            raise NotFound(f"no tensor at {key}")
        return e

    def query(self, path, range=None) -> Tensor:
        """Full tensor, or the sub-tensor selected by ``range``.

        ``range`` may be a :class:`Range`, a spec string such as ``[:,2:4]``
        or a parsed spec tuple with ``None`` for open bounds.
        """
        t = self.entry(path).tensor
        if range is None:
            return t
        if isinstance(range, str):
            range = parse_range_spec(range)
        if not isinstance(range, Range):
            range = resolve_spec(range, t.shape)
        return slice_tensor(t, range)

    def version(self, path) -> int:
        return self.entry(path).version

    def list(self, prefix="/") -> list:
        """Paths under ``prefix``, relative to it, sorted."""
        pre = _norm_prefix(prefix)
        return sorted(k[len(pre):] for k in list(self._entries) if k.startswith(pre))

    def paths(self) -> list:
        return sorted(self._entries)

    def delete(self, path) -> bool:
        with self._lock:
            return self._entries.pop(_norm(path), None) is not None

    def delete_prefix(self, prefix) -> int:
        pre = _norm_prefix(prefix)
        with self._lock:
            doomed = [k for k in self._entries if k.startswith(pre)]
            for k in doomed:
                del self._entries[k]
        return len(doomed)

    def rename(self, src, dst) -> int:
        """Atomically move an entry; readers see either the old or the new tensor at ``dst``."""
        s, d = _norm(src), _norm(dst)
        with self._lock:
            e = self._entries.pop(s, None)
            if e is None:
                raise NotFound(f"no tensor at {s}")
            v = self._next_version(d)
            self._entries[d] = StoreEntry(d, e.tensor, v)
        return v

    def commit(self, renames, deletes=()) -> None:
        """Apply a batch of deletes and renames under one lock acquisition."""
        with self._lock:
            pending = []
            for s, d in renames:
                e = self._entries.get(_norm(s))
                if e is None:
                    raise NotFound(f"no tensor at {_norm(s)}")
                pending.append((_norm(s), _norm(d), e))
            for p in deletes:
                self._entries.pop(_norm(p), None)
            for s, d, e in pending:
                del self._entries[s]
                self._entries[d] = StoreEntry(d, e.tensor, self._next_version(d))

    def snapshot(self, prefix="/") -> dict:
        pre = _norm_prefix(prefix)
        return {k: e.tensor for k, e in list(self._entries.items()) if k.startswith(pre)}

    # -- hierarchical state mapping --

    def save_state(self, state: dict, base) -> int:
        """Store every leaf of a nested name -> tensor mapping under ``base``."""
        base = StorePath.parse(base)
        count = 0
        stack = [((), state)]
        while stack:
            prefix, node = stack.pop()
            for k, v in node.items():
                if isinstance(v, dict):
                    stack.append((prefix + (str(k),), v))
                else:
                    self.upload(StorePath(base.segments + prefix + (str(k),)), v)
                    count += 1
        return count

    def load_state(self, base) -> dict:
        base = StorePath.parse(base)
        rels = self.list(base)
        if not rels:
            raise NotFound(f"nothing stored under {base}")
        tree = {}
        for rel in rels:  # sorted, so siblings come out lexicographic
            segs = rel.split("/")
            node = tree
            for s in segs[:-1]:
                node = node.setdefault(s, {})
            node[segs[-1]] = self.query(base / rel)
        return tree

    # -- persistence --

    def persist(self, directory, prefix="/") -> int:
        """Write entries under ``prefix`` as ``.ptx`` files mirroring their paths."""
        directory = Path(directory)
        n = 0
        for rel, t in sorted(self._relative(prefix).items()):
            target = directory.joinpath(*rel.split("/"))
            target = target.with_name(target.name + ".ptx")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(to_ptx(t))
            n += 1
        return n

    def load_dir(self, directory, prefix="/") -> int:
        directory = Path(directory)
        if not directory.is_dir():
            raise NotFound(f"no directory {directory}")
        base = _norm_prefix(prefix)
        n = 0
        for root, _, files in sorted(os.walk(directory)):
            for f in sorted(files):
                if not f.endswith(".ptx"):
                    continue
                rel = Path(root, f).relative_to(directory)
                segs = rel.parts[:-1] + (rel.name[: -len(".ptx")],)
                self.upload(base + "/".join(segs), from_ptx(Path(root, f).read_bytes()))
                n += 1
        return n

    def _relative(self, prefix) -> dict:
        pre = _norm_prefix(prefix)
        return {k[len(pre):]: t for k, t in self.snapshot(prefix).items()}


def is_live(path: str) -> bool:
    seg = path.strip("/").split("/", 1)[0]
    return seg not in (STAGING, REPLICA)


def replicate_round_robin(stores: dict, n: int) -> dict:
    """Copy each worker's live entries onto the next ``n`` workers (wrapping).

    ``stores`` maps worker id -> :class:`TensorStore`; workers are ordered by
    id. Returns ``{(worker, path): [replica workers]}``.
    """
    workers = sorted(stores)
    if not 0 <= n < len(workers):
        raise InvalidReplicaCount(f"need 0 <= n < {len(workers)} workers, got {n}")
    placement = {}
    for i, w in enumerate(workers):
        targets = [workers[(i + k) % len(workers)] for k in range(1, n + 1)]
        for path, t in stores[w].snapshot().items():
            if not is_live(path):
                continue
            for r in targets:
                stores[r].upload(f"/{REPLICA}/{w}{path}", t)
            placement[(w, path)] = targets
    return placement


def restore_worker(stores: dict, placement: dict, worker) -> int:
    """Repopulate ``worker``'s live entries from the first replica that still has them."""
    n = 0
    for (w, path), replicas in placement.items():
        if w != worker:
            continue
        for r in replicas:
            rep = f"/{REPLICA}/{w}{path}"
            if r in stores and rep in stores[r]:
                stores[worker].upload(path, stores[r].query(rep))
                n += 1
                break
        else:
            raise NotFound(f"no surviving replica of {path} from worker {w}")
    return n
