"""Exact flat and HNSW vector indexes with thresholded and top-k search."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..core import ConfigError, InputError, NORM_TOLERANCE

DEFAULT_THRESHOLD_CAP = 64
MAX_LEVEL = 16


@dataclass(frozen=True)
class IndexEntry:
    id: str
    vector: np.ndarray


@dataclass(frozen=True)
class SearchHit:
    """One search result. Hit lists sort by similarity desc, then id asc."""

    id: str
    similarity: float

    def to_dict(self) -> dict:
        return {"id": self.id, "similarity": self.similarity}


@dataclass(frozen=True)
class HnswParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 320
    rng_seed: int = 42

    @property
    def m0(self) -> int:
        return 2 * self.m

    @property
    def level_lambda(self) -> float:
        return 1.0 / math.log(self.m)

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError([f"hnsw m must be >= 2 (got {self.m})"])
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ConfigError(["ef_construction and ef_search must be positive"])


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def hit_order(hit: SearchHit) -> tuple[float, str]:
    return (-hit.similarity, hit.id)


def _sorted_hits(ids: Iterable[str], sims: Iterable[float]) -> list[SearchHit]:
    return sorted((SearchHit(i, float(s)) for i, s in zip(ids, sims)), key=hit_order)


class ModalityIndex:
    """Shared bookkeeping: id table, dense vector matrix, locking, counters."""

    kind = ""

    def __init__(self, dim: int, capacity: int = 64):
        if dim < 1:
            raise ConfigError([f"index dimension must be positive (got {dim})"])
        self.dim = dim
        self.ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._vecs = np.zeros((max(1, capacity), dim), dtype=np.float64)
        self._lock = RWLock()
        self.search_count = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, id: str) -> bool:
        return id in self._pos

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: len(self.ids)]

    def vector(self, id: str) -> np.ndarray:
        return self._vecs[self._pos[id]].copy()

    def _check(self, entry_id: str, vector) -> np.ndarray:
        v = np.ascontiguousarray(vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise ConfigError([f"dimension mismatch: index has {self.dim}, vector has {v.shape[0]}"])
        if abs(float(np.linalg.norm(v)) - 1.0) > NORM_TOLERANCE:
            raise InputError(f"vector for {entry_id!r} is not unit-norm")
        if entry_id in self._pos:
            raise InputError(f"duplicate id {entry_id!r}")
        return v

    def check_entry(self, entry_id: str, vector) -> None:
        """Raise exactly as :meth:`insert` would, without inserting."""
        with self._lock.read():
            self._check(entry_id, vector)

    def _append(self, entry_id: str, v: np.ndarray) -> int:
        n = len(self.ids)
        if n >= self._vecs.shape[0]:
            grown = np.zeros((2 * self._vecs.shape[0], self.dim), dtype=np.float64)
            grown[:n] = self._vecs[:n]
            self._vecs = grown
        self._vecs[n] = v
        self.ids.append(entry_id)
        self._pos[entry_id] = n
        return n

    def _query(self, query) -> np.ndarray:
        q = np.ascontiguousarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ConfigError([f"dimension mismatch: index has {self.dim}, query has {q.shape[0]}"])
        return q

    def insert(self, entry: IndexEntry) -> None:
        with self._lock.write():
            self._insert(entry.id, self._check(entry.id, entry.vector))

    def insert_many(self, entries: Sequence[IndexEntry]) -> None:
        with self._lock.write():
            for e in entries:
                self._insert(e.id, self._check(e.id, e.vector))

    def search_topk(self, query, k: int) -> list[SearchHit]:
        if k < 1:
            raise InputError("k must be >= 1")
        q = self._query(query)
        with self._lock.read():
            self.search_count += 1
            if not self.ids:
                return []
            return self._topk(q, k)

    def search_threshold(self, query, theta: float, cap: int = DEFAULT_THRESHOLD_CAP) -> list[SearchHit]:
        if cap < 1:
            raise InputError("cap must be >= 1")
        q = self._query(query)
        with self._lock.read():
            self.search_count += 1
            if not self.ids:
                return []
            return self._threshold(q, theta, cap)

    def _insert(self, entry_id: str, v: np.ndarray) -> None:
        raise NotImplementedError

    def _topk(self, q: np.ndarray, k: int) -> list[SearchHit]:
        raise NotImplementedError

    def _threshold(self, q: np.ndarray, theta: float, cap: int) -> list[SearchHit]:
        raise NotImplementedError


class FlatIndex(ModalityIndex):
    """Exhaustive scan; the exact oracle for every approximate search."""

    kind = "flat"

    def _insert(self, entry_id, v):
        self._append(entry_id, v)

    def similarities(self, q: np.ndarray) -> np.ndarray:
        return self.vectors @ q

    def _topk(self, q, k):
        sims = self.similarities(q)
        if k < len(sims):
            # keep boundary ties so id ordering can settle them
            kth = np.partition(sims, len(sims) - k)[len(sims) - k]
            idx = np.nonzero(sims >= kth)[0]
        else:
            idx = np.arange(len(sims))
        return _sorted_hits((self.ids[i] for i in idx), sims[idx])[:k]

    def _threshold(self, q, theta, cap):
        sims = self.similarities(q)
        idx = np.nonzero(sims >= theta)[0]
        return _sorted_hits((self.ids[i] for i in idx), sims[idx])[:cap]


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class HnswIndex(ModalityIndex):
    """Hierarchical navigable small-world graph over unit vectors.

    Node levels come from a counter-based hash of ``(rng_seed, node)``, so
    the same insertion order always yields the same graph and nothing
    beyond the graph itself needs to be persisted.
    """

    kind = "hnsw"

    def __init__(self, dim: int, params: HnswParams | None = None, capacity: int = 64):
        super().__init__(dim, capacity)
        from ._kernels import kernels

        self._k = kernels
        self.params = params or HnswParams()
        cap = self._vecs.shape[0]
        self.levels = np.zeros(cap, dtype=np.int32)
        self.links0 = np.zeros((cap, self.params.m0), dtype=np.int32)
        self.cnt0 = np.zeros(cap, dtype=np.int32)
        self.up_off = np.full(cap, -1, dtype=np.int64)
        self.links_up = np.zeros((max(1, cap // 8), self.params.m), dtype=np.int32)
        self.cnt_up = np.zeros(self.links_up.shape[0], dtype=np.int32)
        self.n_up = 0
        self.entry = -1
        self.max_level = -1
        self._local = threading.local()

    def level_for(self, node: int) -> int:
        h = _splitmix64(_splitmix64(self.params.rng_seed) ^ node)
        u = ((h >> 11) + 1) / float(1 << 53)  # in (0, 1]
        return min(MAX_LEVEL, int(-math.log(u) * self.params.level_lambda))

    def _visited(self):
        buf = getattr(self._local, "visited", None)
        if buf is None or buf.shape[0] < self._vecs.shape[0]:
            buf = np.zeros(self._vecs.shape[0], dtype=np.uint32)
            self._local.visited = buf
            self._local.tag = 0
        return buf

    def _grow_nodes(self):
        cap = self._vecs.shape[0]
        if cap <= self.levels.shape[0]:
            return
        extra = cap - self.levels.shape[0]
        self.levels = np.concatenate([self.levels, np.zeros(extra, dtype=np.int32)])
        self.links0 = np.concatenate([self.links0, np.zeros((extra, self.params.m0), dtype=np.int32)])
        self.cnt0 = np.concatenate([self.cnt0, np.zeros(extra, dtype=np.int32)])
        self.up_off = np.concatenate([self.up_off, np.full(extra, -1, dtype=np.int64)])

    def _reserve_up(self, rows: int):
        need = self.n_up + rows
        if need <= self.links_up.shape[0]:
            return
        new = max(need, 2 * self.links_up.shape[0])
        links = np.zeros((new, self.params.m), dtype=np.int32)
        links[: self.n_up] = self.links_up[: self.n_up]
        cnt = np.zeros(new, dtype=np.int32)
        cnt[: self.n_up] = self.cnt_up[: self.n_up]
        self.links_up, self.cnt_up = links, cnt

    def _arrays(self):
        return (self._vecs, self.levels, self.links0, self.cnt0, self.up_off, self.links_up, self.cnt_up)

    def _insert(self, entry_id, v):
        node = self._append(entry_id, v)
        self._grow_nodes()
        level = self.level_for(node)
        self.levels[node] = level
        if level > 0:
            self._reserve_up(level)
            self.up_off[node] = self.n_up
            self.n_up += level
        visited = self._visited()
        self._local.tag = self._k.insert(
            *self._arrays(), visited, self._local.tag,
            node, self.entry, self.max_level, self.params.ef_construction,
        )
        if level > self.max_level:
            self.max_level = level
            self.entry = node

    def _raw_search(self, q, ef, k):
        visited = self._visited()
        ids, sims, self._local.tag = self._k.search(
            *self._arrays(), visited, self._local.tag, q, self.entry, self.max_level, ef, k
        )
        return ids, sims

    def _topk(self, q, k):
        ids, sims = self._raw_search(q, max(self.params.ef_search, k), k)
        return _sorted_hits((self.ids[i] for i in ids), sims)[:k]

    def _threshold(self, q, theta, cap):
        # over-fetch then filter: qualifying items outside the candidate pool are missed
        pool = max(self.params.ef_search, cap)
        ids, sims = self._raw_search(q, pool, pool)
        keep = sims >= theta
        return _sorted_hits((self.ids[i] for i in ids[keep]), sims[keep])[:cap]

    def neighbors(self, id: str, level: int = 0) -> list[str]:
        node = self._pos[id]
        if level == 0:
            return [self.ids[i] for i in self.links0[node, : self.cnt0[node]]]
        if level > self.levels[node]:
            return []
        row = self.up_off[node] + level - 1
        return [self.ids[i] for i in self.links_up[row, : self.cnt_up[row]]]


def build_index(kind: str, dim: int, params: HnswParams | None = None) -> ModalityIndex:
    if kind == "flat":
        return FlatIndex(dim)
    if kind == "hnsw":
        return HnswIndex(dim, params)
    raise ConfigError([f"unknown index kind {kind!r}"])
