"""Binary index files.

Layout (little-endian)::

    magic "FRIX" | version u16 | metric u8 | kind u8 | dim u32 | count u64
    count x (id_len u16, id utf-8 bytes)
    count x dim float64 vectors
    hnsw only:
        m u32 | ef_construction u32 | ef_search u32 | rng_seed u64
        entry i64 | max_level i32 | n_up u64
        levels i32[count] | cnt0 i32[count] | links0 i32[count, 2m]
        up_off i64[count] | cnt_up i32[n_up] | links_up i32[n_up, m]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..core import FinragError
from .index import FlatIndex, HnswIndex, HnswParams, ModalityIndex

MAGIC = b"FRIX"
VERSION = 1
METRIC_INNER_PRODUCT = 1
KIND_CODES = {"flat": 0, "hnsw": 1}

_HEADER = struct.Struct("<4sHBBIQ")
_HNSW_HEADER = struct.Struct("<IIIQqiQ")


class IndexLoadError(FinragError):
    pass


def _array_bytes(a: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def dumps(index: ModalityIndex) -> bytes:
    n = len(index)
    parts = [_HEADER.pack(MAGIC, VERSION, METRIC_INNER_PRODUCT, KIND_CODES[index.kind], index.dim, n)]
    for i in index.ids:
        raw = i.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(_array_bytes(index.vectors, "<f8"))
    if isinstance(index, HnswIndex):
        p = index.params
        parts.append(_HNSW_HEADER.pack(
            p.m, p.ef_construction, p.ef_search, p.rng_seed, index.entry, index.max_level, index.n_up
        ))
        parts.append(_array_bytes(index.levels[:n], "<i4"))
        parts.append(_array_bytes(index.cnt0[:n], "<i4"))
        parts.append(_array_bytes(index.links0[:n], "<i4"))
        parts.append(_array_bytes(index.up_off[:n], "<i8"))
        parts.append(_array_bytes(index.cnt_up[: index.n_up], "<i4"))
        parts.append(_array_bytes(index.links_up[: index.n_up], "<i4"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise IndexLoadError(
                f"truncated index file: need {size} bytes for {what} at offset {self.offset}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, st: struct.Struct, what: str) -> tuple:
        return st.unpack(self.take(st.size, what))

    def array(self, dtype: str, shape: tuple[int, ...], what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dt.itemsize, what)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)


def loads(data: bytes) -> ModalityIndex:
    r = _Reader(data)
    magic, version, metric, kind, dim, n = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise IndexLoadError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise IndexLoadError(f"unsupported index format version {version} at offset 4")
    if metric != METRIC_INNER_PRODUCT:
        raise IndexLoadError(f"unknown metric id {metric} at offset 6")
    ids = []
    for _ in range(n):
        (length,) = struct.unpack("<H", r.take(2, "id length"))
        ids.append(r.take(length, "id").decode("utf-8"))
    vecs = r.array("<f8", (n, dim), "vectors")

    if kind == KIND_CODES["flat"]:
        index: ModalityIndex = FlatIndex(dim, capacity=max(n, 1))
    elif kind == KIND_CODES["hnsw"]:
        m, ef_c, ef_s, seed, entry, max_level, n_up = r.unpack(_HNSW_HEADER, "hnsw header")
        index = HnswIndex(dim, HnswParams(m, ef_c, ef_s, seed), capacity=max(n, 1))
        index.levels[:n] = r.array("<i4", (n,), "levels")
        index.cnt0[:n] = r.array("<i4", (n,), "level-0 counts")
        index.links0[:n] = r.array("<i4", (n, 2 * m), "level-0 links")
        index.up_off[:n] = r.array("<i8", (n,), "upper offsets")
        index._reserve_up(n_up)
        index.cnt_up[:n_up] = r.array("<i4", (n_up,), "upper counts")
        index.links_up[:n_up] = r.array("<i4", (n_up, m), "upper links")
        index.n_up, index.entry, index.max_level = n_up, entry, max_level
    else:
        raise IndexLoadError(f"unknown index kind {kind} at offset 7")
    if r.offset != len(data):
        raise IndexLoadError(f"trailing bytes after offset {r.offset}")
    index._vecs[:n] = vecs
    index.ids = ids
    index._pos = {i: k for k, i in enumerate(ids)}
    if len(index._pos) != n:
        raise IndexLoadError("duplicate ids in index file")
    return index


def save(index: ModalityIndex, path: str | os.PathLike) -> None:
    """Write atomically: temp file, fsync, rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dumps(index))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> ModalityIndex:
    return loads(Path(path).read_bytes())
