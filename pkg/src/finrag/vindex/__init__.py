"""Per-modality vector indexes: exact flat scan and HNSW graph."""

from ._kernels import BACKEND
from .index import (
    DEFAULT_THRESHOLD_CAP,
    FlatIndex,
    HnswIndex,
    HnswParams,
    IndexEntry,
    ModalityIndex,
    SearchHit,
    build_index,
    hit_order,
)
from .persist import IndexLoadError, load, save

__all__ = [
    "BACKEND",
    "DEFAULT_THRESHOLD_CAP",
    "FlatIndex",
    "HnswIndex",
    "HnswParams",
    "IndexEntry",
    "IndexLoadError",
    "ModalityIndex",
    "SearchHit",
    "build_index",
    "hit_order",
    "load",
    "save",
]
