"""Knowledge-base directory: JSONL record stores joined by id to binary vector indexes.

Layout under the KB root::

    kb.json                       format version, config snapshot, embedder, documents, counts
    chunks/{text,tables,images}.jsonl
    index/{text,table,image}.frix
    stubs/                        extraction stub files
    images/                       cropped region images (optional)
    kb.lock                       present while a writer holds the KB

Writes go store-line first, index second. Index files and ``kb.json`` are
rewritten together on :meth:`KnowledgeBase.commit`, so any record line past
the last commit has no index entry and is hidden (and, for writers,
truncated) when the KB is reopened.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .core import ChunkId, ConfigError, EngineConfig, FinragError, InputError, Modality, canonical_json
from .embed import EmbedderSpec
from .vindex import HnswParams, IndexEntry, IndexLoadError, ModalityIndex, build_index, load, save

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KB_MANIFEST = "kb.json"
LOCK_FILE = "kb.lock"
STORE_FILES = {Modality.TEXT: "text.jsonl", Modality.TABLE: "tables.jsonl", Modality.IMAGE: "images.jsonl"}
INDEX_FILES = {Modality.TEXT: "text.frix", Modality.TABLE: "table.frix", Modality.IMAGE: "image.frix"}

# config fields that shape stored chunks or index graphs; a mismatch at open is drift
BUILD_FIELDS = (
    "window_size", "overlap", "breakpoint_percentile", "breakpoint_scope", "tau_merge",
    "embed_dim", "max_context_tokens", "index_kind", "hnsw_m", "hnsw_ef_construction", "hnsw_seed",
)


class KBError(FinragError):
    pass


class KBLockedError(KBError):
    pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def hnsw_params(config: EngineConfig) -> HnswParams:
    return HnswParams(config.hnsw_m, config.hnsw_ef_construction, config.hnsw_ef_search, config.hnsw_seed)


@dataclass
class DocumentEntry:
    doc: str
    text_chunks: int = 0
    tables: int = 0
    images: int = 0
    failed: list[str] = field(default_factory=list)
    skipped_non_data: list[str] = field(default_factory=list)
    reduction_ratio: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class KnowledgeBase:
    """Three modality stores plus their indexes. Open through :func:`init_kb` or :func:`open_kb`."""

    def __init__(self, root: Path, config: EngineConfig, embedder_spec: EmbedderSpec,
                 indexes: dict[Modality, ModalityIndex], writable: bool):
        self.root = root
        self.config = config
        self.embedder_spec = embedder_spec
        self.indexes = indexes
        self.writable = writable
        self.documents: dict[str, DocumentEntry] = {}
        self.records: dict[Modality, dict[str, dict]] = {m: {} for m in Modality}
        self.dirty = False
        self._embedder = None
        self._closed = False

    # paths

    @property
    def chunk_dir(self) -> Path:
        return self.root / "chunks"

    @property
    def index_dir(self) -> Path:
        return self.root / "index"

    @property
    def stub_dir(self) -> Path:
        return self.root / "stubs"

    @property
    def image_dir(self) -> Path:
        return self.root / "images"

    def store_path(self, modality: Modality) -> Path:
        return self.chunk_dir / STORE_FILES[modality]

    def index_path(self, modality: Modality) -> Path:
        return self.index_dir / INDEX_FILES[modality]

    # access

    @property
    def embedder(self):
        if self._embedder is None:
            self._embedder = self.embedder_spec.build(self.config.retry_limit)
        return self._embedder

    @embedder.setter
    def embedder(self, value) -> None:
        self._embedder = value

    def index(self, modality: Modality) -> ModalityIndex:
        return self.indexes[modality]

    def record(self, id: str | ChunkId) -> dict:
        cid = id if isinstance(id, ChunkId) else ChunkId.parse(id)
        try:
            return self.records[cid.modality][str(cid)]
        except KeyError:
            raise InputError(f"unknown chunk id {str(cid)!r}") from None

    def iter_records(self, modality: Modality) -> Iterator[dict]:
        return iter(self.records[modality].values())

    def counts(self) -> dict[str, int]:
        return {m.value: len(self.records[m]) for m in Modality}

    def next_seq(self, doc: str, modality: Modality) -> int:
        prefix = f"{doc}:{modality.value}:"
        return sum(1 for k in self.records[modality] if k.startswith(prefix))

    # writes

    def _require_writable(self) -> None:
        if not self.writable or self._closed:
            raise KBError("knowledge base is not open for writing")

    def append_record(self, modality: Modality, record: dict, vector: np.ndarray) -> ChunkId:
        """Append to the modality store, then insert into its index.

        The record becomes visible to later sessions only after :meth:`commit`.
        """
        self._require_writable()
        cid = ChunkId.parse(record["id"])
        if cid.modality is not modality:
            raise InputError(f"record {record['id']!r} does not belong to the {modality.value} store")
        key = str(cid)
        if key in self.records[modality]:
            raise InputError(f"duplicate chunk id {key!r}")
        index = self.indexes[modality]
        index.check_entry(key, vector)
        try:
            with open(self.store_path(modality), "a", encoding="utf-8") as fh:
                fh.write(canonical_json(record) + "\n")
            index.insert(IndexEntry(key, vector))
        except (OSError, FinragError) as exc:
            self.dirty = True
            raise KBError(f"write failed for {key} ({exc}); knowledge base is dirty, rebuild advised") from exc
        self.records[modality][key] = record
        return cid

    def add_document(self, entry: DocumentEntry) -> None:
        self._require_writable()
        self.documents[entry.doc] = entry

    def manifest(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "embedder": self.embedder_spec.to_dict(),
            "documents": [self.documents[d].to_dict() for d in sorted(self.documents)],
            "counts": self.counts(),
        }

    def commit(self) -> None:
        """Persist indexes, then the manifest; both are replaced atomically."""
        self._require_writable()
        if self.dirty:
            raise KBError("refusing to commit a dirty knowledge base; rebuild advised")
        for m in Modality:
            save(self.indexes[m], self.index_path(m))
        data = json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n"
        _write_atomic(self.root / KB_MANIFEST, data.encode("utf-8"))

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self.writable:
            try:
                (self.root / LOCK_FILE).unlink()
            except FileNotFoundError:
                pass

    def __enter__(self) -> "KnowledgeBase":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _acquire_lock(root: Path) -> None:
    lock = root / LOCK_FILE
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if _stale_lock(lock):
                logger.warning("removing stale lock %s", lock)
                lock.unlink(missing_ok=True)
                continue
            raise KBLockedError(f"knowledge base {root} is locked by another writer ({lock})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return
    raise KBLockedError(f"could not acquire {lock}")


def _stale_lock(lock: Path) -> bool:
    try:
        pid = int(lock.read_text().strip() or 0)
    except (OSError, ValueError):
        return True
    return pid <= 0 or not _pid_alive(pid)


def init_kb(root: str | os.PathLike, config: EngineConfig, embedder_spec: EmbedderSpec | None = None) -> KnowledgeBase:
    """Create an empty KB at ``root`` (absent or empty directory) and open it for writing."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise KBError(f"refusing to initialise non-empty directory {root}")
    embedder_spec = embedder_spec or EmbedderSpec("test", config.embed_dim)
    if embedder_spec.dimension != config.embed_dim:
        raise ConfigError([f"embedder dimension {embedder_spec.dimension} != embed_dim {config.embed_dim}"])
    root.mkdir(parents=True, exist_ok=True)
    for sub in ("chunks", "index", "stubs", "images"):
        (root / sub).mkdir(exist_ok=True)
    _acquire_lock(root)
    for name in STORE_FILES.values():
        (root / "chunks" / name).touch()
    params = hnsw_params(config)
    indexes = {m: build_index(config.index_kind, config.embed_dim, params) for m in Modality}
    kb = KnowledgeBase(root, config, embedder_spec, indexes, writable=True)
    kb.commit()
    return kb


def _read_store(path: Path) -> list[tuple[int, dict]]:
    """Parsed lines with their byte end offsets; a torn final line is ignored."""
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            offset += len(raw)
            if not raw.endswith(b"\n"):
                logger.warning("%s: ignoring torn final line %d", path, lineno)
                break
            try:
                out.append((offset, json.loads(raw)))
            except json.JSONDecodeError as exc:
                raise KBError(f"{path}:{lineno}: corrupt record ({exc.msg})") from exc
    return out


def check_drift(stored: EngineConfig, requested: EngineConfig) -> list[str]:
    return [
        f"{name}: built with {getattr(stored, name)!r}, requested {getattr(requested, name)!r}"
        for name in BUILD_FIELDS
        if getattr(stored, name) != getattr(requested, name)
    ]


def open_kb(root: str | os.PathLike, writable: bool = False, config: EngineConfig | None = None) -> KnowledgeBase:
    """Open a built KB, verifying layout, version, index/store bijection and config drift.

    ``config`` may override query-time settings (thresholds, n/m/p, ef_search);
    differences in build-time settings raise :class:`ConfigError`.
    """
    root = Path(root)
    required = [KB_MANIFEST] + [f"chunks/{n}" for n in STORE_FILES.values()] + [
        f"index/{n}" for n in INDEX_FILES.values()
    ] + ["stubs", "images"]
    missing = [r for r in required if not (root / r).exists()]
    if missing:
        raise KBError(f"knowledge base at {root} is missing: " + ", ".join(missing))
    lock = root / LOCK_FILE
    if writable:
        _acquire_lock(root)
    elif lock.exists() and not _stale_lock(lock):
        raise KBLockedError(f"knowledge base {root} is being written (lock file {lock})")
    try:
        return _open(root, writable, config)
    except BaseException:
        if writable:
            lock.unlink(missing_ok=True)
        raise


def _open(root: Path, writable: bool, config: EngineConfig | None) -> KnowledgeBase:
    try:
        manifest = json.loads((root / KB_MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise KBError(f"{root / KB_MANIFEST} is not valid JSON ({exc.msg})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise KBError(
            f"knowledge base format version {version} is not supported (expected {FORMAT_VERSION}); "
            "upgrade needed: rebuild the KB with this version"
        )
    stored = EngineConfig.from_dict(manifest["config"])
    if config is not None:
        drift = check_drift(stored, config)
        if drift:
            raise ConfigError(["config drift against the build snapshot"] + drift)
        stored = config
    spec = EmbedderSpec.from_dict(manifest["embedder"])
    indexes = {}
    for m in Modality:
        try:
            indexes[m] = load(root / "index" / INDEX_FILES[m])
        except IndexLoadError as exc:
            raise KBError(f"{INDEX_FILES[m]}: {exc}") from exc
        if indexes[m].dim != stored.embed_dim:
            raise KBError(f"{INDEX_FILES[m]}: dimension {indexes[m].dim} != embed_dim {stored.embed_dim}")
        if hasattr(indexes[m], "params"):
            indexes[m].params = hnsw_params(stored)
    kb = KnowledgeBase(root, stored, spec, indexes, writable)
    for m in Modality:
        _join(kb, m)
    for d in manifest.get("documents", []):
        kb.documents[d["doc"]] = DocumentEntry(**d)
    if manifest.get("counts") != kb.counts():
        raise KBError(f"manifest counts {manifest.get('counts')} disagree with stores {kb.counts()}")
    return kb


def _join(kb: KnowledgeBase, m: Modality) -> None:
    path = kb.store_path(m)
    index = kb.indexes[m]
    rows = _read_store(path)
    keep_until = 0
    orphans = 0
    for end, rec in rows:
        if rec["id"] in index:
            if rec["id"] in kb.records[m]:
                raise KBError(f"{path}: duplicate record id {rec['id']!r}")
            kb.records[m][rec["id"]] = rec
            keep_until = end
        else:
            orphans += 1
    missing = [i for i in index.ids if i not in kb.records[m]]
    if missing:
        raise KBError(f"{INDEX_FILES[m]}: index ids without stored records: {', '.join(missing[:5])}")
    if orphans:
        logger.warning("%s: hiding %d record(s) without index entries", path, orphans)
    if kb.writable and path.stat().st_size != keep_until:
        with open(path, "r+b") as fh:
            fh.truncate(keep_until)
