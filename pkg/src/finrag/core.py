"""Shared domain types, engine configuration and similarity primitives."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

ENV_PREFIX = "FINRAG_"
NORM_TOLERANCE = 1e-6


class FinragError(Exception):
    """Base class for all errors raised by the engine."""


class ConfigError(FinragError):
    """Invalid configuration. ``errors`` lists every violated constraint."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InputError(FinragError):
    """Caller supplied input that violates an operation's precondition."""


class TransportError(FinragError):
    """A remote call failed after all retries. ``attempts`` counts the tries made."""

    def __init__(self, message: str, attempts: int = 1, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class Modality(str, enum.Enum):
    TEXT = "text"
    TABLE = "table"
    IMAGE = "image"


@dataclass(frozen=True, order=True)
class ChunkId:
    """Identifier of one retrievable chunk, unique within a knowledge base.

    The string form ``<doc>:<modality>:<seq>`` is what gets persisted, so
    it must stay stable across save/load.
    """

    doc: str
    modality: Modality
    seq: int

    def __str__(self) -> str:
        return f"{self.doc}:{self.modality.value}:{self.seq:06d}"

    @classmethod
    def parse(cls, raw: str) -> "ChunkId":
        try:
            doc, modality, seq = raw.rsplit(":", 2)
            return cls(doc, Modality(modality), int(seq))
        except ValueError as exc:
            raise InputError(f"malformed chunk id {raw!r}") from exc


def normalize(vector: Any) -> np.ndarray:
    """Return ``vector`` scaled to unit Euclidean norm as float64.

    Zero (or non-finite) vectors cannot be normalized and raise
    :class:`InputError`.
    """
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm == 0.0:
        raise InputError("cannot normalize a zero or non-finite vector")
    return v / norm


def cosine_similarity(a: Any, b: Any) -> float:
    """Cosine similarity of two non-zero vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ConfigError([f"dimension mismatch: {a.shape[0]} != {b.shape[0]}"])
    sim = float(np.dot(normalize(a), normalize(b)))
    return min(1.0, max(-1.0, sim))


def canonical_json(obj: Any) -> str:
    """Sorted keys, compact separators, ASCII only: byte-stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def estimate_tokens(text: str) -> int:
    """Whitespace word count; the unit for every token budget in the engine."""
    return len(text.split())


@dataclass(frozen=True)
class EngineConfig:
    window_size: int = 8
    overlap: int = 2
    batch_size: int = 5
    min_text_hits: int = 6
    table_top: int = 4
    image_top: int = 3
    theta_text: float = 0.70
    theta_table: float = 0.65
    theta_image: float = 0.55
    tau_merge: float = 0.85
    breakpoint_percentile: float = 95.0
    breakpoint_scope: str = "block"
    embed_dim: int = 256
    max_context_tokens: int = 4096
    retry_limit: int = 2
    text_cap: int = 24
    index_kind: str = "hnsw"
    hnsw_m: int = 16
    hnsw_ef_construction: int = 200
    hnsw_ef_search: int = 320
    hnsw_seed: int = 42
    metadata: Mapping[str, str] = field(default_factory=dict, compare=False)

    @property
    def merge_token_cap(self) -> int:
        return self.max_context_tokens // 4

    def replace(self, **changes: Any) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out.pop("metadata")
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EngineConfig":
        return _coerce(cls(), raw, source="mapping")


_POSITIVE_INT = (
    "window_size",
    "batch_size",
    "min_text_hits",
    "table_top",
    "image_top",
    "embed_dim",
    "max_context_tokens",
    "retry_limit",
    "text_cap",
    "hnsw_ef_construction",
    "hnsw_ef_search",
)
_THRESHOLDS = ("theta_text", "theta_table", "theta_image")


def validate_config(config: EngineConfig) -> EngineConfig:
    """Check every invariant of ``config``; raise ConfigError listing all violations."""
    errors: list[str] = []
    for name in _POSITIVE_INT:
        value = getattr(config, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            errors.append(f"{name} must be a positive integer (got {value!r})")
    if not isinstance(config.overlap, int) or config.overlap < 0:
        errors.append(f"overlap must be a non-negative integer (got {config.overlap!r})")
    elif isinstance(config.window_size, int) and config.overlap >= config.window_size:
        errors.append(
            f"overlap must be < window (overlap={config.overlap}, window_size={config.window_size})"
        )
    for name in _THRESHOLDS:
        value = getattr(config, name)
        if not -1.0 <= value <= 1.0:
            errors.append(f"{name} must lie in [-1, 1] (got {value!r})")
    if not 0.0 <= config.tau_merge <= 1.0:
        errors.append(f"tau_merge must lie in [0, 1] (got {config.tau_merge!r})")
    if not 0.0 < config.breakpoint_percentile < 100.0:
        errors.append(
            f"breakpoint_percentile must lie in (0, 100) (got {config.breakpoint_percentile!r})"
        )
    if config.breakpoint_scope not in ("block", "document"):
        errors.append(f"breakpoint_scope must be 'block' or 'document' (got {config.breakpoint_scope!r})")
    if config.index_kind not in ("hnsw", "flat"):
        errors.append(f"index_kind must be 'hnsw' or 'flat' (got {config.index_kind!r})")
    if config.hnsw_m < 2:
        errors.append(f"hnsw_m must be >= 2 (got {config.hnsw_m!r})")
    if errors:
        raise ConfigError(errors)
    return config


def _coerce(base: EngineConfig, raw: Mapping[str, Any], source: str) -> EngineConfig:
    known = {f.name: f for f in dataclasses.fields(EngineConfig) if f.name != "metadata"}
    changes: dict[str, Any] = {}
    errors: list[str] = []
    for key, value in raw.items():
        name = key.strip().lower()
        if name not in known:
            errors.append(f"unknown config key {key!r} in {source}")
            continue
        target = type(getattr(base, name))
        try:
            if target is int and isinstance(value, str):
                changes[name] = int(value.strip())
            elif target is float:
                changes[name] = float(value)
            elif target is str:
                changes[name] = str(value).strip()
            else:
                changes[name] = target(value)
        except (TypeError, ValueError):
            errors.append(f"{name}: cannot parse {value!r} as {target.__name__} in {source}")
    if errors:
        raise ConfigError(errors)
    return dataclasses.replace(base, **changes)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"{source}:{lineno}: expected 'key = value'"])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip().strip('"').strip("'")
    return out


def load_config(
    path: str | os.PathLike | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> EngineConfig:
    """Defaults < config file < ``FINRAG_*`` environment < explicit overrides."""
    config = EngineConfig()
    if path is not None:
        p = Path(path)
        config = _coerce(config, parse_config_text(p.read_text(), str(p)), str(p))
    env = os.environ if env is None else env
    fields = {f.name for f in dataclasses.fields(EngineConfig)} - {"metadata"}
    from_env = {
        k[len(ENV_PREFIX):].lower(): v
        for k, v in env.items()
        if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in fields
    }
    config = _coerce(config, from_env, "environment")
    if overrides:
        config = _coerce(config, {k: v for k, v in overrides.items() if v is not None}, "overrides")
    return validate_config(config)
