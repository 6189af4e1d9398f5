"""Embedding backends: a remote HTTP embedder and a deterministic token-hash embedder."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .core import ConfigError, InputError, TransportError, normalize

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[0-9a-z]+")


class Embedder(Protocol):
    dimension: int

    def embed_one(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _check_text(text: str) -> str:
    if not isinstance(text, str) or not text.strip():
        raise InputError("cannot embed empty text")
    return text


def _hash64(token: str, salt: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, salt=salt).digest()
    return int.from_bytes(digest, "little")


class HashEmbedder:
    """Deterministic offline embedder.

    Tokens (lowercased alphanumeric runs) are hashed into ``dimension``
    buckets with a pseudo-random sign, summed, and L2-normalized. Texts that
    share tokens land close together, which is all the tests need.
    """

    kind = "test"

    def __init__(self, dimension: int = 256, seed: int = 0):
        if dimension < 1:
            raise InputError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self._bucket_salt = b"bkt" + seed.to_bytes(8, "little")
        self._sign_salt = b"sgn" + seed.to_bytes(8, "little")
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _vector(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower()) or [text.strip().lower()]
        v = np.zeros(self.dimension, dtype=np.float64)
        for tok in tokens:
            bucket = _hash64(tok, self._bucket_salt) % self.dimension
            sign = 1.0 if _hash64(tok, self._sign_salt) & 1 else -1.0
            v[bucket] += sign
        if not v.any():
            # every token cancelled out; fall back to the whole string
            v[_hash64(text, self._bucket_salt) % self.dimension] = 1.0
        return normalize(v)

    def embed_one(self, text: str) -> np.ndarray:
        _check_text(text)
        with self._lock:
            cached = self._memo.get(text)
        if cached is None:
            cached = self._vector(text)
            cached.setflags(write=False)
            with self._lock:
                self._memo[text] = cached
        return cached

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


class RemoteEmbedder:
    """Client for an HTTP embedding server.

    Wire shape: ``POST {"texts": [...]}`` answered by ``{"vectors": [[...], ...]}``.
    Vectors are re-normalized locally whatever the server returns.
    """

    kind = "remote"

    def __init__(
        self,
        endpoint_url: str,
        dimension: int,
        request_timeout: float = 30.0,
        max_batch: int = 32,
        retry_limit: int = 2,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        backoff: float = 0.5,
    ):
        if not endpoint_url:
            raise InputError("remote embedder requires an endpoint URL")
        if max_batch < 1:
            raise InputError("max_batch must be positive")
        self.endpoint_url = endpoint_url
        self.dimension = dimension
        self.max_batch = max_batch
        self.retry_limit = retry_limit
        self.backoff = backoff
        self.calls = 0
        self._client = httpx.Client(timeout=request_timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._memo: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _post(self, texts: list[str]) -> list[np.ndarray]:
        last: Exception | None = None
        status = None
        for attempt in range(self.retry_limit + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    with self._lock:
                        self.calls += 1
                    resp = self._client.post(self.endpoint_url, json={"texts": texts})
                status = resp.status_code
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = TransportError(f"embedding server returned {status}", status=status)
                    continue
                resp.raise_for_status()
                vectors = resp.json()["vectors"]
                if len(vectors) != len(texts):
                    raise TransportError(
                        f"embedding server returned {len(vectors)} vectors for {len(texts)} texts"
                    )
                out = [normalize(v) for v in vectors]
                for v in out:
                    if v.shape[0] != self.dimension:
                        raise TransportError(f"expected dimension {self.dimension}, got {v.shape[0]}")
                return out
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
            except httpx.HTTPStatusError as exc:
                raise TransportError(str(exc), attempts=attempt + 1, status=status) from exc
        raise TransportError(
            f"embedding request failed after {self.retry_limit + 1} attempts: {last}",
            attempts=self.retry_limit + 1,
            status=status,
        )

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        for t in texts:
            _check_text(t)
        with self._lock:
            todo = [t for t in dict.fromkeys(texts) if t not in self._memo]
        for start in range(0, len(todo), self.max_batch):
            part = todo[start:start + self.max_batch]
            vectors = self._post(part)
            with self._lock:
                self._memo.update(zip(part, vectors))
        with self._lock:
            return [self._memo[t] for t in texts]


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "test"
    dimension: int = 256
    endpoint_url: str = ""
    request_timeout: float = 30.0
    max_batch: int = 32

    def build(self, retry_limit: int = 2) -> HashEmbedder | RemoteEmbedder:
        if self.kind == "test":
            return HashEmbedder(self.dimension)
        if self.kind == "remote":
            return RemoteEmbedder(
                self.endpoint_url,
                self.dimension,
                request_timeout=self.request_timeout,
                max_batch=self.max_batch,
                retry_limit=retry_limit,
            )
        raise InputError(f"unknown embedder kind {self.kind!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "EmbedderSpec":
        return cls(**raw)

    @classmethod
    def from_env(cls, dimension: int) -> "EmbedderSpec":
        url = os.environ.get("FINRAG_EMBED_URL", "")
        dim = int(os.environ.get("FINRAG_EMBED_DIM", dimension))
        if not url:
            raise ConfigError(["FINRAG_EMBED_URL is not set (use --offline for the test embedder)"])
        return cls(kind="remote", dimension=dim, endpoint_url=url)
