"""Semantic chunking: sentence segmentation, sliding windows, breakpoints, merging."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ChunkId, EngineConfig, InputError, Modality, estimate_tokens

logger = logging.getLogger(__name__)

ABBREVIATIONS = frozenset(
    {"vs.", "e.g.", "i.e.", "u.s.", "inc.", "corp.", "no.", "fig.", "co.", "ltd.", "mr.", "ms.", "dr.", "st."}
)
# terminal punctuation, optional closing quote/bracket, whitespace, then an opener
_BOUNDARY_RE = re.compile(r"[.!?]+[\"')\]]*(?=\s+[\"'(\[]?[A-Z0-9$])")
# separator between non-contiguous sentence runs inside one merged chunk
RUN_SEPARATOR = "\n\n"
MIN_DISTANCES_FOR_SPLIT = 4
# merge similarities are rounded so tie-breaking ignores BLAS summation order
SIM_DECIMALS = 12


@dataclass(frozen=True)
class SentenceSpan:
    index: int
    text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class Block:
    start_index: int
    sentences: tuple[SentenceSpan, ...]


@dataclass
class TextChunk:
    """A retrievable text passage built from one or more sentences."""

    ordinals: tuple[int, ...]
    content: str
    embedding: np.ndarray | None = None
    id: ChunkId | None = None
    token_estimate: int = 0

    def __post_init__(self):
        if not self.token_estimate:
            self.token_estimate = estimate_tokens(self.content)

    @property
    def sentence_range(self) -> tuple[int, int]:
        return self.ordinals[0], self.ordinals[-1]

    def to_record(self) -> dict:
        return {
            "id": str(self.id),
            "content": self.content,
            "ordinals": list(self.ordinals),
            "sentence_range": list(self.sentence_range),
            "token_estimate": self.token_estimate,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TextChunk":
        return cls(
            ordinals=tuple(rec["ordinals"]),
            content=rec["content"],
            id=ChunkId.parse(rec["id"]),
            token_estimate=rec["token_estimate"],
        )


@dataclass
class ChunkingResult:
    chunks: list[TextChunk]
    pre_merge_tokens: int
    merged_tokens: int
    pre_merge_count: int
    blocked_merges: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)

    @property
    def reduction_ratio(self) -> float:
        if self.pre_merge_tokens == 0:
            return 0.0
        return 1.0 - self.merged_tokens / self.pre_merge_tokens


def _is_abbreviation(text: str, end: int) -> bool:
    start = end
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    word = text[start:end].lstrip("\"'([").lower()
    return word in ABBREVIATIONS


def segment_sentences(text: str) -> list[SentenceSpan]:
    """Split ``text`` into sentences.

    A boundary is terminal punctuation followed by whitespace and an
    uppercase letter, digit or ``$``. Known abbreviations never end a
    sentence, and decimals like ``1.5`` cannot match because the period is
    not followed by whitespace.
    """
    spans: list[SentenceSpan] = []
    cursor = 0

    def emit(start: int, end: int) -> None:
        chunk = text[start:end]
        stripped = chunk.strip()
        if not stripped:
            return
        lead = len(chunk) - len(chunk.lstrip())
        s = start + lead
        spans.append(SentenceSpan(len(spans), stripped, s, s + len(stripped)))

    for m in _BOUNDARY_RE.finditer(text):
        if _is_abbreviation(text, m.start() + 1):
            continue
        emit(cursor, m.end())
        cursor = m.end()
    emit(cursor, len(text))
    return spans


def build_windows(sentences: Sequence[SentenceSpan], w: int, o: int) -> list[Block]:
    """Overlapping blocks of ``w`` sentences starting every ``w - o`` sentences.

    The last block may be shorter; no block is emitted once the previous
    one already reached the end of the document.
    """
    if not 0 <= o < w:
        raise InputError(f"overlap must be < window (overlap={o}, window={w})")
    stride = w - o
    blocks = []
    start = 0
    n = len(sentences)
    while start < n:
        blocks.append(Block(start, tuple(sentences[start:start + w])))
        if start + w >= n:
            break
        start += stride
    return blocks


def interpolated_percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation (inclusive) percentile, ``q`` in [0, 100]."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q, method="linear"))


def adjacent_distances(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """``1 - cos`` between consecutive unit embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    return 1.0 - np.einsum("ij,ij->i", e[:-1], e[1:])


def breakpoints(
    block_embeddings: Sequence[np.ndarray],
    percentile: float = 95.0,
    threshold: float | None = None,
) -> set[int]:
    """Split positions inside one block.

    Position ``j`` (1-based) means "split after the j-th sentence", i.e. the
    distance between sentences j and j+1 is strictly above the percentile of
    the block's distances. Blocks with fewer than four distances never split.
    Passing ``threshold`` overrides the per-block percentile (document scope).
    """
    if len(block_embeddings) < 2:
        raise InputError("breakpoints need at least 2 embeddings")
    d = adjacent_distances(block_embeddings)
    if threshold is None:
        if len(d) < MIN_DISTANCES_FOR_SPLIT:
            return set()
        threshold = interpolated_percentile(d, percentile)
    return {j + 1 for j in range(len(d)) if d[j] > threshold}


def _join_sentences(spans: Sequence[SentenceSpan]) -> str:
    parts: list[str] = []
    prev = None
    for s in spans:
        if prev is not None:
            parts.append(" " if s.index == prev + 1 else RUN_SEPARATOR)
        parts.append(s.text)
        prev = s.index
    return "".join(parts)


def form_chunks(blocks: Sequence[Block], splits: Sequence[set[int]]) -> list[TextChunk]:
    """Cut each block at its split positions; one chunk per resulting piece."""
    chunks = []
    for block, cuts in zip(blocks, splits):
        bounds = [0, *sorted(c for c in cuts if 0 < c < len(block.sentences)), len(block.sentences)]
        for a, b in zip(bounds, bounds[1:]):
            piece = block.sentences[a:b]
            chunks.append(TextChunk(tuple(s.index for s in piece), _join_sentences(piece)))
    return chunks


class _Merger:
    """Greedy max-similarity merging over a dense similarity matrix."""

    def __init__(self, chunks, sentences, embedder, tau, token_cap):
        self.sentences = sentences
        self.embedder = embedder
        self.tau = tau
        self.token_cap = token_cap
        self.items: list[TextChunk | None] = list(chunks)
        self.blocked: set[tuple[tuple[int, ...], tuple[int, ...]]] = set()
        n = len(chunks)
        cap = max(4, 2 * n)
        self.emb = np.zeros((cap, chunks[0].embedding.shape[0]))
        for i, c in enumerate(chunks):
            self.emb[i] = c.embedding
        self.sim = np.full((cap, cap), -np.inf)
        if n:
            self.sim[:n, :n] = np.round(self.emb[:n] @ self.emb[:n].T, SIM_DECIMALS)
            np.fill_diagonal(self.sim, -np.inf)
        self.sim[np.tril_indices(cap)] = -np.inf

    def _pair_key(self, i, j):
        a, b = self.items[i].ordinals, self.items[j].ordinals
        return (a, b) if a <= b else (b, a)

    def _best_pair(self):
        best = float(self.sim.max()) if self.items else -np.inf
        if not best > self.tau:
            return None
        rows, cols = np.nonzero(self.sim == best)
        return min(zip(rows.tolist(), cols.tolist()), key=lambda p: self._pair_key(*p))

    def _merged(self, i, j) -> TextChunk:
        ordinals = tuple(sorted(set(self.items[i].ordinals) | set(self.items[j].ordinals)))
        content = _join_sentences([self.sentences[k] for k in ordinals])
        chunk = TextChunk(ordinals, content)
        chunk.embedding = self.embedder.embed_one(content)
        return chunk

    def _retire(self, i):
        self.items[i] = None
        self.sim[i, :] = -np.inf
        self.sim[:, i] = -np.inf

    def run(self) -> list[TextChunk]:
        while (pair := self._best_pair()) is not None:
            i, j = pair
            ords = set(self.items[i].ordinals) | set(self.items[j].ordinals)
            tokens = sum(estimate_tokens(self.sentences[k].text) for k in ords)
            if tokens > self.token_cap:
                self.blocked.add(self._pair_key(i, j))
                self.sim[i, j] = -np.inf
                continue
            merged = self._merged(i, j)
            self._retire(i)
            self._retire(j)
            k = len(self.items)
            if k >= self.sim.shape[0]:
                self._grow()
            self.items.append(merged)
            self.emb[k] = merged.embedding
            live = [x for x in range(k) if self.items[x] is not None]
            if live:
                s = np.round(self.emb[live] @ merged.embedding, SIM_DECIMALS)
                self.sim[live, k] = s
                for x in live:
                    if self._pair_key(x, k) in self.blocked:
                        self.sim[x, k] = -np.inf
        out = [c for c in self.items if c is not None]
        out.sort(key=lambda c: c.ordinals)
        return out

    def _grow(self):
        cap = self.sim.shape[0]
        new = 2 * cap
        emb = np.zeros((new, self.emb.shape[1]))
        emb[:cap] = self.emb
        sim = np.full((new, new), -np.inf)
        sim[:cap, :cap] = self.sim
        self.emb, self.sim = emb, sim


def merge_chunks(
    chunks: Sequence[TextChunk],
    tau_merge: float,
    embedder,
    sentences: Sequence[SentenceSpan],
    token_cap: int,
    blocked: list | None = None,
) -> list[TextChunk]:
    """Greedily merge the most similar pair of chunks while similarity > ``tau_merge``.

    Ties go to the lexicographically smallest pair of ordinal tuples, so the
    outcome does not depend on input order. A merge whose deduplicated text
    would exceed ``token_cap`` tokens is skipped and recorded in ``blocked``.
    """
    if not chunks:
        return []
    for c in chunks:
        if c.embedding is None:
            raise InputError("merge_chunks needs embedded chunks")
    merger = _Merger(chunks, sentences, embedder, tau_merge, token_cap)
    out = merger.run()
    if blocked is not None:
        blocked.extend(sorted(merger.blocked))
    return out


def chunk_document(text: str, config: EngineConfig, embedder, doc_id: str = "doc") -> ChunkingResult:
    """Segment, window, split, embed and merge ``text`` into final text chunks."""
    sentences = segment_sentences(text)
    if not sentences:
        return ChunkingResult([], 0, 0, 0)
    sent_vecs = embedder.embed_batch([s.text for s in sentences])
    blocks = build_windows(sentences, config.window_size, config.overlap)

    threshold = None
    if config.breakpoint_scope == "document" and len(sentences) > MIN_DISTANCES_FOR_SPLIT:
        threshold = interpolated_percentile(adjacent_distances(sent_vecs), config.breakpoint_percentile)
    splits = []
    for block in blocks:
        if len(block.sentences) < 2:
            splits.append(set())
            continue
        vecs = [sent_vecs[s.index] for s in block.sentences]
        splits.append(breakpoints(vecs, config.breakpoint_percentile, threshold))

    pre = form_chunks(blocks, splits)
    for chunk, vec in zip(pre, embedder.embed_batch([c.content for c in pre])):
        chunk.embedding = vec
    pre_tokens = sum(c.token_estimate for c in pre)

    blocked: list = []
    merged = merge_chunks(pre, config.tau_merge, embedder, sentences, config.merge_token_cap, blocked)
    for seq, chunk in enumerate(merged):
        chunk.id = ChunkId(doc_id, Modality.TEXT, seq)
    result = ChunkingResult(merged, pre_tokens, sum(c.token_estimate for c in merged), len(pre), blocked)
    logger.info(
        "chunked %d sentences into %d chunks (%d before merge), reduction %.3f",
        len(sentences), len(merged), len(pre), result.reduction_ratio,
    )
    return result
