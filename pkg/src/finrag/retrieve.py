"""Tiered retrieval and answer generation.

A query first gathers text chunks above ``theta_text``. With at least
``min_text_hits`` of them the text alone forms the context; otherwise the
best tables and figures above their own thresholds are added. Either way
exactly one chat call is made, under a system prompt that tells the model
to reply "insufficient information" rather than guess.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import EngineConfig, FinragError, Modality, TransportError, estimate_tokens
from .gateway import ChatRequest
from .vindex import ModalityIndex, SearchHit, hit_order

logger = logging.getLogger(__name__)

DEFERRAL = "insufficient information"
SYSTEM_PROMPT = (
    "You answer questions about financial filings using only the context provided. "
    "Quote figures exactly as they appear, with their units. "
    f'If the context does not contain the information needed, reply exactly: {DEFERRAL}'
)
NO_CONTEXT = "No context was retrieved for this question."


class Tier(str, enum.Enum):
    TEXT_ONLY = "TextOnly"
    FALLBACK = "Fallback"


@dataclass(frozen=True)
class Query:
    text: str
    embedding: np.ndarray
    config: EngineConfig

    @classmethod
    def from_text(cls, text: str, embedder, config: EngineConfig) -> "Query":
        return cls(text, embedder.embed_one(text), config)


@dataclass
class TierTrace:
    tier: Tier
    text_hits: list[SearchHit]
    table_hits: list[SearchHit] = field(default_factory=list)
    image_hits: list[SearchHit] = field(default_factory=list)
    thresholds: dict[str, float] = field(default_factory=dict)
    prompt_tokens: int = 0
    context_ids: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tier": self.tier.value,
            "text_hits": [h.to_dict() for h in self.text_hits],
            "table_hits": [h.to_dict() for h in self.table_hits],
            "image_hits": [h.to_dict() for h in self.image_hits],
            "thresholds": dict(self.thresholds),
            "prompt_tokens": self.prompt_tokens,
            "context_ids": list(self.context_ids),
            "dropped": list(self.dropped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Answer:
    text: str
    insufficient: bool
    trace: TierTrace
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"answer": self.text, "insufficient": self.insufficient,
                "trace": self.trace.to_dict(), "timings": dict(self.timings)}


class AnswerError(FinragError):
    """Generation failed after retrieval finished; ``trace`` keeps the retrieval work."""

    def __init__(self, message: str, trace: TierTrace, cause: Exception | None = None):
        super().__init__(message)
        self.trace = trace
        self.cause = cause


@dataclass
class PromptBundle:
    system: str
    user: str
    token_estimate: int
    context_ids: list[str]
    dropped: list[str]


def is_deferral(reply: str) -> bool:
    return reply.strip().lower().startswith(DEFERRAL)


def retrieve_text(q: Query, index: ModalityIndex, cap: int | None = None) -> list[SearchHit]:
    """Every text chunk with similarity >= theta_text, best first, at most ``cap``."""
    return index.search_threshold(q.embedding, q.config.theta_text, cap or q.config.text_cap)


def decide_tier(hits: Sequence[SearchHit], n: int) -> Tier:
    return Tier.TEXT_ONLY if len(hits) >= n else Tier.FALLBACK


def _top_above(index: ModalityIndex, q: np.ndarray, k: int, theta: float) -> list[SearchHit]:
    # top-k candidates first, threshold second
    return [h for h in index.search_topk(q, k) if h.similarity >= theta]


def retrieve_fallback(q: Query, table_index: ModalityIndex, image_index: ModalityIndex
                      ) -> tuple[list[SearchHit], list[SearchHit]]:
    c = q.config
    return (
        _top_above(table_index, q.embedding, c.table_top, c.theta_table),
        _top_above(image_index, q.embedding, c.image_top, c.theta_image),
    )


def _render_context(modality: Modality, hit: SearchHit, rec: dict) -> str:
    head = f"[{hit.id}] (similarity {hit.similarity:.3f})"
    if modality is Modality.TEXT:
        return f"{head}\n{rec['content']}"
    if modality is Modality.TABLE:
        return f"{head}\nSummary: {rec['summary']}\n```json\n{rec['json']}\n```"
    return f"{head}\nSummary: {rec['summary']}"


_SECTION_TITLES = {Modality.TEXT: "TEXT", Modality.TABLE: "TABLES", Modality.IMAGE: "IMAGES"}


def _render_user(question: str, blocks: list[tuple[Modality, SearchHit, str]]) -> str:
    parts = []
    for m in (Modality.TEXT, Modality.TABLE, Modality.IMAGE):
        mine = [b for mod, _, b in blocks if mod is m]
        if mine:
            parts.append(f"=== {_SECTION_TITLES[m]} ===\n" + "\n\n".join(mine))
    context = "\n\n".join(parts) if parts else f"=== CONTEXT ===\n{NO_CONTEXT}"
    return f"{context}\n\n=== QUESTION ===\n{question}"


def assemble_prompt(q: Query, text_hits: Sequence[SearchHit], table_hits: Sequence[SearchHit],
                    image_hits: Sequence[SearchHit], lookup: Callable[[str], dict],
                    budget: int | None = None) -> PromptBundle:
    """Build the (system, user) pair, dropping the lowest-similarity contexts while over budget.

    Sections appear in the order text, tables, images; within a section the
    hit order is kept. Tokens are counted over system plus user text.
    """
    budget = q.config.max_context_tokens if budget is None else budget
    blocks = [
        (m, h, _render_context(m, h, lookup(h.id)))
        for m, hits in ((Modality.TEXT, text_hits), (Modality.TABLE, table_hits), (Modality.IMAGE, image_hits))
        for h in hits
    ]
    base = estimate_tokens(SYSTEM_PROMPT)
    dropped: list[str] = []
    user = _render_user(q.text, blocks)
    while blocks and base + estimate_tokens(user) > budget:
        worst = max(blocks, key=lambda b: hit_order(b[1]))
        blocks.remove(worst)
        dropped.append(worst[1].id)
        user = _render_user(q.text, blocks)
    return PromptBundle(SYSTEM_PROMPT, user, base + estimate_tokens(user), [h.id for _, h, _ in blocks], dropped)


def retrieve(q: Query, kb, timings: dict[str, float] | None = None) -> tuple[TierTrace, PromptBundle]:
    """Run the retrieval half of the pipeline: hits, tier decision, prompt."""
    timings = timings if timings is not None else {}
    c = q.config
    t0 = time.perf_counter()
    text_hits = retrieve_text(q, kb.index(Modality.TEXT))
    t1 = time.perf_counter()
    timings["retrieve_text"] = t1 - t0
    tier = decide_tier(text_hits, c.min_text_hits)
    table_hits: list[SearchHit] = []
    image_hits: list[SearchHit] = []
    if tier is Tier.FALLBACK:
        table_hits, image_hits = retrieve_fallback(q, kb.index(Modality.TABLE), kb.index(Modality.IMAGE))
    t2 = time.perf_counter()
    timings["retrieve_fallback"] = t2 - t1
    bundle = assemble_prompt(q, text_hits, table_hits, image_hits, kb.record)
    timings["assemble"] = time.perf_counter() - t2
    trace = TierTrace(
        tier, text_hits, table_hits, image_hits,
        thresholds={"theta_text": c.theta_text, "theta_table": c.theta_table, "theta_image": c.theta_image},
        prompt_tokens=bundle.token_estimate, context_ids=bundle.context_ids, dropped=bundle.dropped,
    )
    return trace, bundle


def answer(q: Query | str, kb, gateway) -> Answer:
    """Retrieve, then make exactly one gateway call. A failed call raises :class:`AnswerError`."""
    timings: dict[str, float] = {}
    if isinstance(q, str):
        t = time.perf_counter()
        q = Query.from_text(q, kb.embedder, kb.config)
        timings["embed_query"] = time.perf_counter() - t
    trace, bundle = retrieve(q, kb, timings)
    t = time.perf_counter()
    try:
        reply = gateway.chat(ChatRequest(bundle.system, bundle.user)).text
    except (TransportError, FinragError) as exc:
        raise AnswerError(f"generation failed: {exc}", trace, exc) from exc
    timings["generate"] = time.perf_counter() - t
    reply = reply.strip()
    return Answer(reply, is_deferral(reply), trace, timings)
