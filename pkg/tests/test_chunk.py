import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finrag.chunk import (
    RUN_SEPARATOR,
    Block,
    TextChunk,
    breakpoints,
    build_windows,
    chunk_document,
    form_chunks,
    interpolated_percentile,
    merge_chunks,
    segment_sentences,
)
from finrag.core import EngineConfig, InputError, Modality, estimate_tokens
from finrag.embed import HashEmbedder

import oracles
import synth


# segmentation

def test_segment_trivial():
    assert segment_sentences("") == []
    assert [s.text for s in segment_sentences("Net sales rose. Costs fell.")] == ["Net sales rose.", "Costs fell."]


def test_segment_abbreviation_and_decimal_guard():
    spans = segment_sentences("Revenue was $1.5 billion vs. prior year. Margins held.")
    assert len(spans) == 2
    assert spans[0].text == "Revenue was $1.5 billion vs. prior year."
    for text in ("See Fig. 3 for detail. Done.", "Sold to Acme Inc. Then more. End.", "U.S. Sales grew. Ok."):
        joined = [s.text for s in segment_sentences(text)]
        assert not any(t.endswith(("Fig.", "Inc.", "U.S.")) for t in joined)


def test_segment_offsets_and_order():
    text = "  First one. Second here!  Third? 4 items remain."
    spans = segment_sentences(text)
    assert [s.index for s in spans] == list(range(len(spans)))
    for s in spans:
        assert text[s.char_start:s.char_end] == s.text
        assert s.text
    assert all(a.char_end <= b.char_start for a, b in zip(spans, spans[1:]))


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ab .!?$1A\n", max_size=80))
def test_segment_spans_non_overlapping(text):
    spans = segment_sentences(text)
    for s in spans:
        assert s.text and s.text == text[s.char_start:s.char_end]
    assert all(a.char_end <= b.char_start for a, b in zip(spans, spans[1:]))


# windows

def _sents(n):
    return segment_sentences(" ".join(f"Sentence {i} here." for i in range(n)))


def test_windows_example():
    blocks = build_windows(_sents(10), 8, 2)
    assert [b.start_index for b in blocks] == [0, 6]
    assert [len(b.sentences) for b in blocks] == [8, 4]


def test_windows_degenerate_and_disjoint():
    blocks = build_windows(_sents(5), 8, 2)
    assert len(blocks) == 1 and len(blocks[0].sentences) == 5
    blocks = build_windows(_sents(9), 3, 0)
    assert [[s.index for s in b.sentences] for b in blocks] == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    assert build_windows([], 8, 2) == []
    with pytest.raises(InputError, match="overlap must be < window"):
        build_windows(_sents(3), 2, 2)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 60), w=st.integers(1, 12), data=st.data())
def test_windows_cover_with_fixed_stride(n, w, data):
    o = data.draw(st.integers(0, w - 1))
    blocks = build_windows(_sents(n), w, o)
    starts = [b.start_index for b in blocks]
    assert all(b - a == w - o for a, b in zip(starts, starts[1:]))
    covered = {s.index for b in blocks for s in b.sentences}
    assert covered == set(range(n))


# breakpoints

def _from_distances(d):
    """2-D unit vectors whose consecutive 1 - cos equal ``d``."""
    angles = np.concatenate([[0.0], np.cumsum(np.arccos(1.0 - np.asarray(d)))])
    return [np.array([np.cos(a), np.sin(a)]) for a in angles]


def test_breakpoint_examples():
    d = [0.05, 0.08, 0.10, 0.90]
    assert interpolated_percentile(d, 95) == pytest.approx(0.10 + 0.85 * 0.80)
    assert oracles.percentile_linear(d, 95) == pytest.approx(0.78)
    assert breakpoints(_from_distances(d), 95.0) == {4}
    assert breakpoints(_from_distances([0.3] * 4), 95.0) == set()
    same = [np.array([1.0, 0.0])] * 6
    assert breakpoints(same, 95.0) == set()


def test_breakpoint_small_blocks_never_split():
    assert breakpoints(_from_distances([0.01, 0.9, 0.01]), 95.0) == set()
    with pytest.raises(InputError):
        breakpoints([np.array([1.0, 0.0])], 95.0)


def test_breakpoint_document_threshold_override():
    vecs = _from_distances([0.05, 0.4, 0.05])
    assert breakpoints(vecs, 95.0, threshold=0.2) == {2}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.9), min_size=1, max_size=12))
def test_breakpoints_match_oracle(d):
    vecs = _from_distances(d)
    assert breakpoints(vecs, 95.0) == oracles.brute_breakpoints([v.tolist() for v in vecs], 95.0)


# forming

def test_form_chunks_examples():
    sents = _sents(10)
    block = Block(0, tuple(sents[:8]))
    chunks = form_chunks([block], [{3}])
    assert [c.ordinals for c in chunks] == [(0, 1, 2), (3, 4, 5, 6, 7)]
    assert chunks[0].content == "Sentence 0 here. Sentence 1 here. Sentence 2 here."
    blocks = build_windows(sents, 8, 2)
    chunks = form_chunks(blocks, [set(), set()])
    assert len(chunks) == 2
    assert chunks[0].content.endswith("Sentence 6 here. Sentence 7 here.")
    assert chunks[1].content.startswith("Sentence 6 here. Sentence 7 here.")


# merging

def _embedded(texts, embedder, start=0):
    out = []
    for i, t in enumerate(texts):
        c = TextChunk((start + i,), t)
        c.embedding = embedder.embed_one(t)
        out.append(c)
    return out


def test_merge_duplicates_collapse(embedder):
    sents = segment_sentences("Alpha beta gamma. Alpha beta gamma.")
    chunks = _embedded([s.text for s in sents], embedder)
    out = merge_chunks(chunks, 0.85, embedder, sents, 1000)
    assert len(out) == 1 and out[0].ordinals == (0, 1)
    assert out[0].content == "Alpha beta gamma. Alpha beta gamma."


def test_merge_fixpoint(embedder):
    texts = ["Capital ratio rose.", "Weather was mild.", "Deposits fell sharply.", "Dividends unchanged."]
    sents = segment_sentences(" ".join(texts))
    chunks = _embedded(texts, embedder)
    out = merge_chunks(chunks, 0.85, embedder, sents, 1000)
    assert [c.ordinals for c in out] == [c.ordinals for c in chunks]
    assert merge_chunks([], 0.85, embedder, sents, 1000) == []


def test_merge_non_contiguous_uses_separator(embedder):
    texts = ["Alpha beta gamma.", "Unrelated words here.", "Alpha beta gamma."]
    sents = segment_sentences(" ".join(texts))
    out = merge_chunks(_embedded(texts, embedder), 0.85, embedder, sents, 1000)
    merged = [c for c in out if len(c.ordinals) == 2][0]
    assert merged.ordinals == (0, 2)
    assert merged.content == "Alpha beta gamma." + RUN_SEPARATOR + "Alpha beta gamma."


def test_merge_blocked_by_cap(embedder):
    sents = segment_sentences("Alpha beta gamma delta. Alpha beta gamma delta.")
    blocked = []
    out = merge_chunks(_embedded([s.text for s in sents], embedder), 0.85, embedder, sents, 5, blocked)
    assert len(out) == 2
    assert blocked == [((0,), (1,))]


def test_merge_count_equals_distinct_paragraphs(embedder):
    for k in (3, 6, 10):
        text = synth.redundancy_corpus(paragraphs=k, seed=k)
        result = chunk_document(text, EngineConfig(window_size=8, overlap=4), embedder)
        assert len(result.chunks) == k
        assert result.pre_merge_count > k


def _corpus(seed, n):
    r = random.Random(seed)
    words = ["revenue", "capital", "deposit", "loan", "margin", "ratio", "asset", "fee"]
    return " ".join(" ".join(r.choices(words, k=r.randint(2, 5))).capitalize() + "." for _ in range(n))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30), w=st.integers(2, 8), cap=st.integers(4, 200))
def test_chunking_invariants(seed, n, w, cap):
    embedder = HashEmbedder(64)
    text = _corpus(seed, n)
    config = EngineConfig(window_size=w, overlap=w // 2, max_context_tokens=4 * cap, embed_dim=64)
    result = chunk_document(text, config, embedder)
    sents = segment_sentences(text)
    # no ordinal lost
    assert set().union(*(c.ordinals for c in result.chunks)) == set(range(len(sents)))
    # every surviving similar pair was blocked by the cap
    blocked = set(result.blocked_merges)
    chunks = result.chunks
    for i in range(len(chunks)):
        for j in range(i + 1, len(chunks)):
            sim = round(float(chunks[i].embedding @ chunks[j].embedding), 12)
            pair = tuple(sorted((chunks[i].ordinals, chunks[j].ordinals)))
            assert sim <= config.tau_merge or pair in blocked
    # merged text never exceeds the sum of its sentences
    for c in chunks:
        assert c.token_estimate <= sum(estimate_tokens(sents[k].text) for k in c.ordinals)
    assert [c.id.seq for c in chunks] == list(range(len(chunks)))
    assert all(c.id.modality is Modality.TEXT for c in chunks)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shuffle=st.randoms(use_true_random=False))
def test_merge_order_insensitive(seed, shuffle):
    embedder = HashEmbedder(64)
    text = _corpus(seed, 16)
    sents = segment_sentences(text)
    blocks = build_windows(sents, 4, 2)
    pre = form_chunks(blocks, [set()] * len(blocks))
    for c in pre:
        c.embedding = embedder.embed_one(c.content)
    base = merge_chunks(pre, 0.85, embedder, sents, 10_000)
    shuffled = list(pre)
    shuffle.shuffle(shuffled)
    again = merge_chunks(shuffled, 0.85, embedder, sents, 10_000)
    assert sorted(c.ordinals for c in base) == sorted(c.ordinals for c in again)


def test_chunk_document_trivial(embedder, config):
    assert chunk_document("", config, embedder).chunks == []
    result = chunk_document("Net income was $4.2 billion.", config, embedder)
    assert [c.content for c in result.chunks] == ["Net income was $4.2 billion."]
    assert result.reduction_ratio == 0.0


def test_reduction_ratio_on_redundant_corpus(embedder):
    result = chunk_document(synth.redundancy_corpus(10, seed=3), EngineConfig(window_size=8, overlap=4), embedder)
    pre = result.pre_merge_tokens
    assert result.reduction_ratio == pytest.approx(1 - sum(c.token_estimate for c in result.chunks) / pre)
    assert result.reduction_ratio >= 0.40


def test_record_round_trip(embedder, config):
    chunk = chunk_document("One fact here. Another fact there.", config, embedder, doc_id="d").chunks[0]
    back = TextChunk.from_record(chunk.to_record())
    assert (back.id, back.ordinals, back.content, back.token_estimate) == (
        chunk.id, chunk.ordinals, chunk.content, chunk.token_estimate)
