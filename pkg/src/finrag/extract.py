"""Batched table/figure extraction through a multimodal chat gateway.

Regions come from a JSONL manifest. They are grouped into batches of at most
``batch_size``, each batch goes out as one prompt that lists the exact region
ids, and the reply is parsed back per id. Any id the model drops or garbles
is stubbed to disk and retried alone, so every region ends Parsed, Failed or
(for figures) skipped as a non-data visual.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .chunk import segment_sentences
from .core import (
    ChunkId,
    EngineConfig,
    FinragError,
    InputError,
    Modality,
    TransportError,
    canonical_json,
)
from .gateway import ChatRequest

logger = logging.getLogger(__name__)

NON_DATA_SENTINEL = "NON_DATA_VISUAL"
SUMMARY_SENTENCES = (3, 6)
CROP_PADDING = 8.0
_HEADER_RE = re.compile(r"^=== FILE: (.+?) ===\s*$", re.MULTILINE)
_END_RE = re.compile(r"^=== END ===\s*$", re.MULTILINE)
_JSON_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)\n?```", re.DOTALL)

TABLE_SYSTEM = (
    "You convert images of financial tables into faithful structured data. "
    "Never invent numbers that are not visible in the image."
)
IMAGE_SYSTEM = (
    "You describe charts and figures from financial filings for later retrieval. "
    "Report the values, trends and labels that are visible."
)


class ManifestError(FinragError):
    pass


class RegionKind(str, enum.Enum):
    TABLE = "table"
    FIGURE = "figure"


class Status(str, enum.Enum):
    PARSED = "parsed"
    STUBBED = "stubbed"
    FAILED = "failed"


@dataclass(frozen=True)
class Region:
    id: str
    doc: str
    page: int
    kind: RegionKind
    bbox: tuple[float, float, float, float]
    image_path: str


@dataclass
class RegionManifest:
    doc: str
    regions: list[Region]
    provenance: str = "manifest"

    def of_kind(self, kind: RegionKind) -> list[Region]:
        return [r for r in self.regions if r.kind is kind]


@dataclass
class TableRecord:
    id: ChunkId
    region_id: str
    summary: str = ""
    structured: Any = None
    embedding: np.ndarray | None = None
    status: Status = Status.STUBBED
    cause: str = ""

    def to_record(self) -> dict:
        return {
            "id": str(self.id),
            "region_id": self.region_id,
            "summary": self.summary,
            "json": canonical_json(self.structured),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TableRecord":
        return cls(
            ChunkId.parse(rec["id"]), rec["region_id"], rec["summary"],
            json.loads(rec["json"]), status=Status.PARSED,
        )


@dataclass
class ImageRecord:
    id: ChunkId
    region_id: str
    summary: str = ""
    embedding: np.ndarray | None = None
    status: Status = Status.STUBBED
    skipped_non_data: bool = False
    cause: str = ""

    def to_record(self) -> dict:
        return {"id": str(self.id), "region_id": self.region_id, "summary": self.summary}

    @classmethod
    def from_record(cls, rec: dict) -> "ImageRecord":
        return cls(ChunkId.parse(rec["id"]), rec["region_id"], rec["summary"], status=Status.PARSED)


@dataclass
class ExtractionStats:
    batches: int = 0
    batch_calls: int = 0
    single_calls: int = 0
    stubs_created: int = 0
    stubs_resolved: int = 0
    parsed: int = 0
    failed: int = 0
    skipped_non_data: int = 0
    failures: dict[str, str] = field(default_factory=dict)


def _parse_region(row: dict, base: Path, lineno: int, default_doc: str) -> Region:
    try:
        kind = RegionKind(str(row["kind"]).lower())
        x0, y0, x1, y1 = (float(v) for v in row["bbox"])
        page = int(row["page"])
        rid = str(row["id"])
        image = Path(row["image_path"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: malformed region ({exc!r})") from exc
    if not rid:
        raise ManifestError(f"line {lineno}: empty region id")
    if not (x0 < x1 and y0 < y1):
        raise ManifestError(f"line {lineno}: bbox {row['bbox']} is not well ordered")
    if page < 1:
        raise ManifestError(f"line {lineno}: page must be >= 1")
    if not image.is_absolute():
        image = base / image
    return Region(rid, str(row.get("doc", default_doc)), page, kind, (x0, y0, x1, y1), str(image))


def load_manifest(path: str | Path, doc: str | None = None) -> RegionManifest:
    """Read and validate a JSONL region manifest; image paths resolve relative to it."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    default_doc = doc or path.stem
    regions: list[Region] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(row, dict):
            raise ManifestError(f"line {lineno}: expected a JSON object")
        region = _parse_region(row, path.parent, lineno, default_doc)
        if region.id in seen:
            raise ManifestError(f"line {lineno}: duplicate region id {region.id!r}")
        seen.add(region.id)
        regions.append(region)
    missing = [r.image_path for r in regions if not Path(r.image_path).exists()]
    if missing:
        raise ManifestError("missing image files: " + ", ".join(missing))
    return RegionManifest(default_doc, regions)


def manifest_from_sidecar(path: str | Path, doc: str | None = None) -> RegionManifest:
    """Fallback provider: every image object listed in a sidecar JSON becomes a Figure region.

    The sidecar is a JSON list of ``{name, page, bbox, image_path}`` objects,
    as dumped by a PDF layout pass.
    """
    path = Path(path)
    doc = doc or path.stem
    regions = []
    for n, obj in enumerate(json.loads(path.read_text()), start=1):
        row = {"id": obj.get("name") or f"fig{n:04d}", "kind": "figure", **obj}
        regions.append(_parse_region(row, path.parent, n, doc))
    return RegionManifest(doc, regions, provenance="sidecar-image-objects")


def crop_region(page_image: str | Path, page_size: tuple[float, float], region: Region,
                out_path: str | Path, padding: float = CROP_PADDING) -> Path:
    """Crop ``region`` (bbox in page points, origin bottom-left) out of a rendered page, with padding."""
    from PIL import Image

    with Image.open(page_image) as img:
        sx = img.width / page_size[0]
        sy = img.height / page_size[1]
        x0, y0, x1, y1 = region.bbox
        box = (
            max(0, int((x0 - padding) * sx)),
            max(0, int((page_size[1] - y1 - padding) * sy)),
            min(img.width, int(math.ceil((x1 + padding) * sx))),
            min(img.height, int(math.ceil((page_size[1] - y0 + padding) * sy))),
        )
        out = Path(out_path)
        img.crop(box).save(out, format="PNG")
    return out


def partition_batches(regions: Sequence, batch_size: int) -> list[list]:
    """Consecutive groups of at most ``batch_size``; ``ceil(len / batch_size)`` of them."""
    if batch_size < 1:
        raise InputError("batch size must be >= 1")
    return [list(regions[i:i + batch_size]) for i in range(0, len(regions), batch_size)]


def _label(region_id: str) -> str:
    return json.dumps(region_id) if re.search(r"\s|\"", region_id) else region_id


def _unlabel(raw: str) -> str:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw[1:-1]
    return raw


def build_table_prompt(batch: Sequence[Region]) -> str:
    if not batch:
        raise InputError("cannot build a prompt for an empty batch")
    files = "\n".join(f"{i}. {_label(r.id)}" for i, r in enumerate(batch, start=1))
    return (
        f"You are given {len(batch)} table image(s), attached in this order:\n{files}\n\n"
        "For every file, write one section exactly in this form:\n"
        "=== FILE: <filename as listed> ===\n"
        "DESCRIPTION:\n<2-4 sentences on what the table reports>\n"
        "JSON:\n```json\n<the full table as a JSON object: column headers, rows, units>\n```\n"
        "=== END ===\n\n"
        "Use the filenames exactly as listed, one section per file, no other files."
    )


def build_image_prompt(batch: Sequence[Region]) -> str:
    if not batch:
        raise InputError("cannot build a prompt for an empty batch")
    files = "\n".join(f"{i}. {_label(r.id)}" for i, r in enumerate(batch, start=1))
    return (
        f"You are given {len(batch)} figure image(s), attached in this order:\n{files}\n\n"
        "For every file, write one section exactly in this form:\n"
        "=== FILE: <filename as listed> ===\n"
        "<a 3-6 sentence summary of the data shown: values, trends, labels>\n"
        "=== END ===\n\n"
        f"If a file is not a data visual (logo, watermark, decoration), the section body "
        f"must be exactly {NON_DATA_SENTINEL}.\n"
        "Use the filenames exactly as listed, one section per file, no other files."
    )


def _sections(raw: str, ids: Sequence[str]) -> dict[str, str]:
    """Body text per batch id; ids outside the batch and repeated sections are ignored."""
    wanted = set(ids)
    headers = list(_HEADER_RE.finditer(raw))
    out: dict[str, str] = {}
    for k, h in enumerate(headers):
        rid = _unlabel(h.group(1))
        stop = headers[k + 1].start() if k + 1 < len(headers) else len(raw)
        body = raw[h.end():stop]
        end = _END_RE.search(body)
        if end:
            body = body[: end.start()]
        if rid in wanted and rid not in out:
            out[rid] = body.strip()
    if not headers and len(ids) == 1 and raw.strip():
        # single-region retries may come back unframed
        out[ids[0]] = raw.strip()
    return out


def _parse_table_body(body: str) -> tuple[str, Any] | None:
    m = re.search(r"DESCRIPTION:\s*(.*?)\s*JSON:\s*", body, re.DOTALL)
    fence = _JSON_FENCE_RE.search(body)
    if not m or not fence:
        return None
    summary = m.group(1).strip()
    try:
        structured = json.loads(fence.group(1))
    except json.JSONDecodeError:
        return None
    if not summary:
        return None
    return summary, structured


def parse_batch_response(batch: Sequence[Region], raw: str) -> tuple[dict[str, tuple[str, Any]], list[str]]:
    """Map each batch id to ``(summary, structured)``; ids absent or invalid go to the missing list.

    Never raises on malformed model output.
    """
    ids = [r.id for r in batch]
    found: dict[str, tuple[str, Any]] = {}
    for rid, body in _sections(raw or "", ids).items():
        parsed = _parse_table_body(body)
        if parsed is not None:
            found[rid] = parsed
    return found, [rid for rid in ids if rid not in found]


def count_sentences(text: str) -> int:
    return len(segment_sentences(text))


def parse_image_response(batch: Sequence[Region], raw: str) -> tuple[dict[str, str | None], list[str]]:
    """Map each batch id to its summary, or ``None`` for a non-data visual.

    Summaries outside 3-6 sentences count as missing.
    """
    ids = [r.id for r in batch]
    found: dict[str, str | None] = {}
    lo, hi = SUMMARY_SENTENCES
    for rid, body in _sections(raw or "", ids).items():
        if body.strip() == NON_DATA_SENTINEL:
            found[rid] = None
        elif lo <= count_sentences(body) <= hi:
            found[rid] = body
    return found, [rid for rid in ids if rid not in found]


def write_stub(stub_dir: Path | None, region_id: str, batch_id: int, attempts: int, reason: str,
               resolved: bool = False) -> None:
    if stub_dir is None:
        return
    stub_dir.mkdir(parents=True, exist_ok=True)
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", region_id)
    payload = {"region_id": region_id, "batch_id": batch_id, "attempts": attempts,
               "reason": reason, "resolved": resolved}
    (stub_dir / f"{safe}.json").write_text(json.dumps(payload, sort_keys=True) + "\n")


def _run_batches(batches, build_prompt, parse, system, gateway, stats, max_in_flight):
    def call(batch):
        req = ChatRequest(system, build_prompt(batch), tuple(r.image_path for r in batch))
        try:
            return parse(batch, gateway.chat(req).text), None
        except TransportError as exc:
            return ({}, [r.id for r in batch]), f"transport: {exc}"

    stats.batches += len(batches)
    stats.batch_calls += len(batches)
    if max_in_flight > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(call, batches))
    return [call(b) for b in batches]


def _extract(regions, config, gateway, build_prompt, parse, system, stub_dir, stats, max_in_flight):
    """Batched pass then single-region retries. Returns ``{region_id: (value, status, cause)}``."""
    stub_dir = Path(stub_dir) if stub_dir is not None else None
    batches = partition_batches(regions, config.batch_size)
    outcome: dict[str, tuple[Any, Status, str]] = {}
    pending: list[tuple[Region, int, str]] = []
    for batch_id, (batch, ((found, missing), error)) in enumerate(
        zip(batches, _run_batches(batches, build_prompt, parse, system, gateway, stats, max_in_flight))
    ):
        for rid, value in found.items():
            outcome[rid] = (value, Status.PARSED, "")
        by_id = {r.id: r for r in batch}
        for rid in missing:
            reason = error or "missing or invalid in batch response"
            write_stub(stub_dir, rid, batch_id, 0, reason)
            stats.stubs_created += 1
            outcome[rid] = (None, Status.STUBBED, reason)
            pending.append((by_id[rid], batch_id, reason))

    for region, batch_id, reason in pending:
        for attempt in range(1, config.retry_limit + 1):
            stats.single_calls += 1
            req = ChatRequest(system, build_prompt([region]), (region.image_path,))
            try:
                found, _ = parse([region], gateway.chat(req).text)
            except TransportError as exc:
                found, reason = {}, f"transport: {exc}"
            if region.id in found:
                outcome[region.id] = (found[region.id], Status.PARSED, "")
                write_stub(stub_dir, region.id, batch_id, attempt, reason, resolved=True)
                stats.stubs_resolved += 1
                break
            reason = reason if reason.startswith("transport") else "missing or invalid in single-region response"
            write_stub(stub_dir, region.id, batch_id, attempt, reason)
        else:
            outcome[region.id] = (None, Status.FAILED, reason)
            stats.failures[region.id] = reason
            logger.warning("region %s failed after %d retries: %s", region.id, config.retry_limit, reason)
    return outcome


def _embed_summaries(records: Iterable, embedder) -> None:
    todo = [r for r in records if r.status is Status.PARSED and r.summary]
    for rec, vec in zip(todo, embedder.embed_batch([r.summary for r in todo])):
        rec.embedding = vec


def extract_tables(manifest: RegionManifest, config: EngineConfig, gateway, embedder,
                   stub_dir: str | Path | None = None, stats: ExtractionStats | None = None,
                   max_in_flight: int = 2) -> list[TableRecord]:
    """Parse every table region into a summary plus structured JSON, embedded on the summary."""
    stats = stats if stats is not None else ExtractionStats()
    regions = manifest.of_kind(RegionKind.TABLE)
    outcome = _extract(regions, config, gateway, build_table_prompt, parse_batch_response,
                       TABLE_SYSTEM, stub_dir, stats, max_in_flight)
    records = []
    for seq, region in enumerate(regions):
        value, status, cause = outcome[region.id]
        rec = TableRecord(ChunkId(manifest.doc, Modality.TABLE, seq), region.id, status=status, cause=cause)
        if status is Status.PARSED:
            rec.summary, rec.structured = value
            stats.parsed += 1
        else:
            stats.failed += 1
        records.append(rec)
    _embed_summaries(records, embedder)
    return records


def extract_images(manifest: RegionManifest, config: EngineConfig, gateway, embedder,
                   stub_dir: str | Path | None = None, stats: ExtractionStats | None = None,
                   max_in_flight: int = 2) -> list[ImageRecord]:
    """Summarize every figure region in 3-6 sentences; non-data visuals are flagged and left unembedded."""
    stats = stats if stats is not None else ExtractionStats()
    regions = manifest.of_kind(RegionKind.FIGURE)
    outcome = _extract(regions, config, gateway, build_image_prompt, parse_image_response,
                       IMAGE_SYSTEM, stub_dir, stats, max_in_flight)
    records = []
    for seq, region in enumerate(regions):
        value, status, cause = outcome[region.id]
        rec = ImageRecord(ChunkId(manifest.doc, Modality.IMAGE, seq), region.id, status=status, cause=cause)
        if status is Status.PARSED:
            if value is None:
                rec.skipped_non_data = True
                stats.skipped_non_data += 1
            else:
                rec.summary = value
                stats.parsed += 1
        else:
            stats.failed += 1
        records.append(rec)
    _embed_summaries(records, embedder)
    return records


def render_table_reply(batch: Sequence[Region], answers: dict[str, tuple[str, Any]]) -> str:
    """Frame replies the way the table prompt asks; used by offline gateways and tests."""
    parts = []
    for r in batch:
        if r.id not in answers:
            continue
        summary, structured = answers[r.id]
        parts.append(
            f"=== FILE: {_label(r.id)} ===\nDESCRIPTION:\n{summary}\nJSON:\n```json\n"
            f"{json.dumps(structured)}\n```\n=== END ==="
        )
    return "\n".join(parts)


def render_image_reply(batch: Sequence[Region], answers: dict[str, str]) -> str:
    parts = [f"=== FILE: {_label(r.id)} ===\n{answers[r.id]}\n=== END ===" for r in batch if r.id in answers]
    return "\n".join(parts)
