"""Knowledge-base construction for one document: chunk and index text, extract and index regions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .chunk import chunk_document
from .core import InputError, Modality
from .extract import ExtractionStats, RegionManifest, Status, extract_images, extract_tables
from .store import DocumentEntry, KnowledgeBase

logger = logging.getLogger(__name__)


@dataclass
class IngestReport:
    doc: str
    timings: dict[str, float] = field(default_factory=dict)
    pre_merge_chunks: int = 0
    text_chunks: int = 0
    pre_merge_tokens: int = 0
    merged_tokens: int = 0
    reduction_ratio: float = 0.0
    tables_total: int = 0
    tables_parsed: int = 0
    images_total: int = 0
    images_parsed: int = 0
    images_skipped: int = 0
    failed: list[str] = field(default_factory=list)
    stubs_created: int = 0
    stubs_resolved: int = 0

    @property
    def table_coverage(self) -> str:
        return f"{self.tables_parsed}/{self.tables_total}"

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["table_coverage"] = self.table_coverage
        return out


def ingest_document(kb: KnowledgeBase, doc_id: str, text: str, manifest: RegionManifest | None,
                    gateway, embedder=None) -> IngestReport:
    """Populate ``kb`` with one document and commit. Each stage is wall-clock timed."""
    if doc_id in kb.documents:
        raise InputError(f"document {doc_id!r} is already in the knowledge base")
    if ":" in doc_id or not doc_id:
        raise InputError(f"document id {doc_id!r} must be non-empty and contain no ':'")
    embedder = embedder or kb.embedder
    config = kb.config
    report = IngestReport(doc_id)
    t = report.timings

    start = time.perf_counter()
    result = chunk_document(text, config, embedder, doc_id=doc_id) if text.strip() else None
    t["chunk"] = time.perf_counter() - start
    if result is not None:
        report.pre_merge_chunks = result.pre_merge_count
        report.text_chunks = len(result.chunks)
        report.pre_merge_tokens = result.pre_merge_tokens
        report.merged_tokens = result.merged_tokens
        report.reduction_ratio = result.reduction_ratio

    start = time.perf_counter()
    for chunk in result.chunks if result else []:
        kb.append_record(Modality.TEXT, chunk.to_record(), chunk.embedding)
    t["index_text"] = time.perf_counter() - start

    manifest = RegionManifest(doc_id, list(manifest.regions), manifest.provenance) if manifest else RegionManifest(doc_id, [])
    stats = ExtractionStats()
    start = time.perf_counter()
    tables = extract_tables(manifest, config, gateway, embedder, stub_dir=kb.stub_dir, stats=stats)
    t["extract_tables"] = time.perf_counter() - start
    start = time.perf_counter()
    images = extract_images(manifest, config, gateway, embedder, stub_dir=kb.stub_dir, stats=stats)
    t["extract_images"] = time.perf_counter() - start

    start = time.perf_counter()
    for rec in tables:
        if rec.status is Status.PARSED:
            kb.append_record(Modality.TABLE, rec.to_record(), rec.embedding)
    for rec in images:
        if rec.status is Status.PARSED and not rec.skipped_non_data:
            kb.append_record(Modality.IMAGE, rec.to_record(), rec.embedding)
    t["index_regions"] = time.perf_counter() - start

    report.tables_total = len(tables)
    report.tables_parsed = sum(r.status is Status.PARSED for r in tables)
    report.images_total = len(images)
    report.images_skipped = sum(r.skipped_non_data for r in images)
    report.images_parsed = sum(r.status is Status.PARSED and not r.skipped_non_data for r in images)
    report.failed = [r.region_id for r in [*tables, *images] if r.status is Status.FAILED]
    report.stubs_created = stats.stubs_created
    report.stubs_resolved = stats.stubs_resolved

    kb.add_document(DocumentEntry(
        doc_id, report.text_chunks, report.tables_parsed, report.images_parsed,
        failed=report.failed, skipped_non_data=[r.region_id for r in images if r.skipped_non_data],
        reduction_ratio=round(report.reduction_ratio, 6),
    ))
    start = time.perf_counter()
    kb.commit()
    t["commit"] = time.perf_counter() - start
    logger.info("ingested %s: %d text chunks, tables %s, images %d", doc_id, report.text_chunks,
                report.table_coverage, report.images_parsed)
    return report
