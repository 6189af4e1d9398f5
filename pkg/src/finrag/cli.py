"""Command-line driver: ingest, query, calibrate, stats, eval.

Exit codes: 0 success, 1 usage error, 2 data or knowledge-base error,
3 gateway or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .core import ConfigError, FinragError, InputError, TransportError, load_config
from .embed import EmbedderSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRANSPORT = 0, 1, 2, 3

logger = logging.getLogger("finrag")


class UsageError(FinragError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        print(text)


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def read_document(path: Path) -> str:
    """Plain-text documents only. A PDF text extractor would plug in here."""
    if path.suffix.lower() == ".pdf":
        raise UsageError(f"{path}: PDF input is not supported; extract the text to a .txt file first")
    return path.read_text(encoding="utf-8")


def _gateway(args):
    if args.offline:
        from .offline import offline_gateway

        return offline_gateway(getattr(args, "rules", None), getattr(args, "omit_rate", 0.0),
                               getattr(args, "fault_seed", 0))
    from .gateway import HttpGateway

    return HttpGateway.from_env()


def _open(args, writable: bool = False):
    from .store import open_kb

    return open_kb(args.kb, writable=writable)


# subcommands

def cmd_ingest(args) -> int:
    from .extract import load_manifest, manifest_from_sidecar
    from .ingest import ingest_document
    from .store import KB_MANIFEST, init_kb, open_kb

    doc_path = _require_file(args.doc, "--doc")
    if args.manifest is not None:
        _require_file(args.manifest, "--manifest")
    if args.sidecar is not None:
        _require_file(args.sidecar, "--sidecar")
    if args.config is not None:
        _require_file(args.config, "--config")
    config = load_config(args.config)
    doc_id = args.doc_id or doc_path.stem
    manifest = None
    if args.manifest:
        manifest = load_manifest(args.manifest, doc=doc_id)
    elif args.sidecar:
        manifest = manifest_from_sidecar(args.sidecar, doc=doc_id)
    text = read_document(doc_path)
    spec = EmbedderSpec("test", config.embed_dim) if args.offline else EmbedderSpec.from_env(config.embed_dim)
    gateway = _gateway(args)
    root = Path(args.kb)
    kb = open_kb(root, writable=True) if (root / KB_MANIFEST).exists() else init_kb(root, config, spec)
    with kb:
        report = ingest_document(kb, doc_id, text, manifest, gateway)
        counts = kb.counts()
    lines = [f"ingested {doc_id} into {root}"]
    lines += [f"  {stage:<16}{secs * 1000:10.1f} ms" for stage, secs in report.timings.items()]
    lines.append(
        f"text chunks {report.text_chunks} (from {report.pre_merge_chunks}), "
        f"chunk-reduction ratio {report.reduction_ratio:.3f}"
    )
    lines.append(
        f"coverage {report.table_coverage}, stubs created {report.stubs_created}, "
        f"stubs resolved {report.stubs_resolved}"
    )
    lines.append(f"images {report.images_parsed}/{report.images_total} (non-data skipped {report.images_skipped})")
    if report.failed:
        lines.append("failed regions: " + ", ".join(report.failed))
    lines.append("counts " + " ".join(f"{k}={v}" for k, v in counts.items()))
    _emit(args, {**report.to_dict(), "counts": counts}, "\n".join(lines))
    return EXIT_OK


def _answer_one(args, kb, gateway, question: str) -> dict:
    from .retrieve import answer

    ans = answer(question, kb, gateway)
    if args.trace:
        Path(args.trace).write_text(json.dumps(ans.trace.to_dict(), indent=2, sort_keys=True) + "\n")
    out = ans.to_dict()
    _emit(args, out, f"{ans.text}\n[tier {ans.trace.tier.value}; contexts {len(ans.trace.context_ids)}]")
    return out


def cmd_query(args) -> int:
    if not args.repl and not args.question:
        raise UsageError("give --question or --repl")
    kb = _open(args)
    gateway = _gateway(args)
    if not args.repl:
        _answer_one(args, kb, gateway, args.question)
        return EXIT_OK
    for line in sys.stdin:
        question = line.strip()
        if not question:
            continue
        if question in (":q", "quit", "exit"):
            break
        try:
            _answer_one(args, kb, gateway, question)
        except InputError as exc:
            print(f"error: {exc}", file=sys.stderr)
        sys.stdout.flush()
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibrate import calibrate, load_dev_set, write_points_csv, write_summary

    dev = load_dev_set(_require_file(args.dev, "--dev"))
    if not dev:
        raise UsageError(f"dev set {args.dev} is empty")
    kb = _open(args)
    gateway = _gateway(args) if args.live else None
    result = calibrate(dev, kb, budget=args.budget, gateway=gateway)
    if args.out:
        write_points_csv(result.points, args.out)
    if args.summary:
        write_summary(result, args.summary)
    lines = [f"{'stage':<12}{'text':>6}{'table':>7}{'image':>7}{'prec':>8}{'acc':>8}{'tokens':>9}  feasible"]
    for p in result.points:
        lines.append(
            f"{p.stage:<12}{p.theta_text:>6.2f}{p.theta_table:>7.2f}{p.theta_image:>7.2f}"
            f"{p.context_precision:>8.3f}{p.qa_accuracy:>8.3f}{p.mean_context_tokens:>9.1f}  {p.feasible}"
        )
    t, tb, im = result.selected
    lines.append(f"selected theta_text={t:.2f} theta_table={tb:.2f} theta_image={im:.2f}")
    payload = {**result.summary(), "points": [p.__dict__ for p in result.points]}
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_stats(args) -> int:
    kb = _open(args)
    sizes = {m.value: kb.index_path(m).stat().st_size for m in kb.indexes}
    payload = {
        "root": str(kb.root),
        "counts": kb.counts(),
        "index_bytes": sizes,
        "index_kind": kb.config.index_kind,
        "documents": [d.to_dict() for d in kb.documents.values()],
        "config": kb.config.to_dict(),
        "embedder": kb.embedder_spec.to_dict(),
    }
    lines = [f"knowledge base {kb.root}"]
    lines += [f"  {m:<6} records {n:>7}  index {sizes[m]:>10} bytes" for m, n in kb.counts().items()]
    lines.append("documents: " + (", ".join(kb.documents) or "(none)"))
    lines.append("config:")
    lines += [f"  {k} = {v}" for k, v in kb.config.to_dict().items()]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import load_qa, run_eval

    items = load_qa(_require_file(args.qa, "--qa"))
    kb = _open(args)
    report = run_eval(items, kb, _gateway(args))
    _emit(args, report.to_dict(), report.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="finrag", description="Multimodal retrieval over financial filings.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, gateway: bool = True):
        sp.add_argument("--kb", required=True, help="knowledge-base directory")
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if gateway:
            sp.add_argument("--offline", action="store_true", help="test embedder and offline model")

    sp = sub.add_parser("ingest", help="build or extend a knowledge base from one document")
    common(sp)
    sp.add_argument("--doc", required=True, help="plain-text document")
    sp.add_argument("--manifest", help="region manifest (JSONL)")
    sp.add_argument("--sidecar", help="image-object sidecar; every object becomes a figure region")
    sp.add_argument("--config", help="config file (key = value lines)")
    sp.add_argument("--doc-id", help="document id (default: file stem)")
    sp.add_argument("--omit-rate", type=float, default=0.0, help="offline fault injection on batch calls")
    sp.add_argument("--fault-seed", type=int, default=0)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("query", help="answer a question")
    common(sp)
    sp.add_argument("--question")
    sp.add_argument("--repl", action="store_true", help="read questions from stdin, one per line")
    sp.add_argument("--trace", help="write the retrieval trace JSON here")
    sp.add_argument("--rules", help="offline answer rules (JSONL match_substring/response_text)")
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("calibrate", help="sweep similarity thresholds on a dev set")
    common(sp)
    sp.add_argument("--dev", required=True, help="dev set (JSONL)")
    sp.add_argument("--out", help="CSV of all grid points")
    sp.add_argument("--summary", help="JSON with the selected thresholds")
    sp.add_argument("--budget", type=int, help="per-query context token budget")
    sp.add_argument("--live", action="store_true", help="score answers through the gateway")
    sp.add_argument("--rules", help="offline answer rules for --live --offline")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("stats", help="show counts, index sizes and config")
    common(sp, gateway=False)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("eval", help="score a QA set per question type")
    common(sp)
    sp.add_argument("--qa", required=True, help="QA set (JSONL question/answer/type)")
    sp.add_argument("--rules", help="offline answer rules (JSONL match_substring/response_text)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except FinragError as exc:
        cause = getattr(exc, "cause", None)
        if isinstance(cause, TransportError):
            print(f"transport error: {exc}", file=sys.stderr)
            return EXIT_TRANSPORT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
