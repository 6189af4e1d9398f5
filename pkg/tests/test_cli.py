import csv
import json

import pytest

from finrag.cli import EXIT_DATA, EXIT_OK, EXIT_TRANSPORT, EXIT_USAGE, main

import synth


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def built(tmp_path, capsys):
    """An offline KB with the themed corpus and 10 tables (fault seed 1 omits exactly 2 in batches)."""
    doc = tmp_path / "filing.txt"
    doc.write_text(synth.themed_corpus())
    manifest = synth.region_fixture(tmp_path / "regions", tables=10)
    kb = tmp_path / "kb"
    code, out, err = run(capsys, "ingest", "--kb", kb, "--doc", doc, "--manifest", manifest,
                         "--offline", "--omit-rate", "0.2", "--fault-seed", "1")
    assert code == EXIT_OK, err
    return kb, out


def test_ingest_report(built):
    _, out = built
    assert "coverage 10/10, stubs created 2, stubs resolved 2" in out
    assert "chunk-reduction ratio" in out
    for stage in ("chunk", "extract_tables", "commit"):
        assert stage in out


def test_ingest_text_only_and_json(tmp_path, capsys):
    doc = tmp_path / "d.txt"
    doc.write_text(synth.themed_corpus(themes=1, per_theme=3))
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", doc, "--manifest", empty,
                       "--offline", "--json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["counts"]["table"] == report["counts"]["image"] == 0 and report["counts"]["text"] > 0


def test_ingest_deterministic(tmp_path, capsys):
    doc = tmp_path / "d.txt"
    doc.write_text(synth.themed_corpus())
    manifest = synth.region_fixture(tmp_path / "r", tables=6, figures=3, non_data=1)
    for name in ("a", "b"):
        assert run(capsys, "ingest", "--kb", tmp_path / name, "--doc", doc, "--manifest", manifest, "--offline",
                   "--omit-rate", "0.3")[0] == EXIT_OK
    for f in ("text.jsonl", "tables.jsonl", "images.jsonl"):
        assert (tmp_path / "a/chunks" / f).read_bytes() == (tmp_path / "b/chunks" / f).read_bytes()


def test_ingest_usage_errors(tmp_path, capsys):
    doc = tmp_path / "d.txt"
    doc.write_text("One sentence.")
    assert run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", doc, "--manifest", tmp_path / "no.jsonl",
               "--offline")[0] == EXIT_USAGE
    assert run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", tmp_path / "absent.txt", "--offline")[0] == EXIT_USAGE
    pdf = tmp_path / "f.pdf"
    pdf.write_bytes(b"%PDF-1.7")
    assert run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", pdf, "--offline")[0] == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["ingest", "--kb", str(tmp_path / "kb")])
    assert exc.value.code == EXIT_USAGE


def test_ingest_without_endpoints(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FINRAG_EMBED_URL", raising=False)
    doc = tmp_path / "d.txt"
    doc.write_text("One sentence.")
    code, _, err = run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", doc)
    assert code == EXIT_USAGE and "FINRAG_EMBED_URL" in err


def test_ingest_bad_manifest_is_data_error(tmp_path, capsys):
    doc = tmp_path / "d.txt"
    doc.write_text("One sentence.")
    manifest = tmp_path / "m.jsonl"
    manifest.write_text("{broken\n")
    code, _, err = run(capsys, "ingest", "--kb", tmp_path / "kb", "--doc", doc, "--manifest", manifest, "--offline")
    assert code == EXIT_DATA and "line 1" in err


def test_query_tiers(built, capsys, tmp_path):
    kb, _ = built
    trace_path = tmp_path / "trace.json"
    code, out, _ = run(capsys, "query", "--kb", kb, "--offline", "--question", "theme1a theme1b theme1c",
                       "--trace", trace_path)
    assert code == EXIT_OK and "[tier TextOnly;" in out
    trace = json.loads(trace_path.read_text())
    assert trace["tier"] == "TextOnly" and len(trace["text_hits"]) >= 6 and trace["table_hits"] == []

    code, out, _ = run(capsys, "query", "--kb", kb, "--offline", "--json", "--question",
                       "table t003 segment3 net revenue capital ratio period 3")
    result = json.loads(out)
    assert result["trace"]["tier"] == "Fallback"
    assert result["trace"]["table_hits"][0]["id"] == "filing:table:000003"
    assert result["answer"].startswith("Table t003 reports")

    code, out, _ = run(capsys, "query", "--kb", kb, "--offline", "--json", "--question", "zebra quokka marmalade")
    result = json.loads(out)
    assert result["insufficient"] and result["answer"] == "insufficient information"


def test_query_repl_and_usage(built, capsys, monkeypatch):
    import io

    kb, _ = built
    monkeypatch.setattr("sys.stdin", io.StringIO("theme0a theme0b theme0c\n\nzebra\n:q\nnever asked\n"))
    code, out, _ = run(capsys, "query", "--kb", kb, "--offline", "--repl")
    assert code == EXIT_OK and out.count("[tier ") == 2
    assert run(capsys, "query", "--kb", kb, "--offline")[0] == EXIT_USAGE
    assert run(capsys, "query", "--kb", kb.parent / "nokb", "--offline", "--question", "x")[0] == EXIT_DATA


def test_query_transport_failure(built, capsys, monkeypatch):
    kb, _ = built
    monkeypatch.setenv("FINRAG_LLM_URL", "http://127.0.0.1:9/api/generate")
    monkeypatch.setattr("finrag.gateway.time.sleep", lambda s: None)
    code, _, err = run(capsys, "query", "--kb", kb, "--question", "theme0a")
    assert code == EXIT_TRANSPORT and "transport" in err


def test_stats(built, capsys):
    kb, ingest_out = built
    code, out, _ = run(capsys, "stats", "--kb", kb, "--json")
    stats = json.loads(out)
    counts_line = next(line for line in ingest_out.splitlines() if line.startswith("counts "))
    printed = dict(kv.split("=") for kv in counts_line.split()[1:])
    assert {k: int(v) for k, v in printed.items()} == stats["counts"]
    assert stats["counts"]["table"] == 10 and stats["documents"][0]["doc"] == "filing"
    code, out, _ = run(capsys, "stats", "--kb", kb)
    assert code == EXIT_OK and "documents: filing" in out


def test_calibrate_planted(tmp_path, capsys):
    kb, dev = synth.calibration_fixture(tmp_path / "kb")
    kb.close()
    dev_path = tmp_path / "dev.jsonl"
    with open(dev_path, "w") as fh:
        for s in dev:
            fh.write(json.dumps({"query": s.query, "answer": s.answer, "embedding": s.embedding.tolist(),
                                 "gold": {m.value: sorted(ids) for m, ids in s.gold.items() if ids}}) + "\n")
    out_csv, summary = tmp_path / "points.csv", tmp_path / "summary.json"
    code, out, err = run(capsys, "calibrate", "--kb", tmp_path / "kb", "--dev", dev_path, "--out", out_csv,
                         "--summary", summary)
    assert code == EXIT_OK, err
    assert "selected theta_text=0.70 theta_table=0.65 theta_image=0.55" in out
    assert len(list(csv.DictReader(open(out_csv)))) == 32
    assert json.loads(summary.read_text())["theta_table"] == 0.65

    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(capsys, "calibrate", "--kb", tmp_path / "kb", "--dev", empty)[0] == EXIT_USAGE
    code, _, err = run(capsys, "calibrate", "--kb", tmp_path / "kb", "--dev", dev_path, "--budget", "3")
    assert code == EXIT_DATA and "budget" in err


def test_eval_closed_loop(built, capsys, tmp_path):
    kb, _ = built
    rules = tmp_path / "rules.jsonl"
    qa = tmp_path / "qa.jsonl"
    cases = [
        ("theme0a theme0b theme0c", "Theme zero.", "Theme zero", "text"),
        ("segment3 net revenue capital ratio", "$1,000 million", "1 billion", "table"),
        ("segment1 revenue capital", "13.2%", "13.2 %", "combined"),
    ]
    rules.write_text("".join(json.dumps({"match_substring": q, "response_text": r}) + "\n" for q, r, _, _ in cases))
    qa.write_text("".join(json.dumps({"question": q, "answer": a, "type": t}) + "\n" for q, _, a, t in cases))
    code, out, _ = run(capsys, "eval", "--kb", kb, "--offline", "--rules", rules, "--qa", qa, "--json")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["overall"] == 1.0
    assert all(v["accuracy"] == 1.0 for v in report["per_type"].values())
    code, out, _ = run(capsys, "eval", "--kb", kb, "--offline", "--rules", rules, "--qa", qa)
    assert "overall" in out and "100.0%" in out
