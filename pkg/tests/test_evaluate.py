import pytest

from finrag.core import InputError
from finrag.evaluate import EvalReport, EvalRow, QAItem, answers_match, load_qa, normalize_answer


@pytest.mark.parametrize("a, b", [
    ("1,000 million", "1 billion"),
    ("$1 billion", "1000000000"),
    ("USD 2.5bn", "2,500 million"),
    ("13.2%", "13.2 %"),
    ("Net income was $4.20 Million.", "net income was 4.2 million"),
    ("  YES ", "yes"),
    ("-3.50", "-3.5"),
])
def test_equivalent_answers(a, b):
    assert answers_match(a, b)


@pytest.mark.parametrize("a, b", [
    ("1 billion", "1 million"),
    ("13.2%", "13.3%"),
    ("revenue rose", "revenue fell"),
    ("2023", "2024"),
])
def test_different_answers(a, b):
    assert not answers_match(a, b)


def test_normal_form():
    assert normalize_answer("$1,000 million") == "1000000000"
    assert normalize_answer("Insufficient information.") == "insufficient information"
    assert normalize_answer("CET1 ratio: 13.20%") == "cet1 ratio 13.2%"


def test_load_qa(tmp_path):
    path = tmp_path / "qa.jsonl"
    path.write_text('{"question": "q1", "answer": "a", "type": "table"}\n\n{"question": "q2", "answer": "b"}\n')
    items = load_qa(path)
    assert items == [QAItem("q1", "a", "table"), QAItem("q2", "b", "text")]
    path.write_text('{"question": "q", "answer": "a", "type": "audio"}\n')
    with pytest.raises(InputError, match="audio"):
        load_qa(path)
    path.write_text('{"question": "q"}\n')
    with pytest.raises(InputError, match="qa.jsonl:1"):
        load_qa(path)


def test_report_per_type():
    rows = [EvalRow("q", "text", "a", "a", True, "TextOnly"), EvalRow("q", "text", "a", "b", False, "TextOnly"),
            EvalRow("q", "table", "a", "a", True, "Fallback")]
    report = EvalReport(rows)
    assert report.per_type() == {"text": (1, 2), "table": (1, 1)}
    assert report.overall == pytest.approx(2 / 3)
    table = report.table()
    assert "text" in table and "50.0%" in table and "66.7%" in table
    assert report.to_dict()["per_type"]["table"]["accuracy"] == 1.0
    assert EvalReport().overall == 0.0
