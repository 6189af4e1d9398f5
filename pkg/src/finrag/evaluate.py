"""Offline QA evaluation: normalized exact match, scored per question type."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

from .core import InputError
from .retrieve import answer

QUESTION_TYPES = ("text", "table", "image", "combined")

SCALE_WORDS = {
    "thousand": 10**3, "k": 10**3,
    "million": 10**6, "mn": 10**6, "mm": 10**6, "m": 10**6,
    "billion": 10**9, "bn": 10**9, "b": 10**9,
    "trillion": 10**12, "tn": 10**12,
}
_CURRENCY_RE = re.compile(r"[$€£¥]|\b(?:usd|us\$|eur|gbp|dollars?)\b")
_NUMBER_RE = re.compile(r"(?<![\w.])(-?\d+(?:,\d{3})*(?:\.\d+)?|-?\.\d+)(?:\s*(%|[a-z]+))?")


def _canonical_number(value: Decimal) -> str:
    value = value.normalize()
    text = format(value, "f")
    return text.rstrip("0").rstrip(".") if "." in text else text


def normalize_answer(text: str) -> str:
    """Case-fold, drop currency marks and thousands separators, fold scale words into magnitudes.

    ``"$1,000 million"`` and ``"1 billion"`` both normalize to ``"1000000000"``.
    """
    t = text.strip().lower()
    t = _CURRENCY_RE.sub(" ", t)

    def repl(m: re.Match) -> str:
        raw, unit = m.group(1).replace(",", ""), m.group(2)
        try:
            value = Decimal(raw)
        except InvalidOperation:
            return m.group(0)
        if unit in SCALE_WORDS:
            return _canonical_number(value * SCALE_WORDS[unit])
        suffix = f" {unit}" if unit and unit != "%" else (unit or "")
        return _canonical_number(value) + suffix

    t = _NUMBER_RE.sub(repl, t)
    t = re.sub(r"[^\w%.\- ]+", " ", t)
    t = re.sub(r"(?<!\d)\.|\.(?!\d)", " ", t)
    return " ".join(t.split())


def answers_match(predicted: str, gold: str) -> bool:
    return normalize_answer(predicted) == normalize_answer(gold)


@dataclass
class QAItem:
    question: str
    answer: str
    qtype: str = "text"

    def __post_init__(self):
        if self.qtype not in QUESTION_TYPES:
            raise InputError(f"unknown question type {self.qtype!r} (expected one of {QUESTION_TYPES})")


def load_qa(path: str | os.PathLike) -> list[QAItem]:
    """JSONL rows ``{question, answer, type}``."""
    items = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            items.append(QAItem(row["question"], row["answer"], row.get("type", "text")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed QA row ({exc})") from exc
    return items


@dataclass
class EvalRow:
    question: str
    qtype: str
    expected: str
    predicted: str
    correct: bool
    tier: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def per_type(self) -> dict[str, tuple[int, int]]:
        out = {}
        for t in QUESTION_TYPES:
            mine = [r for r in self.rows if r.qtype == t]
            if mine:
                out[t] = (sum(r.correct for r in mine), len(mine))
        return out

    @property
    def overall(self) -> float:
        return sum(r.correct for r in self.rows) / len(self.rows) if self.rows else 0.0

    def table(self) -> str:
        lines = [f"{'Question type':<16}{'Correct':>8}{'Total':>8}{'Accuracy':>10}"]
        for t, (c, n) in self.per_type().items():
            lines.append(f"{t:<16}{c:>8}{n:>8}{100 * c / n:>9.1f}%")
        n = len(self.rows)
        c = sum(r.correct for r in self.rows)
        lines.append(f"{'overall':<16}{c:>8}{n:>8}{100 * self.overall:>9.1f}%")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_type": {t: {"correct": c, "total": n, "accuracy": c / n} for t, (c, n) in self.per_type().items()},
            "rows": [r.to_dict() for r in self.rows],
        }


def run_eval(items: Sequence[QAItem], kb, gateway) -> EvalReport:
    report = EvalReport()
    for item in items:
        ans = answer(item.question, kb, gateway)
        report.rows.append(EvalRow(item.question, item.qtype, item.answer, ans.text,
                                   answers_match(ans.text, item.answer), ans.trace.tier.value))
    return report
