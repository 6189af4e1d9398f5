"""Grid calibration of the per-modality similarity thresholds.

Stage one sweeps ``theta_text`` over text-only retrieval. Stage two fixes
the chosen ``theta_text`` and sweeps ``(theta_table, theta_image)`` through
the full tiered pipeline. Each grid point scores
``accuracy + precision_weight * precision`` and is feasible only if every
query's context stays within the token budget.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import EngineConfig, FinragError, InputError, Modality
from .retrieve import DEFERRAL, Query, answer, assemble_prompt, retrieve, retrieve_text

logger = logging.getLogger(__name__)

TEXT_GRID = tuple(round(0.55 + 0.05 * i, 2) for i in range(7))
TABLE_IMAGE_GRID = tuple(round(0.55 + 0.05 * i, 2) for i in range(5))
PRECISION_WEIGHT = 0.25
UNBOUNDED = 1 << 62


class CalibrationError(FinragError):
    pass


@dataclass
class DevSample:
    query: str
    answer: str
    gold: dict[Modality, frozenset[str]] = field(default_factory=dict)
    unanswerable: bool = False
    embedding: np.ndarray | None = None

    def __post_init__(self):
        self.gold = {m: frozenset(self.gold.get(m, ())) for m in Modality}
        if not self.unanswerable and not self.all_gold:
            raise InputError(f"dev sample {self.query!r} has no gold ids and is not marked unanswerable")

    @property
    def all_gold(self) -> frozenset[str]:
        return frozenset().union(*self.gold.values())


def load_dev_set(path: str | os.PathLike) -> list[DevSample]:
    """JSONL rows ``{query, answer, gold: {text, table, image}, unanswerable?, embedding?}``.

    ``embedding`` is an optional precomputed query vector; without it the
    query text is embedded with the KB's embedder.
    """
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            gold = {Modality(k): v for k, v in row.get("gold", {}).items()}
            vec = row.get("embedding")
            out.append(DevSample(row["query"], row.get("answer", DEFERRAL), gold, bool(row.get("unanswerable")),
                                 None if vec is None else np.asarray(vec, dtype=np.float64)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: malformed dev sample ({exc})") from exc
    return out


@dataclass(frozen=True)
class CalibrationPoint:
    theta_text: float
    theta_table: float
    theta_image: float
    context_precision: float
    qa_accuracy: float
    mean_context_tokens: float
    max_context_tokens: int
    feasible: bool
    stage: str = "text"

    @property
    def triplet(self) -> tuple[float, float, float]:
        return (self.theta_text, self.theta_table, self.theta_image)

    def score(self, precision_weight: float = PRECISION_WEIGHT) -> float:
        return self.qa_accuracy + precision_weight * self.context_precision


def scripted_correct(sample: DevSample, retrieved: Iterable[str]) -> bool:
    """Offline QA proxy: answerable samples need every gold context; unanswerable ones need none retrieved."""
    got = set(retrieved)
    if sample.unanswerable:
        return not got
    return sample.all_gold <= got


def _query(sample: DevSample, kb, config: EngineConfig) -> Query:
    if sample.embedding is not None:
        return Query(sample.query, sample.embedding, config)
    return Query.from_text(sample.query, kb.embedder, config)


def _evaluate(dev: Sequence[DevSample], kb, config: EngineConfig, stage: str, budget: int,
              gateway=None, judge: Callable[[str, str], bool] | None = None) -> CalibrationPoint:
    retrieved_total = gold_total = correct = 0
    tokens = []
    for s in dev:
        q = _query(s, kb, config)
        if stage == "text":
            hits = (retrieve_text(q, kb.index(Modality.TEXT)), [], [])
        else:
            trace, _ = retrieve(q, kb)
            hits = (trace.text_hits, trace.table_hits, trace.image_hits)
        # feasibility is judged on the untrimmed context
        tokens.append(assemble_prompt(q, *hits, kb.record, budget=UNBOUNDED).token_estimate)
        ids = [h.id for group in hits for h in group]
        retrieved_total += len(ids)
        gold_total += len(s.all_gold.intersection(ids))
        if gateway is None:
            correct += scripted_correct(s, ids)
        else:
            reply = answer(q, kb, gateway).text
            correct += (judge or _default_judge)(reply, s.answer)
    n = len(dev)
    return CalibrationPoint(
        config.theta_text, config.theta_table, config.theta_image,
        context_precision=gold_total / retrieved_total if retrieved_total else 0.0,
        qa_accuracy=correct / n if n else 0.0,
        mean_context_tokens=float(np.mean(tokens)) if tokens else 0.0,
        max_context_tokens=max(tokens, default=0),
        feasible=max(tokens, default=0) <= budget,
        stage=stage,
    )


def _default_judge(reply: str, expected: str) -> bool:
    from .evaluate import answers_match

    return answers_match(reply, expected)


def _check_dev(dev: Sequence[DevSample]) -> None:
    if not dev:
        raise InputError("dev set is empty")


class _Scoped:
    """The KB seen through a different config; indexes and records are shared read-only."""

    def __init__(self, kb, config: EngineConfig):
        self._kb = kb
        self.config = config

    def __getattr__(self, name):
        return getattr(self._kb, name)


def sweep_text(dev: Sequence[DevSample], kb, grid: Sequence[float] = TEXT_GRID,
               budget: int | None = None, gateway=None) -> list[CalibrationPoint]:
    """Text-only retrieval at each ``theta_text`` in ``grid``."""
    _check_dev(dev)
    budget = kb.config.max_context_tokens if budget is None else budget
    points = []
    for theta in grid:
        config = kb.config.replace(theta_text=float(theta))
        points.append(_evaluate(dev, _Scoped(kb, config), config, "text", budget, gateway))
    return points


def sweep_table_image(dev: Sequence[DevSample], kb, theta_text: float,
                      grid: Sequence[float] = TABLE_IMAGE_GRID, budget: int | None = None,
                      gateway=None) -> list[CalibrationPoint]:
    """Full tiered retrieval over the ``grid x grid`` of (theta_table, theta_image)."""
    _check_dev(dev)
    budget = kb.config.max_context_tokens if budget is None else budget
    points = []
    for t_table in grid:
        for t_image in grid:
            config = kb.config.replace(theta_text=float(theta_text), theta_table=float(t_table),
                                       theta_image=float(t_image))
            points.append(_evaluate(dev, _Scoped(kb, config), config, "table_image", budget, gateway))
    return points


def _rank_key(p: CalibrationPoint, weight: float) -> tuple:
    # higher score, then tighter thresholds in text, table, image order
    return (round(p.score(weight), 12), p.theta_text, p.theta_table, p.theta_image)


def select_triplet(points: Sequence[CalibrationPoint], budget: int | None = None,
                   precision_weight: float = PRECISION_WEIGHT) -> tuple[float, float, float]:
    """Argmax of the score over feasible points; independent of input order."""
    feasible = [p for p in points if (p.feasible if budget is None else p.max_context_tokens <= budget)]
    if not feasible:
        raise CalibrationError("no grid point fits the context budget; increase max_context_tokens")
    return max(feasible, key=lambda p: _rank_key(p, precision_weight)).triplet


@dataclass
class CalibrationResult:
    text_points: list[CalibrationPoint]
    table_image_points: list[CalibrationPoint]
    selected: tuple[float, float, float]

    @property
    def points(self) -> list[CalibrationPoint]:
        return self.text_points + self.table_image_points

    def summary(self) -> dict:
        t, tb, im = self.selected
        return {"theta_text": t, "theta_table": tb, "theta_image": im,
                "text_points": len(self.text_points), "table_image_points": len(self.table_image_points)}


def calibrate(dev: Sequence[DevSample], kb, budget: int | None = None, gateway=None,
              precision_weight: float = PRECISION_WEIGHT) -> CalibrationResult:
    """Both sweeps; ``theta_text`` for stage two is the stage-one argmax."""
    text_points = sweep_text(dev, kb, budget=budget, gateway=gateway)
    theta_text = select_triplet(text_points, precision_weight=precision_weight)[0]
    ti_points = sweep_table_image(dev, kb, theta_text, budget=budget, gateway=gateway)
    return CalibrationResult(text_points, ti_points, select_triplet(ti_points, precision_weight=precision_weight))


CSV_FIELDS = ("stage", "theta_text", "theta_table", "theta_image", "context_precision", "qa_accuracy",
              "mean_context_tokens", "max_context_tokens", "feasible")


def write_points_csv(points: Sequence[CalibrationPoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow({k: v for k, v in asdict(p).items() if k in CSV_FIELDS})


def write_summary(result: CalibrationResult, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
