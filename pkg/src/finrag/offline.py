"""Deterministic offline model behaviour for tests, fixtures and ``--offline`` runs.

Extraction prompts are answered from sidecar files next to each region
image (``<image>.mock.json``):

* table: ``{"summary": str, "json": any}``
* figure: ``{"summary": str}`` or ``{"non_data": true}``

Batch calls can drop regions with a seeded per-id probability to exercise
the stub/retry path. Question prompts are answered by optional substring
rules, else extractively from the first context, else with the deferral
sentinel.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Iterable

from .extract import (
    NON_DATA_SENTINEL,
    TABLE_SYSTEM,
    Region,
    RegionKind,
    _unlabel,
    render_image_reply,
    render_table_reply,
)
from .gateway import ChatRequest, Rule, ScriptedGateway
from .retrieve import DEFERRAL, NO_CONTEXT

SIDECAR_SUFFIX = ".mock.json"
_LISTED_RE = re.compile(r"^\d+\. (.+)$", re.MULTILINE)
_CONTEXT_RE = re.compile(r"^\[[^\]]+\] \(similarity [-0-9.]+\)\n(?:Summary: )?(.*)$", re.MULTILINE)


def sidecar_path(image_path: str | Path) -> Path:
    return Path(str(image_path) + SIDECAR_SUFFIX)


def write_sidecar(image_path: str | Path, payload: dict) -> Path:
    p = sidecar_path(image_path)
    p.write_text(json.dumps(payload, sort_keys=True) + "\n")
    return p


def omitted(region_id: str, seed: int, rate: float) -> bool:
    """Seeded Bernoulli draw keyed by region id, independent of call order."""
    if rate <= 0.0:
        return False
    h = hashlib.blake2b(f"{seed}:{region_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2**64 < rate


class OfflineModel:
    def __init__(self, omit_rate: float = 0.0, seed: int = 0, always_fail: Iterable[str] = ()):
        self.omit_rate = omit_rate
        self.seed = seed
        self.always_fail = frozenset(always_fail)
        self.omitted: list[str] = []

    def __call__(self, req: ChatRequest) -> str | None:
        if req.image_paths:
            return self._extract(req)
        return self._answer(req)

    def _extract(self, req: ChatRequest) -> str:
        ids = [_unlabel(m) for m in _LISTED_RE.findall(req.user)][: len(req.image_paths)]
        is_table = req.system == TABLE_SYSTEM
        kind = RegionKind.TABLE if is_table else RegionKind.FIGURE
        batch = [Region(rid, "", 1, kind, (0, 0, 1, 1), p) for rid, p in zip(ids, req.image_paths)]
        answers = {}
        for r in batch:
            if r.id in self.always_fail:
                continue
            if len(batch) > 1 and omitted(r.id, self.seed, self.omit_rate):
                self.omitted.append(r.id)
                continue
            side = sidecar_path(r.image_path)
            if not side.exists():
                continue
            data = json.loads(side.read_text())
            if is_table:
                answers[r.id] = (data["summary"], data["json"])
            else:
                answers[r.id] = NON_DATA_SENTINEL if data.get("non_data") else data["summary"]
        return render_table_reply(batch, answers) if is_table else render_image_reply(batch, answers)

    def _answer(self, req: ChatRequest) -> str:
        if NO_CONTEXT in req.user:
            return DEFERRAL
        m = _CONTEXT_RE.search(req.user)
        return m.group(1).strip() if m else DEFERRAL


def offline_gateway(rules_path: str | Path | None = None, omit_rate: float = 0.0, seed: int = 0,
                    always_fail: Iterable[str] = ()) -> ScriptedGateway:
    rules: list[Rule] = []
    if rules_path is not None:
        rules = ScriptedGateway.from_jsonl(rules_path).rules
    model = OfflineModel(omit_rate, seed, always_fail)
    gw = ScriptedGateway(rules, handler=model)
    gw.model = model
    return gw
