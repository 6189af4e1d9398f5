"""Reference implementations written independently of the package code paths.

Nothing here imports from finrag's algorithms; these are the slow, obvious
versions the tests compare against.
"""

from __future__ import annotations

import math
from typing import Sequence


def dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def percentile_linear(values: Sequence[float], q: float) -> float:
    """Inclusive linear-interpolation percentile, computed by hand."""
    xs = sorted(values)
    if len(xs) == 1:
        return xs[0]
    rank = q / 100.0 * (len(xs) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(xs) - 1)
    frac = rank - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def brute_breakpoints(vectors: Sequence[Sequence[float]], q: float = 95.0, min_distances: int = 4) -> set[int]:
    """Split after sentence j (1-based) when 1 - cos(j, j+1) is strictly above the percentile."""
    d = [1.0 - dot(vectors[i], vectors[i + 1]) for i in range(len(vectors) - 1)]
    if len(d) < min_distances:
        return set()
    thr = percentile_linear(d, q)
    return {j + 1 for j, x in enumerate(d) if x > thr}


def ceil_div(n: int, b: int) -> int:
    return -(-n // b)


def flat_scan(vectors, ids, query) -> list[tuple[float, str]]:
    """All (similarity, id) pairs sorted best first, ties by id."""
    sims = [(dot(v, query), i) for v, i in zip(vectors, ids)]
    return sorted(sims, key=lambda t: (-t[0], t[1]))


def tier_predicate(vectors, query, theta: float, n: int) -> str:
    hits = sum(1 for v in vectors if dot(v, query) >= theta)
    return "TextOnly" if hits >= n else "Fallback"
