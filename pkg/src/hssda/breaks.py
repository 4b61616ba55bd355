"""Jenks natural breaks (Fisher's exact 1-D optimal partition).

The sorted values are split into ``k`` contiguous groups minimizing the
total within-group sum of squared deviations. Equal values are never split
across groups, so every reported break is strictly greater than the
previous one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_POOL = 20_000
MIN_POOL = 6
MEASURES = ("cls", "obj", "iou")


class TooFewValues(ValueError):
    """Raised when a pool has fewer distinct values than requested classes."""


@dataclass(frozen=True)
class ScorePool:
    values: tuple
    class_id: int
    measure: str

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ValueError(f"unknown measure {self.measure!r}")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size and (np.any(vals < 0.0) or np.any(vals > 1.0)):
            raise ValueError("pool values must lie in [0, 1]")


@dataclass
class BreakResult:
    breaks: np.ndarray       # k - 1 ascending break values
    labels: np.ndarray       # group index per input value, in input order
    objective: float         # total within-group sum of squared deviations


def _group_sse(counts, sums, sumsq, start, stop):
    """SSE of unique-value slots [start, stop) from prefix sums."""
    n = counts[stop] - counts[start]
    s = sums[stop] - sums[start]
    return (sumsq[stop] - sumsq[start]) - s * s / n


def jenks_breaks(values: Sequence[float], k: int) -> BreakResult:
    """Optimal partition of ``values`` into ``k`` contiguous groups.

    Break ``i`` is the smallest value of group ``i + 1``, so a value passes a
    break when it is greater than or equal to it.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    x = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    uniq, inverse, cnt = np.unique(x, return_inverse=True, return_counts=True)
    m = uniq.size
    if m < k:
        raise TooFewValues(f"{m} distinct values cannot form {k} groups")

    counts = np.concatenate([[0], np.cumsum(cnt)]).astype(np.float64)
    sums = np.concatenate([[0.0], np.cumsum(uniq * cnt)])
    sumsq = np.concatenate([[0.0], np.cumsum(uniq * uniq * cnt)])

    # cost[j, i]: best SSE of the first i unique slots split into j+1 groups
    cost = np.full((k, m + 1), np.inf)
    back = np.zeros((k, m + 1), dtype=np.int64)
    idx = np.arange(m + 1)
    cost[0, 1:] = _group_sse(counts, sums, sumsq, 0, idx[1:])
    for j in range(1, k):
        for i in range(j + 1, m + 1):
            starts = idx[j:i]
            cand = cost[j - 1, starts] + _group_sse(counts, sums, sumsq, starts, i)
            best = int(np.argmin(cand))
            cost[j, i] = cand[best]
            back[j, i] = starts[best]

    cuts = []
    i = m
    for j in range(k - 1, 0, -1):
        i = back[j, i]
        cuts.append(i)
    cuts = np.array(cuts[::-1], dtype=np.int64)

    slot_group = np.searchsorted(cuts, np.arange(m), side="right")
    return BreakResult(breaks=uniq[cuts], labels=slot_group[inverse],
                       objective=float(max(cost[k - 1, m], 0.0)))


def fallback_thresholds(values) -> tuple[float, float]:
    vals = np.asarray(values, dtype=np.float64)
    high = float(vals.max()) if vals.size else 0.0
    if high <= 0.0:
        # nothing scored above zero: only a perfect score could pass high
        return 0.5, 1.0
    return high / 2.0, high


def dual_threshold(pool, rng: np.random.Generator | None = None,
                   max_size: int = MAX_POOL) -> tuple[float, float]:
    """(low, high) thresholds of a score pool via 3-class natural breaks.

    Pools that are too small or have fewer than three distinct values use
    ``fallback_thresholds``. Pools above ``max_size`` are subsampled without
    replacement using ``rng`` (seed 0 when not given).
    """
    values = pool.values if isinstance(pool, ScorePool) else pool
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size < MIN_POOL or np.unique(vals).size < 3:
        return fallback_thresholds(vals)
    if vals.size > max_size:
        rng = rng if rng is not None else np.random.default_rng(0)
        vals = rng.choice(vals, size=max_size, replace=False)
        if np.unique(vals).size < 3:
            return fallback_thresholds(vals)
    low, high = jenks_breaks(vals, 3).breaks
    return float(low), float(high)
