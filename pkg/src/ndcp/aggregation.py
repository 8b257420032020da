"""Combining per-source prediction intervals into one interval.

``combine`` takes the median of the lower bounds and the median of the
upper bounds (even counts average the two central order statistics;
infinite bounds sort to the extremes and are never silently dropped).
``ndcp_predict`` queries each fitted source independently -- only the
feature vector and the significance level reach a source, and only an
interval comes back. ``ideal_shrink`` is the post-hoc evaluation oracle
that rescales all intervals symmetrically to the target coverage once the
true labels are known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conformal import PredictionInterval, predict_interval


@dataclass(frozen=True)
class CombinedInterval:
    """Aggregated interval plus the per-source intervals it came from.

    ``per_source`` is kept for diagnostics and tests only; it never leaves
    the aggregating process.
    """

    interval: PredictionInterval
    source_count: int
    per_source: tuple[PredictionInterval, ...]


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2 == 1:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def combine(intervals: Sequence[PredictionInterval]) -> PredictionInterval:
    """Median of lowers and median of uppers over intervals sharing one
    significance level."""
    if not intervals:
        raise ValueError("cannot combine an empty list of intervals")
    eps = intervals[0].significance
    if any(iv.significance != eps for iv in intervals):
        raise ValueError("all intervals must share the same significance level")
    lower = _median([iv.lower for iv in intervals])
    upper = _median([iv.upper for iv in intervals])
    return PredictionInterval(lower, upper, eps)


def ndcp_predict(sources: Sequence, x, epsilon: float) -> CombinedInterval:
    """Query every fitted source for ``x`` and combine the intervals.

    Sources are consulted independently; a failing source raises (callers
    wanting partial results use the networked aggregator's quorum mode).
    """
    if not sources:
        raise ValueError("need at least one source")
    per_source = tuple(predict_interval(model, x, epsilon) for model in sources)
    return CombinedInterval(
        interval=combine(per_source),
        source_count=len(sources),
        per_source=per_source,
    )


def _covering_factor(mid: float, width: float, y: float) -> float:
    """Smallest representable factor c with mid - c*width/2 <= y <= mid +
    c*width/2. Starts from 2|y - mid| / width and nudges up by ulps until
    the reconstructed bound actually covers, so rank-based shrinking keeps
    its coverage promise despite rounding."""
    if width == 0.0:
        return 0.0 if y == mid else math.inf
    c = 2.0 * abs(y - mid) / width
    for _ in range(64):
        half = c * width / 2.0
        if mid - half <= y <= mid + half:
            return c
        c = math.nextafter(c, math.inf)
    return c * (1.0 + 1e-12)


def critical_factors(
    intervals: Sequence[PredictionInterval], truths: Sequence[float]
) -> np.ndarray:
    """Per-example smallest symmetric scale that keeps the truth covered:
    2|y - mid| / width, with 0 for covered point intervals and +inf for
    missed point intervals."""
    out = np.empty(len(intervals))
    for i, (iv, y) in enumerate(zip(intervals, truths)):
        mid = (iv.lower + iv.upper) / 2.0
        out[i] = _covering_factor(mid, iv.width, y)
    return out


def ideal_shrink(
    intervals: Sequence[PredictionInterval],
    truths: Sequence[float],
    epsilon: float,
) -> tuple[float, list[PredictionInterval]]:
    """Shrink all intervals about their midpoints by one common factor c,
    the smallest that keeps empirical coverage at or above
    ceil((1 - epsilon) * n) / n.

    c is the ceil((1 - epsilon) * n)-th smallest critical factor, clamped
    to at most 1 (these are evaluation intervals; widening is out of
    scope, so under-covering inputs come back unchanged with c = 1).
    """
    n = len(intervals)
    if n == 0 or n != len(truths):
        raise ValueError("need equally many intervals and truths, at least one")
    for iv in intervals:
        if not (math.isfinite(iv.lower) and math.isfinite(iv.upper)):
            raise ValueError("ideal shrink requires finite intervals")
    factors = critical_factors(intervals, truths)
    rank = math.ceil((1.0 - epsilon) * n - 1e-9)
    rank = max(rank, 1)
    c = float(np.sort(factors)[rank - 1])
    c = min(c, 1.0)
    shrunk = []
    for iv in intervals:
        mid = (iv.lower + iv.upper) / 2.0
        half = c * iv.width / 2.0
        shrunk.append(PredictionInterval(mid - half, mid + half, epsilon))
    return c, shrunk
