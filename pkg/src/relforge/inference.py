"""Metric-aware decision rules on top of a scorer.

For AUROC only the ranking of scores matters, so the probability of the
positive-class token is used as is.  For MAE the best point prediction is
a median of the predictive distribution, read off by scoring every
candidate value between the train minimum and maximum.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .scorer import Scorer, TokenDistribution, map_bounded

logger = logging.getLogger(__name__)

POSITIVE_TOKEN = "1"


def classification_score(dist: TokenDistribution) -> float:
    """Probability of the exact token ``"1"``; 0 when it is not in the top-k."""
    return dist.get(POSITIVE_TOKEN)


@dataclass(frozen=True)
class CandidateGrid:
    values: tuple[float, ...]
    render: Mapping[float, str]

    def __post_init__(self):
        if not self.values:
            raise ValueError("empty candidate grid")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("candidate values must be strictly increasing")

    def text(self, value: float) -> str:
        return self.render[value]


def _decimals(x: float) -> int:
    r = repr(float(x))
    if "e" in r or "E" in r:
        mant, _, exp = r.lower().partition("e")
        frac = mant.partition(".")[2].rstrip("0")
        return max(len(frac) - int(exp), 0)
    frac = r.partition(".")[2].rstrip("0")
    return len(frac)


def modal_precision(values: Sequence[float]) -> int:
    counts = Counter(_decimals(v) for v in values)
    # ties go to the larger precision
    return max(counts.items(), key=lambda kv: (kv[1], kv[0]))[0]


def build_grid(train_targets: Sequence[float], max_candidates: int = 128) -> CandidateGrid:
    """Candidate values between the train minimum and maximum.

    Integral targets whose span fits in ``max_candidates`` give every
    integer in range; otherwise ``max_candidates`` evenly spaced values,
    rendered with the most common number of decimals in the targets (more
    if needed to keep renderings distinct).
    """
    if len(train_targets) == 0:
        raise ValueError("no train targets")
    if max_candidates < 2:
        raise ValueError("max_candidates must be at least 2")
    arr = np.asarray(train_targets, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        text = str(int(lo)) if lo.is_integer() else repr(lo)
        return CandidateGrid((lo,), {lo: text})
    integral = bool(np.all(arr == np.round(arr)))
    if integral and hi - lo + 1 <= max_candidates:
        values = tuple(float(v) for v in range(int(lo), int(hi) + 1))
        return CandidateGrid(values, {v: str(int(v)) for v in values})
    values = tuple(float(v) for v in np.linspace(lo, hi, max_candidates))
    prec = 0 if integral else modal_precision(arr.tolist())
    # widen the precision until every candidate renders distinctly
    while len({f"{v:.{prec}f}" for v in values}) < len(values) and prec < 15:
        prec += 1
    return CandidateGrid(values, {v: f"{v:.{prec}f}" for v in values})


@dataclass(frozen=True)
class ScoredDistribution:
    values: tuple[float, ...]
    probs: tuple[float, ...]

    @classmethod
    def from_logprobs(cls, values: Sequence[float], logprobs: Sequence[float]) -> "ScoredDistribution":
        lp = np.asarray(logprobs, dtype=np.float64)
        finite = np.isfinite(lp)
        if not finite.any():
            raise FloatingPointError("no candidate has finite log-probability")
        shift = lp[finite].max()
        w = np.where(finite, np.exp(lp - shift), 0.0)
        p = w / w.sum()
        return cls(tuple(values), tuple(float(x) for x in p))

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.values, self.probs))


def lower_median(values: Sequence[float], probs: Sequence[float]) -> float:
    """Smallest value whose cumulative probability reaches half the mass."""
    total = math.fsum(probs)
    acc = 0.0
    for v, p in zip(values, probs):
        acc += p
        if acc >= 0.5 * total:
            return v
    return values[-1]


def median_predict(document: str, grid: CandidateGrid, scorer: Scorer, max_in_flight: int | None = None) -> float:
    """Median of the scorer's distribution over the candidate grid."""
    if len(grid.values) == 1:
        return grid.values[0]
    workers = max_in_flight if max_in_flight is not None else scorer.config.max_in_flight
    outcomes = map_bounded(lambda v: scorer.continuation_logprob(document, grid.text(v)), list(grid.values), workers)
    for o in outcomes:
        if o.error is not None:
            raise o.error
    try:
        dist = ScoredDistribution.from_logprobs(grid.values, [o.value for o in outcomes])
    except FloatingPointError:
        mid = grid.values[(len(grid.values) - 1) // 2]
        logger.warning("all candidate probabilities vanished; predicting grid midpoint %r", mid)
        return mid
    return lower_median(dist.values, dist.probs)
