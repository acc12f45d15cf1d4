"""Evaluation metrics shared by the head trainer and the harness."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve in Mann-Whitney form; ties count one half.

    Computed from average ranks, which equals counting, over all
    positive/negative pairs, 1 for a correctly ordered pair and 0.5 for a tie.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError("preds and targets differ in length")
    if p.size == 0:
        raise ValueError("MAE of an empty sequence")
    return math.fsum(np.abs(p - t).tolist()) / p.size
