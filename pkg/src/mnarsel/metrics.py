"""Clustering and imputation quality measures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import comb

from .errors import MnarselError


class MetricError(MnarselError, ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    ari: float
    nrmse: float = float("nan")
    wnrmse: float = float("nan")
    ciie: Optional[float] = None
    correct_K: bool = False
    correct_S: bool = False

    def __post_init__(self):
        if self.ari > 1 + 1e-12:
            raise ValueError("ari cannot exceed 1")
        if self.nrmse < 0:
            raise ValueError("nrmse cannot be negative")


def _pairs(x) -> float:
    return float(comb(x, 2, exact=False).sum())


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the contingency table; 0 when the adjustment vanishes.

    The value can be negative when agreement is below chance.
    """
    a, b = np.asarray(labels_a).ravel(), np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise MetricError(f"{a.size} vs {b.size} labels", code="LENGTH_MISMATCH")
    if a.size < 2:
        raise ValueError("ari needs at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    index = _pairs(table)
    sa, sb = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    expected = sa * sb / _pairs(np.array([a.size]))
    denom = 0.5 * (sa + sb) - expected
    if denom == 0:
        return 0.0
    return float((index - expected) / denom)


def nrmse(truth, imputed, sigma: Optional[float] = None) -> float:
    """RMSE over masked cells divided by sigma (default: sd of the true masked values)."""
    t, p = np.asarray(truth, dtype=float).ravel(), np.asarray(imputed, dtype=float).ravel()
    if t.size != p.size:
        raise MetricError(f"{t.size} vs {p.size} values", code="LENGTH_MISMATCH")
    if t.size == 0:
        raise MetricError("no masked cells", code="EMPTY")
    sigma = float(t.std()) if sigma is None else float(sigma)
    if not sigma > 0:
        raise MetricError("normalizer is zero", code="ZERO_SIGMA")
    return float(np.sqrt(np.mean((t - p) ** 2)) / sigma)


def wnrmse(per_group: Sequence[float], weights: Sequence[float]) -> float:
    v, w = np.asarray(per_group, dtype=float), np.asarray(weights, dtype=float)
    if v.shape != w.shape:
        raise MetricError("one weight per group", code="LENGTH_MISMATCH")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if w.sum() == 0:
        raise MetricError("weights sum to zero", code="ZERO_WEIGHT_SUM")
    return float(v @ w / w.sum())


def grouped_nrmse(truth: np.ndarray, imputed: np.ndarray, mask: np.ndarray, groups,
                  by: str = "cluster") -> float:
    """WNRMSE over groups weighted by their missing-cell counts.

    ``by="cluster"`` groups rows by ``groups`` (true labels); ``by="variable"`` groups columns.
    Groups with no masked cell, or with constant true values at their masked cells, are skipped.
    """
    mask = np.asarray(mask, dtype=bool)
    if by == "cluster":
        g = np.asarray(groups)
        sel = [(g == c)[:, None] & mask for c in np.unique(g)]
    elif by == "variable":
        sel = [np.zeros_like(mask) for _ in range(mask.shape[1])]
        for j, s in enumerate(sel):
            s[:, j] = mask[:, j]
    else:
        raise ValueError("by must be 'cluster' or 'variable'")
    vals, wts = [], []
    for s in sel:
        if s.sum() == 0 or truth[s].std() == 0:
            continue
        vals.append(nrmse(truth[s], imputed[s]))
        wts.append(float(s.sum()))
    if not wts:
        raise MetricError("no group has usable masked cells", code="ZERO_WEIGHT_SUM")
    return wnrmse(vals, wts)


def ciie(nrmse_value: float, similarity: float, alpha: float = 0.5, beta: float = 0.5) -> float:
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1) > 1e-12:
        raise MetricError("alpha, beta must be non-negative and sum to 1", code="BAD_WEIGHTS")
    return float(np.clip(alpha * (1 - nrmse_value) + beta * similarity, 0.0, 1.0))


def selection_accuracy(chosen: Tuple[int, Iterable[int]], truth: Tuple[int, Iterable[int]]):
    (K, S), (K0, S0) = chosen, truth
    return K == K0, frozenset(S) == frozenset(S0)
