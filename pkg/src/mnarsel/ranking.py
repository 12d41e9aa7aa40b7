"""Variable ranking by how often a coordinate keeps a nonzero mean across the penalty grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import em_mar
from .core import CovForm, GmmParams, MaskedDataset
from .em_mar import EmConfig
from .errors import EmptyComponentError, NotSPDError
from .penalized import (PenaltyGrid, PenaltyWeights, default_grid, fit_penalized, lambda_max,
                        spectral_weights, standardize)

NONZERO = 1e-10


@dataclass(frozen=True)
class RankResult:
    scores: np.ndarray  # O_K(d), one per variable
    order: tuple  # variables by descending score, ties by ascending index
    grid: Optional[PenaltyGrid] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=int)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "order", tuple(int(j) for j in self.order))


def order_from_scores(scores) -> tuple:
    scores = np.asarray(scores)
    # stable sort on the negated score keeps ascending index within ties
    return tuple(int(j) for j in np.argsort(-scores, kind="stable"))


def imputed_standardized(data: MaskedDataset) -> MaskedDataset:
    """Standardize with observed-cell statistics, then put missing cells at the centre (zero)."""
    std, _, _ = standardize(data)
    return MaskedDataset.complete(std.filled(0.0), data.var_names)


@dataclass(frozen=True)
class RankingSetup:
    data: MaskedDataset  # standardized, complete
    init: GmmParams
    P: PenaltyWeights
    grid: PenaltyGrid


def prepare(data: MaskedDataset, K: int, cfg: EmConfig = EmConfig(),
            grid: Optional[PenaltyGrid] = None, P: Optional[PenaltyWeights] = None) -> RankingSetup:
    """Standardize/impute, fit the unpenalized start, and derive spectral weights and the grid."""
    std = imputed_standardized(data)
    f0 = em_mar.fit(std, K, CovForm.FULL_FREE, cfg)
    if P is None:
        P = spectral_weights(f0.params.Psi)
    if grid is None:
        grid = default_grid(lambda_max(std, f0.params, f0.responsibilities))
    return RankingSetup(std, f0.params, P, grid)


def rank_variables(data: MaskedDataset, K: int, grid: Optional[PenaltyGrid] = None,
                   P: Optional[PenaltyWeights] = None, cfg: EmConfig = EmConfig(),
                   setup: Optional[RankingSetup] = None) -> RankResult:
    """Score each variable by the number of (lambda, rho) grid points where some mean is nonzero.

    Each rho runs one warm-started path over increasing lambda. A path whose fit
    degenerates stops there and its remaining grid points count as fully shrunk.
    """
    if setup is None:
        setup = prepare(data, K, cfg, grid, P)
    scores = np.zeros(setup.data.d, dtype=int)
    for rho in setup.grid.rhos:
        params = setup.init
        for lam in setup.grid.lambdas:
            try:
                res = fit_penalized(setup.data, K, lam, rho, setup.P, cfg, init_params=params)
            except (EmptyComponentError, NotSPDError):
                # a component collapsed under heavy shrinkage; larger lambdas score nothing
                break
            params = res.params
            scores += (np.abs(params.mu) > NONZERO).any(axis=0)
    return RankResult(scores, order_from_scores(scores), setup.grid)
