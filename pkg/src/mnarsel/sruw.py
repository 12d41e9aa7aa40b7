"""Role selection (S, R, U, W), SRUW fitting, the combined BIC and the global-GMM embedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import em_mar, gauss, ranking
from .core import (CovForm, GmmParams, MaskedDataset, ModelSpec, RegForm, SruwParams,
                   VariablePartition, validate_partition)
from .em_mar import EmConfig, FitResult
from .errors import MnarselError, RankDeficientError, SelectionError
from .penalized import PenaltyGrid

log = logging.getLogger(__name__)

REG_FORMS = (RegForm.LI, RegForm.LB, RegForm.LC)
INDEP_FORMS = (RegForm.LI, RegForm.LB)


@dataclass(frozen=True)
class SelectionConfig:
    c: int = 3
    reg_entry_threshold: float = 0.0

    def __post_init__(self):
        if int(self.c) < 1:
            raise ValueError("c must be >= 1")


# --------------------------------------------------------------------------
# cached block scores


class ClusterScorer:
    """Clustering-block fits and BICs memoised on (S, K, m).

    With ``counts`` (per-row missing counts over the MNAR columns) every fit carries
    the MNARz mask factor and the parameter count gains one rho per class.
    """

    def __init__(self, data: MaskedDataset, cfg: EmConfig = EmConfig(),
                 counts: Optional[np.ndarray] = None, n_mnar: int = 0):
        self.data = data
        self.cfg = cfg
        mnar = counts is not None and n_mnar > 0 and np.asarray(counts).any()
        self.counts = np.asarray(counts, dtype=float) if mnar else None
        self.n_mnar = int(n_mnar) if mnar else 0
        self._fits: dict = {}

    @property
    def mnar(self) -> bool:
        return self.counts is not None

    def fit(self, S: Iterable[int], K: int, m: CovForm) -> FitResult:
        key = (frozenset(S), int(K), CovForm(m))
        if key not in self._fits:
            block = self.data.columns(key[0])
            self._fits[key] = em_mar.fit_engine(block, key[1], key[2], self.cfg,
                                                counts=self.counts, n_mnar=self.n_mnar)
        return self._fits[key]

    def df(self, s: int, K: int, m: CovForm) -> int:
        return em_mar.clust_df(K, s, m) + (K if self.mnar else 0)

    def bic(self, S: Iterable[int], K: int, m: CovForm) -> float:
        S = frozenset(S)
        return em_mar.bic(self.fit(S, K, m).loglik, self.df(len(S), K, m), self.data.n)


class RegressionScorer:
    """bic_reg / bic_indep memoised on (targets, regressors, form)."""

    def __init__(self, data: MaskedDataset):
        self.data = data
        self._reg: dict = {}
        self._ind: dict = {}

    def reg(self, U: Iterable[int], R: Iterable[int], r: RegForm) -> float:
        key = (frozenset(U), frozenset(R), RegForm(r))
        if key not in self._reg:
            if not key[0]:
                self._reg[key] = 0.0
            else:
                data_R = self.data.columns(key[1]) if key[1] else None
                self._reg[key] = em_mar.bic_reg(self.data.columns(key[0]), data_R, key[2])
        return self._reg[key]

    def indep(self, W: Iterable[int], l: RegForm) -> float:
        key = (frozenset(W), RegForm(l))
        if key not in self._ind:
            self._ind[key] = em_mar.bic_indep(self.data.columns(key[0]), key[1]) if key[0] else 0.0
        return self._ind[key]


@dataclass
class SelectionCache:
    """Shared state for repeated selections on one dataset (e.g. several c values)."""

    cluster: ClusterScorer
    regression: RegressionScorer
    rankings: dict = field(default_factory=dict)

    @classmethod
    def for_data(cls, data: MaskedDataset, cfg: EmConfig = EmConfig(),
                 counts: Optional[np.ndarray] = None, n_mnar: int = 0) -> "SelectionCache":
        return cls(ClusterScorer(data, cfg, counts, n_mnar), RegressionScorer(data))


# --------------------------------------------------------------------------
# scans


def stepwise_regress_R(data: MaskedDataset, target, S: Iterable[int], r: RegForm = RegForm.LC,
                       threshold: float = 0.0,
                       scorer: Optional[RegressionScorer] = None) -> frozenset:
    """Forward stepwise choice of regressors from S for the target variable(s) by BIC."""
    scorer = scorer or RegressionScorer(data)
    U = frozenset([int(target)]) if np.isscalar(target) else frozenset(int(j) for j in target)
    S = sorted(set(int(s) for s in S) - U)
    R: list = []
    current = scorer.reg(U, R, r)
    while True:
        best, best_s = -np.inf, None
        for s in S:
            if s in R:
                continue
            try:
                val = scorer.reg(U, R + [s], r)
            except RankDeficientError:
                continue
            if val > best:  # strict: ties keep the lower index
                best, best_s = val, s
        if best_s is None or not best - current > threshold:
            return frozenset(R)
        R.append(best_s)
        current = best


def bic_diff_relevance(data: MaskedDataset, j: int, S_cur: Iterable[int], K: int,
                       m: CovForm = CovForm.FULL_FREE, r: RegForm = RegForm.LC,
                       cfg: EmConfig = EmConfig(), cache: Optional[SelectionCache] = None,
                       sel: SelectionConfig = SelectionConfig()) -> float:
    """Evidence that j carries clustering information beyond what S_cur explains by regression."""
    cache = cache or SelectionCache.for_data(data, cfg)
    S_cur = frozenset(S_cur)
    if j in S_cur:
        raise ValueError("j already in S_cur")
    cl = cache.cluster
    if not S_cur:
        return cl.bic({j}, K, m) - cl.bic({j}, 1, m)
    R = stepwise_regress_R(data, j, S_cur, r, sel.reg_entry_threshold, cache.regression)
    return cl.bic(S_cur | {j}, K, m) - cl.bic(S_cur, K, m) - cache.regression.reg({j}, R, r)


RelevanceFn = Callable[[int, frozenset], float]


def select_S(data: MaskedDataset, ranked: ranking.RankResult, K: int, m: CovForm = CovForm.FULL_FREE,
             cfg: EmConfig = EmConfig(), sel: SelectionConfig = SelectionConfig(),
             cache: Optional[SelectionCache] = None,
             relevance: Optional[RelevanceFn] = None) -> frozenset:
    """Forward scan in ranked order; stop after c consecutive non-positive BIC differences.

    ``relevance(j, S)`` overrides the BIC difference (used to test the stopping rule).
    """
    if relevance is None:
        cache = cache or SelectionCache.for_data(data, cfg)

        def relevance(j, S):
            return bic_diff_relevance(data, j, S, K, m, RegForm.LC, cfg, cache, sel)

    S: set = set()
    fails = 0
    for j in ranked.order:
        if relevance(j, frozenset(S)) > 0:
            S.add(j)
            fails = 0
        else:
            fails += 1
            if fails >= sel.c:
                break
    if not S:
        raise SelectionError(f"no variable shows clustering evidence at K={K}", code="EMPTY_S")
    return frozenset(S)


def select_W_and_U(data: MaskedDataset, S: Iterable[int], ranked: ranking.RankResult,
                   sel: SelectionConfig = SelectionConfig(), r: RegForm = RegForm.LC,
                   cache: Optional[SelectionCache] = None):
    """Reverse ranked scan of non-S variables: empty stepwise support sends j to W.

    Returns (U, W, R_map) with R_map[j] the regressors chosen for each U member.
    """
    S = frozenset(S)
    scorer = cache.regression if cache is not None else RegressionScorer(data)
    rest = [j for j in reversed(ranked.order) if j not in S]
    W, R_map = set(), {}
    fails = 0
    for j in rest:
        Rj = stepwise_regress_R(data, j, S, r, sel.reg_entry_threshold, scorer)
        if not Rj:
            W.add(j)
            fails = 0
        else:
            R_map[j] = Rj
            fails += 1
            if fails >= sel.c:
                break
    for j in rest:
        if j not in W and j not in R_map:
            R_map[j] = stepwise_regress_R(data, j, S, r, sel.reg_entry_threshold, scorer)
    U = frozenset(R_map)
    return U, frozenset(W), {j: frozenset(v) for j, v in R_map.items()}


def partition_from_scan(S, U, W, R_map) -> VariablePartition:
    R = frozenset().union(*R_map.values()) if R_map else frozenset()
    return VariablePartition(S, R, U, W)


# --------------------------------------------------------------------------
# fitting and scoring a fixed partition


def crit_bic(data: MaskedDataset, part: VariablePartition, spec: ModelSpec, cfg: EmConfig = EmConfig(),
             cache: Optional[SelectionCache] = None) -> float:
    """Clustering + regression + independence BIC for a fixed role partition."""
    validate_partition(part, data.d)
    cache = cache or SelectionCache.for_data(data, cfg)
    return (cache.cluster.bic(part.S, spec.K, spec.m)
            + cache.regression.reg(part.U, part.R, spec.r)
            + cache.regression.indep(part.W, spec.l))


def n_params(part: VariablePartition, spec: ModelSpec, mnar: bool = False) -> int:
    return (em_mar.clust_df(spec.K, len(part.S), spec.m) + (spec.K if mnar else 0)
            + (em_mar.reg_df(len(part.R), len(part.U), spec.r) if part.U else 0)
            + em_mar.indep_df(len(part.W), spec.l))


def fit_sruw(data: MaskedDataset, part: VariablePartition, spec: ModelSpec, cfg: EmConfig = EmConfig(),
             cache: Optional[SelectionCache] = None) -> SruwParams:
    """Maximum-likelihood parameters of each block, fitted separately."""
    validate_partition(part, data.d)
    cache = cache or SelectionCache.for_data(data, cfg)
    alpha = cache.cluster.fit(part.S, spec.K, spec.m).params
    nu, nw = len(part.U), len(part.W)
    a, beta, Omega = np.zeros(0), np.zeros((len(part.R), 0)), np.zeros((0, 0))
    if nu:
        reg = em_mar.fit_regression(data.columns(part.U), data.columns(part.R) if part.R else None, spec.r)
        a, beta, Omega = reg.a, reg.beta.reshape(len(part.R), nu), reg.Omega
    gamma, Gamma = np.zeros(0), np.zeros((0, 0))
    if nw:
        ind = em_mar.fit_independent(data.columns(part.W), spec.l)
        gamma, Gamma = ind.gamma, ind.Gamma
    return SruwParams(alpha, a, beta, Omega, gamma, Gamma, spec.r, spec.l)


def sruw_to_global_gmm(params: SruwParams, part: VariablePartition) -> GmmParams:
    """Single K-component mixture on all variables equivalent to the SRUW block product."""
    params.check(part)
    S, R, U, W = part.sorted("S"), part.sorted("R"), part.sorted("U"), part.sorted("W")
    s, nu = len(S), len(U)
    Lam = np.zeros((s, nu))
    if nu and R:
        pos = [S.index(j) for j in R]
        Lam[pos, :] = params.beta
    order = S + U + W
    D = len(order)
    inv = np.argsort(order)
    alpha = params.alpha
    mus, Sigmas = [], []
    for k in range(alpha.K):
        Sk = alpha.Sigma[k]
        SL = Sk @ Lam
        M = np.zeros((D, D))
        M[:s, :s] = Sk
        M[:s, s:s + nu] = SL
        M[s:s + nu, :s] = SL.T
        M[s:s + nu, s:s + nu] = params.Omega + Lam.T @ SL
        M[s + nu:, s + nu:] = params.Gamma
        mu = np.concatenate([alpha.mu[k], params.a + alpha.mu[k] @ Lam, params.gamma])
        mus.append(mu[inv])
        Sigmas.append(M[np.ix_(inv, inv)])
    return GmmParams.from_covariances(alpha.pi, np.array(mus), np.array(Sigmas))


def sruw_logpdf(Y: np.ndarray, params: SruwParams, part: VariablePartition) -> np.ndarray:
    """Row-wise log of the block-product density on complete rows."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    S, R, U, W = part.sorted("S"), part.sorted("R"), part.sorted("U"), part.sorted("W")
    alpha = params.alpha
    comp = np.column_stack([np.log(alpha.pi[k]) + gauss.log_mvn_pdf_rows(Y[:, S], alpha.mu[k], alpha.Sigma[k])
                            for k in range(alpha.K)])
    out = gauss.log_sum_exp_rows(comp)
    if U:
        mean = params.a + (Y[:, R] @ params.beta if R else 0.0)
        out = out + gauss.log_mvn_pdf_rows(Y[:, U] - mean, np.zeros(len(U)), params.Omega)
    if W:
        out = out + gauss.log_mvn_pdf_rows(Y[:, W], params.gamma, params.Gamma)
    return out


# --------------------------------------------------------------------------
# model selection


@dataclass(frozen=True)
class Candidate:
    spec: ModelSpec
    part: VariablePartition
    crit: float
    n_params: int


def _best(cands: Sequence[Candidate]) -> Candidate:
    # maximise crit; ties go to smaller K, then fewer parameters
    return min(cands, key=lambda c: (-c.crit, c.spec.K, c.n_params))


def scan_partition(data: MaskedDataset, K: int, m: CovForm, sel: SelectionConfig, cfg: EmConfig,
                   cache: SelectionCache, grid: Optional[PenaltyGrid] = None) -> VariablePartition:
    """Rank (once per K, cached), scan S, then split the rest into U and W."""
    if K not in cache.rankings:
        cache.rankings[K] = ranking.rank_variables(data, K, grid, cfg=cfg)
    ranked = cache.rankings[K]
    S = select_S(data, ranked, K, m, cfg, sel, cache)
    U, W, R_map = select_W_and_U(data, S, ranked, sel, RegForm.LC, cache)
    return partition_from_scan(S, U, W, R_map)


def candidates(data: MaskedDataset, Ks: Iterable[int], forms: Iterable[CovForm] = (CovForm.FULL_FREE,),
               grid: Optional[PenaltyGrid] = None, sel: SelectionConfig = SelectionConfig(),
               cfg: EmConfig = EmConfig(), cache: Optional[SelectionCache] = None) -> list:
    cache = cache or SelectionCache.for_data(data, cfg)
    out = []
    for K in Ks:
        for m in forms:
            m = CovForm(m)
            if K == 1:
                parts = [VariablePartition.all_clustering(data.d)]
            else:
                try:
                    parts = [scan_partition(data, K, m, sel, cfg, cache, grid)]
                except SelectionError as exc:
                    log.info("K=%d, m=%s skipped: %s", K, m.value, exc)
                    continue
            for part in parts:
                for r in REG_FORMS if part.U else (RegForm.LC,):
                    for l in INDEP_FORMS if part.W else (RegForm.LB,):
                        spec = ModelSpec(K, m, r, l)
                        try:
                            crit = crit_bic(data, part, spec, cfg, cache)
                        except MnarselError as exc:
                            log.info("candidate %s failed: %s", spec, exc)
                            continue
                        out.append(Candidate(spec, part, crit, n_params(part, spec, cache.cluster.mnar)))
    return out


def select_model(data: MaskedDataset, Ks: Iterable[int], forms: Iterable[CovForm] = (CovForm.FULL_FREE,),
                 grid: Optional[PenaltyGrid] = None, sel: SelectionConfig = SelectionConfig(),
                 cfg: EmConfig = EmConfig(), cache: Optional[SelectionCache] = None):
    """Full pipeline over candidate K and covariance forms; returns (spec, partition, params)."""
    cache = cache or SelectionCache.for_data(data, cfg)
    cands = candidates(data, Ks, forms, grid, sel, cfg, cache)
    if not cands:
        raise SelectionError("no candidate model could be fitted", code="NO_VALID_MODEL")
    best = _best(cands)
    return best.spec, best.part, fit_sruw(data, best.part, best.spec, cfg, cache)
