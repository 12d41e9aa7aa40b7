"""MNARz: missingness that depends only on the latent class.

Each row's mask over the MNAR variables is a product of Bernoulli(rho_k) draws
given class k, so the mask enters the mixture as one extra factor per component.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

import numpy as np

from . import em_mar, gauss, sruw
from .core import (CovForm, GmmParams, MaskedDataset, MnarzParams, ModelSpec, SruwParams,
                   VariablePartition, validate_partition)
from .em_mar import EmConfig
from .sruw import SelectionCache, SelectionConfig

RHO_CLIP = em_mar.RHO_CLIP


@dataclass(frozen=True)
class MnarzFit:
    theta: Union[SruwParams, GmmParams]
    mnarz: MnarzParams
    responsibilities: np.ndarray
    loglik_trace: np.ndarray
    part: Optional[VariablePartition] = None
    converged: bool = True

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def clustering(self) -> GmmParams:
        return self.theta.alpha if isinstance(self.theta, SruwParams) else self.theta


def _check_rho(rho):
    rho = np.asarray(rho, dtype=float)
    if ((rho <= 0) | (rho >= 1)).any():
        raise ValueError("RHO_OUT_OF_RANGE: rho must lie strictly inside (0, 1)")
    return rho


def mask_loglik(c, rho: float) -> float:
    """sum_d [c_d ln rho + (1 - c_d) ln(1 - rho)] for one binary mask row."""
    rho = float(_check_rho(rho))
    c = np.asarray(c)
    m = float(c.sum())
    return m * np.log(rho) + (c.size - m) * np.log1p(-rho)


def mnar_counts(data: MaskedDataset, mnar: Optional[Iterable[int]] = None):
    """Per-row missing counts over the MNAR columns and the number of such columns."""
    cols = sorted(range(data.d) if mnar is None else mnar)
    return data.mask[:, cols].sum(axis=1).astype(float), len(cols)


def _global_gmm(theta, part: Optional[VariablePartition]) -> GmmParams:
    if isinstance(theta, SruwParams):
        if part is None:
            raise ValueError("an SRUW parameter set needs its partition")
        return sruw.sruw_to_global_gmm(theta, part)
    return theta


def _log_terms(data: MaskedDataset, gmm: GmmParams, mnarz: MnarzParams) -> np.ndarray:
    em_mar._check_dim(data, gmm)
    logp = em_mar._log_joint(em_mar._Patterns(data), gmm)
    rho = _check_rho(mnarz.rho)
    if rho.shape != (gmm.K,):
        raise ValueError("need one rho per component")
    counts, n_mnar = mnar_counts(data, mnarz.mnar)
    return logp + em_mar._mask_logterm(counts, n_mnar, rho)


def observed_loglik_mnarz(data: MaskedDataset, theta, mnarz: MnarzParams,
                          part: Optional[VariablePartition] = None) -> float:
    """sum_n ln sum_k pi_k f_k(y_n^o) prod_d rho_k^c_nd (1 - rho_k)^(1 - c_nd) over the MNAR columns."""
    mnarz.check(data.d)
    if mnarz.mar:
        raise ValueError("observed_loglik_mnarz needs every variable in the MNAR set")
    return float(gauss.log_sum_exp_rows(_log_terms(data, _global_gmm(theta, part), mnarz)).sum())


def responsibilities_mnarz(data: MaskedDataset, theta, mnarz: MnarzParams,
                           part: Optional[VariablePartition] = None) -> np.ndarray:
    return em_mar._normalize(_log_terms(data, _global_gmm(theta, part), mnarz))[0]


# --------------------------------------------------------------------------
# augmented data


@dataclass(frozen=True)
class AugmentedData:
    """Values with their missing cells plus the mask as D fully observed binary columns."""

    data: MaskedDataset  # N x 2D

    @property
    def d(self) -> int:
        return self.data.d // 2

    @property
    def values(self) -> MaskedDataset:
        return self.data.columns(range(self.d))

    @property
    def indicators(self) -> np.ndarray:
        return self.data.values[:, self.d:]


def augment(data: MaskedDataset) -> AugmentedData:
    vals = np.hstack([data.values, data.mask.astype(float)])
    mask = np.hstack([data.mask, np.zeros_like(data.mask)])
    names = tuple(data.var_names) + tuple(f"c_{v}" for v in data.var_names)
    return AugmentedData(MaskedDataset(vals, mask, names, allow_empty_rows=data.allow_empty_rows))


def augmented_loglik(aug: AugmentedData, theta, rho, part: Optional[VariablePartition] = None) -> float:
    """MAR likelihood of the augmented rows: observed Gaussian marginal times Bernoulli indicators."""
    gmm = _global_gmm(theta, part)
    rho = _check_rho(rho)
    C = aug.indicators
    dens = np.zeros(aug.data.n)
    for k in range(gmm.K):
        g = np.exp(em_mar._component_logpdf(em_mar._Patterns(aug.values), gmm.mu[k], gmm.Sigma[k]))
        bern = np.prod(np.where(C == 1, rho[k], 1.0 - rho[k]), axis=1)
        dens += gmm.pi[k] * g * bern
    return float(np.log(dens).sum())


# --------------------------------------------------------------------------
# mixed MAR / MNARz mechanisms

MarModel = Callable[[MaskedDataset], np.ndarray]


def observed_loglik_mixed(data: MaskedDataset, theta, mnarz: MnarzParams,
                          mar_model: Optional[MarModel] = None,
                          part: Optional[VariablePartition] = None) -> float:
    """Log-likelihood when only the MNAR columns carry the class-dependent mask factor.

    ``mar_model(data)`` returns the N x |MAR| probabilities P(c_nd = 1 | y_n^o) for the
    MAR columns (ascending order); their Bernoulli term does not involve the class and
    is added only when a model is supplied.
    """
    mnarz.check(data.d)
    ll = float(gauss.log_sum_exp_rows(_log_terms(data, _global_gmm(theta, part), mnarz)).sum())
    if mar_model is not None and mnarz.mar:
        cols = sorted(mnarz.mar)
        p = np.asarray(mar_model(data), dtype=float)
        if p.shape != (data.n, len(cols)):
            raise ValueError("mar_model must return an N x |MAR| probability matrix")
        c = data.mask[:, cols]
        ll += float(np.where(c == 1, np.log(p), np.log1p(-p)).sum())
    return ll


# --------------------------------------------------------------------------
# estimation


def q_mask(rho: float, resp_k: np.ndarray, counts: np.ndarray, n_mnar: int) -> float:
    """Mask part of the expected complete log-likelihood for one class."""
    return float(resp_k @ (counts * np.log(rho) + (n_mnar - counts) * np.log1p(-rho)))


def rho_update(resp: np.ndarray, counts: np.ndarray, n_mnar: int) -> np.ndarray:
    return em_mar.rho_update(resp, np.asarray(counts, dtype=float), n_mnar)


def em_fit_mnarz(data: MaskedDataset, K: int, spec: Union[ModelSpec, CovForm, None] = None,
                 cfg: EmConfig = EmConfig(), part: Optional[VariablePartition] = None,
                 mnar: Optional[Iterable[int]] = None,
                 init_params: Optional[GmmParams] = None) -> MnarzFit:
    """EM for the mixture with the class-dependent mask factor.

    Without ``part`` every variable is a clustering variable and ``theta`` is a GmmParams.
    With ``part`` the S block carries the mask factor (counted over all MNAR columns) and
    the regression and independent blocks are fitted as under MAR.
    """
    if isinstance(spec, ModelSpec):
        m = spec.m
    else:
        m = CovForm(spec) if spec is not None else CovForm.FULL_FREE
        spec = ModelSpec(K, m)
    counts, n_mnar = mnar_counts(data, mnar)
    mnar_set = frozenset(range(data.d) if mnar is None else mnar)
    S = frozenset(range(data.d)) if part is None else part.S
    if part is not None:
        validate_partition(part, data.d)
    block = data if part is None else data.columns(S)
    res = em_mar.fit_engine(block, K, m, cfg, counts=counts, n_mnar=n_mnar, init_params=init_params)
    mn = MnarzParams(res.rho, frozenset(range(data.d)) - mnar_set, mnar_set)
    theta = res.params
    if part is not None:
        cache = SelectionCache.for_data(data, cfg)
        cache.cluster._fits[(S, K, m)] = res
        theta = sruw.fit_sruw(data, part, spec, cfg, cache)
    return MnarzFit(theta, mn, res.responsibilities, res.loglik_trace, part, res.converged)


def select_model_mnarz(data: MaskedDataset, Ks: Iterable[int],
                       forms: Iterable[CovForm] = (CovForm.FULL_FREE,), grid=None,
                       sel: SelectionConfig = SelectionConfig(), cfg: EmConfig = EmConfig(),
                       mnar: Optional[Iterable[int]] = None,
                       cache: Optional[SelectionCache] = None):
    """The SRUW selection pipeline with the mask factor on every clustering fit.

    Returns (spec, partition, MnarzFit). With no missing MNAR cell the mask factor is
    constant and the decisions coincide with ``sruw.select_model``.
    """
    counts, n_mnar = mnar_counts(data, mnar)
    cache = cache or SelectionCache.for_data(data, cfg, counts, n_mnar)
    spec, part, theta = sruw.select_model(data, Ks, forms, grid, sel, cfg, cache)
    res = cache.cluster.fit(part.S, spec.K, spec.m)
    mnar_set = frozenset(range(data.d) if mnar is None else mnar)
    rho = res.rho if res.rho is not None else np.full(spec.K, RHO_CLIP)
    mn = MnarzParams(rho, frozenset(range(data.d)) - mnar_set, mnar_set)
    return spec, part, MnarzFit(theta, mn, res.responsibilities, res.loglik_trace, part, res.converged)
