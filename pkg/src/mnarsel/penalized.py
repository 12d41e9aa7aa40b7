"""Penalized mixture estimator: L1-shrunk means and weighted graphical-lasso precisions.

The inner solvers are coordinate descent loops compiled with numba; everything
around them is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from . import em_mar, gauss
from .core import CovForm, GmmParams, MaskedDataset
from .em_mar import EmConfig, FitResult
from .errors import ConvergenceError, DataError, MnarselError

GAMMA_ADJ = 0.01
EPS = 1e-3
MEAN_TOL = 1e-8
MEAN_MAX_SWEEPS = 10_000
GLASSO_TOL = 1e-7
GLASSO_MAX_SWEEPS = 1_000


@dataclass(frozen=True)
class PenaltyGrid:
    lambdas: tuple
    rhos: tuple

    def __post_init__(self):
        for name in ("lambdas", "rhos"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            if any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be positive")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, vals)

    @property
    def size(self) -> int:
        return len(self.lambdas) * len(self.rhos)


@dataclass(frozen=True)
class PenaltyWeights:
    P: np.ndarray  # K x d x d, zero diagonal

    def __post_init__(self):
        P = np.array(self.P, dtype=float, copy=True)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError("P must have shape (K, d, d)")
        if (P < 0).any():
            raise ValueError("penalty weights must be nonnegative")
        if not np.allclose(P, np.swapaxes(P, 1, 2)):
            raise ValueError("penalty weights must be symmetric")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @classmethod
    def uniform(cls, K: int, d: int, value: float = 1.0) -> "PenaltyWeights":
        P = np.full((K, d, d), float(value))
        P[:, np.arange(d), np.arange(d)] = 0.0
        return cls(P)


# --------------------------------------------------------------------------
# spectral weights


def laplacian_spectral_norm(Psi: np.ndarray, gamma_adj: float = GAMMA_ADJ) -> float:
    """Euclidean norm of the eigenvalues of the normalized Laplacian of the partial-correlation graph."""
    dg = np.sqrt(np.diag(Psi))
    pcor = -Psi / np.outer(dg, dg)
    A = (np.abs(pcor) > gamma_adj).astype(float)
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
    L = np.diag((deg > 0).astype(float)) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return float(np.linalg.norm(np.linalg.eigvalsh(L)))


def spectral_weights(Psi0: np.ndarray, gamma_adj: float = GAMMA_ADJ, eps: float = EPS) -> PenaltyWeights:
    """Constant off-diagonal weight 1 / (D_LS(Psi0_k) + eps) per component."""
    if not gamma_adj > 0 or not eps > 0:
        raise ValueError("gamma_adj and eps must be positive")
    Psi0 = np.asarray(Psi0, dtype=float)
    K, d, _ = Psi0.shape
    P = np.empty((K, d, d))
    for k in range(K):
        P[k] = 1.0 / (laplacian_spectral_norm(Psi0[k], gamma_adj) + eps)
        np.fill_diagonal(P[k], 0.0)
    return PenaltyWeights(P)


# --------------------------------------------------------------------------
# data preparation


def standardize(data: MaskedDataset):
    """Centre and scale each column with observed-cell statistics; the mask is unchanged."""
    obs = data.observed
    cnt = obs.sum(axis=0)
    if (cnt < 2).any():
        j = int(np.flatnonzero(cnt < 2)[0])
        raise DataError(f"column {j} has fewer than 2 observed values", code="ZERO_VARIANCE_COLUMN")
    centers = data.column_means()
    dev = np.where(obs, np.nan_to_num(data.values) - centers, 0.0)
    scales = np.sqrt((dev**2).sum(axis=0) / cnt)
    if (scales <= 1e-12 * np.maximum(1.0, np.abs(centers))).any():
        j = int(np.flatnonzero(scales <= 1e-12 * np.maximum(1.0, np.abs(centers)))[0])
        raise DataError(f"column {j} is constant", code="ZERO_VARIANCE_COLUMN")
    vals = np.where(obs, dev / scales, np.nan)
    return MaskedDataset(vals, data.mask, data.var_names, data.allow_empty_rows), centers, scales


# --------------------------------------------------------------------------
# objective


def penalty_value(params: GmmParams, lam: float, rho: float, P: PenaltyWeights) -> float:
    off = np.abs(P.P * params.Psi)
    d = params.d
    off[:, np.arange(d), np.arange(d)] = 0.0
    return float(lam * np.abs(params.mu).sum() + rho * off.sum())


def penalized_objective(data: MaskedDataset, params: GmmParams, lam: float, rho: float,
                        P: PenaltyWeights) -> float:
    """Observed log-likelihood minus the mean L1 and weighted off-diagonal precision L1 terms."""
    return em_mar.observed_loglik(data, params) - penalty_value(params, lam, rho, P)


# --------------------------------------------------------------------------
# M-step kernels


@njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@njit(cache=True)
def _cd_mean(Psi, b0, Nk, lam, mu, tol, max_sweeps):
    d = mu.shape[0]
    for sweep in range(max_sweeps):
        delta = 0.0
        for j in range(d):
            acc = 0.0
            for l in range(d):
                if l != j:
                    acc += Psi[j, l] * mu[l]
            new = _soft(b0[j] - Nk * acc, lam) / (Nk * Psi[j, j])
            ch = abs(new - mu[j])
            if ch > delta:
                delta = ch
            mu[j] = new
        if delta < tol:
            return sweep + 1
    return -1


def mean_update_soft_threshold(stats, lam: float, Psi_k: np.ndarray, mu0: Optional[np.ndarray] = None,
                               tol: float = MEAN_TOL) -> np.ndarray:
    """Coordinate-descent maximiser in mu of -1/2 sum_n t_n (y_n - mu)' Psi (y_n - mu) - lam |mu|_1.

    ``stats`` is (N_k, S1) with N_k = sum_n t_nk and S1 = sum_n t_nk y_n.
    """
    Nk, S1 = stats
    if not Nk > 0:
        raise ValueError("component mass must be positive")
    Psi_k = np.ascontiguousarray(Psi_k, dtype=float)
    b0 = Psi_k @ np.asarray(S1, dtype=float)
    mu = np.zeros(Psi_k.shape[0]) if mu0 is None else np.array(mu0, dtype=float)
    if _cd_mean(Psi_k, b0, float(Nk), float(lam), mu, tol, MEAN_MAX_SWEEPS) < 0:
        raise ConvergenceError("mean coordinate descent did not converge")
    return mu


@njit(cache=True)
def _glasso(S, Lam, W, B, tol, max_sweeps):
    p = S.shape[0]
    idx = np.empty(p - 1, dtype=np.int64)
    W11 = np.empty((p - 1, p - 1))
    for sweep in range(max_sweeps):
        maxdiff = 0.0
        for j in range(p):
            c = 0
            for i in range(p):
                if i != j:
                    idx[c] = i
                    c += 1
            for a in range(p - 1):
                for b in range(p - 1):
                    W11[a, b] = W[idx[a], idx[b]]
            # inner lasso: min 1/2 b'W11 b - s12'b + sum lam_i |b_i|
            for _ in range(10_000):
                dmax = 0.0
                for a in range(p - 1):
                    r = S[idx[a], j]
                    for b in range(p - 1):
                        if b != a:
                            r -= W11[a, b] * B[idx[b], j]
                    new = _soft(r, Lam[idx[a], j]) / W11[a, a]
                    ch = abs(new - B[idx[a], j])
                    if ch > dmax:
                        dmax = ch
                    B[idx[a], j] = new
                if dmax < tol * 1e-3:
                    break
            for a in range(p - 1):
                w = 0.0
                for b in range(p - 1):
                    w += W11[a, b] * B[idx[b], j]
                ch = abs(w - W[idx[a], j])
                if ch > maxdiff:
                    maxdiff = ch
                W[idx[a], j] = w
                W[j, idx[a]] = w
        if maxdiff < tol:
            return sweep + 1
    return -1


def precision_update_weighted_glasso(Sk: np.ndarray, rho: float, P_k: np.ndarray,
                                     Psi_init: Optional[np.ndarray] = None, w: float = 1.0,
                                     tol: float = GLASSO_TOL) -> np.ndarray:
    """Maximise ln det Psi - tr(Sk Psi) - (rho / w) sum_{d != d'} P_dd' |Psi_dd'|.

    Block coordinate descent on the covariance (Friedman et al.), diagonal unpenalized.
    """
    Sk = 0.5 * (np.asarray(Sk, dtype=float) + np.asarray(Sk, dtype=float).T)
    ev = np.linalg.eigvalsh(Sk)
    if not np.isfinite(Sk).all() or ev[0] < -1e-10 * max(abs(ev[-1]), 1.0):
        raise MnarselError("scatter matrix is not positive semi-definite", code="NOT_PSD_INPUT")
    Sk, _ = gauss.regularize(Sk)
    p = Sk.shape[0]
    if p == 1:
        return np.array([[1.0 / Sk[0, 0]]])
    Lam = (rho / w) * np.asarray(P_k, dtype=float)
    np.fill_diagonal(Lam, 0.0)
    W = Sk.copy()
    B = np.zeros((p, p))
    if Psi_init is not None:
        Psi_init = np.asarray(Psi_init, dtype=float)
        B = np.ascontiguousarray(-Psi_init / np.diag(Psi_init)[None, :])
        np.fill_diagonal(B, 0.0)
    if _glasso(Sk, np.ascontiguousarray(Lam), W, B, tol, GLASSO_MAX_SWEEPS) < 0:
        raise ConvergenceError("graphical lasso did not converge")
    # precision from the lasso coefficients keeps their exact zeros
    Theta = np.empty((p, p))
    for j in range(p):
        idx = np.r_[0:j, j + 1:p]
        t22 = 1.0 / (W[j, j] - W[idx, j] @ B[idx, j])
        Theta[j, j] = t22
        Theta[idx, j] = -B[idx, j] * t22
    return 0.5 * (Theta + Theta.T)


# --------------------------------------------------------------------------
# penalized EM


@dataclass(frozen=True)
class PenalizedFit(FitResult):
    objective_trace: Optional[np.ndarray] = None
    lam: float = 0.0
    rho: float = 0.0


def _params_from_precisions(pi, mu, Psi) -> GmmParams:
    Sigma = np.stack([np.linalg.inv(P) for P in Psi])
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
    return GmmParams(pi, mu, Sigma, Psi)


def _penalized_m_step(Y, resp, prev: GmmParams, lam, rho, P, glasso_tol):
    N = Y.shape[0]
    mass = resp.sum(axis=0)
    if (mass < em_mar.EMPTY_MASS * N).any():
        raise em_mar.EmptyComponentError("a component lost all its mass")
    mus, Psis = [], []
    for k in range(resp.shape[1]):
        w = resp[:, k]
        mu = mean_update_soft_threshold((mass[k], w @ Y), lam, prev.Psi[k], prev.mu[k])
        R = Y - mu
        S = (R * w[:, None]).T @ R / mass[k]
        # the objective sums |Psi_dd'| over ordered pairs, hence 2 * rho in the glasso scale
        Psis.append(precision_update_weighted_glasso(S, 2.0 * rho, P.P[k], prev.Psi[k], mass[k], glasso_tol))
        mus.append(mu)
    return _params_from_precisions(mass / N, np.array(mus), np.array(Psis))


def fit_penalized(data: MaskedDataset, K: int, lam: float, rho: float, P: PenaltyWeights,
                  cfg: EmConfig = EmConfig(), init_params: Optional[GmmParams] = None,
                  glasso_tol: float = GLASSO_TOL) -> PenalizedFit:
    """EM for the penalized mixture on complete (standardized or mean-imputed) data.

    Without ``init_params`` the start is the best unpenalized fit from ``em_mar.fit``.
    """
    if data.mask.any():
        raise DataError("penalized fitting expects complete data; impute first", code="MISSING")
    if P.P.shape != (K, data.d, data.d):
        raise ValueError("penalty weights do not match K and the data dimension")
    Y = data.filled(0.0)
    params = init_params if init_params is not None else em_mar.fit(data, K, CovForm.FULL_FREE, cfg).params
    pat = em_mar._Patterns(data)
    obj_trace, ll_trace, converged = [], [], False
    resp = None
    for it in range(cfg.max_iter):
        resp, ll = em_mar._normalize(em_mar._log_joint(pat, params))
        ll_trace.append(ll)
        obj_trace.append(ll - penalty_value(params, lam, rho, P))
        if it > 0 and abs(obj_trace[-1] - obj_trace[-2]) < cfg.tol * abs(obj_trace[-2]):
            converged = True
            break
        if it == cfg.max_iter - 1:
            break
        params = _penalized_m_step(Y, resp, params, lam, rho, P, glasso_tol)
    return PenalizedFit(params, np.array(ll_trace), resp, converged, len(ll_trace),
                        objective_trace=np.array(obj_trace), lam=float(lam), rho=float(rho))


def lambda_max(data: MaskedDataset, params: GmmParams, resp: np.ndarray) -> float:
    """Smallest lambda at which mu = 0 solves every mean update, given the current fit."""
    Y = data.filled(0.0)
    return float(max(np.abs(params.Psi[k] @ (resp[:, k] @ Y)).max() for k in range(params.K)))


def default_grid(lam_max: float, n_lambda: int = 20, lam_min: float = 0.01,
                 rhos=(0.1, 0.3, 1.0)) -> PenaltyGrid:
    lam_max = max(lam_max, lam_min * 10)
    return PenaltyGrid(tuple(np.geomspace(lam_min, lam_max, n_lambda)), tuple(rhos))
