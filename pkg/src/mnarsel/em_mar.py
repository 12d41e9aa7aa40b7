"""EM for Gaussian mixtures on masked data (missing coordinates integrated out), and BIC scores.

The same engine fits the MNARz clustering block: pass per-row missing counts and
it adds the class-dependent Bernoulli mask factor to every component density.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from . import gauss
from .core import CovForm, GmmParams, MaskedDataset, RegForm, project_form
from .errors import DegenerateFitError, EmptyComponentError, NotSPDError, RankDeficientError

log = logging.getLogger(__name__)

EMPTY_MASS = 1e-10
RHO_CLIP = 1e-6


class Init(str, enum.Enum):
    KMEANS_LIKE = "KMEANS_LIKE"
    RANDOM_RESP = "RANDOM_RESP"


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    n_starts: int = 5
    seed: int = 0
    init: Init = Init.KMEANS_LIKE

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        object.__setattr__(self, "init", Init(self.init))


@dataclass(frozen=True)
class FitResult:
    params: GmmParams
    loglik_trace: np.ndarray
    responsibilities: np.ndarray
    converged: bool
    n_iter: int
    rho: Optional[np.ndarray] = None  # per-class MNARz mask probabilities, if fitted
    regularized: bool = field(default=False, compare=False)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# --------------------------------------------------------------------------
# missingness patterns


def eigen_floor(data: MaskedDataset) -> float:
    """Smallest covariance eigenvalue EM may produce: COND_FLOOR times the block's data scale."""
    X = data.filled(data.column_means())
    top = np.linalg.eigvalsh(np.atleast_2d(np.cov(X.T, bias=True)))[-1] if data.n > 1 else 0.0
    return gauss.COND_FLOOR * (top if top > 0 else 1.0)


class _Patterns:
    """Rows grouped by identical mask, stored group-contiguously for the compiled pass."""

    def __init__(self, data: MaskedDataset):
        self.n, self.d = data.n, data.d
        self.Y = np.ascontiguousarray(data.filled(0.0))
        keys, inv = np.unique(data.mask, axis=0, return_inverse=True)
        self.group = np.asarray(inv).ravel()
        self.G = keys.shape[0]
        self.obs = np.ascontiguousarray(keys == 0)
        self.rows = np.argsort(self.group, kind="stable")
        self.ptr = np.concatenate([[0], np.cumsum(np.bincount(self.group, minlength=self.G))])
        self.complete = self.G == 1 and self.obs.all()
        self.floor = eigen_floor(data)

    def group_weights(self, w: np.ndarray) -> np.ndarray:
        return np.bincount(self.group, weights=w, minlength=self.G)


@njit(cache=True)
def _pattern_pass(Y, obs, ptr, rows, mu, Sigma, moments):
    """Per-row observed-block log-density; optionally conditional means and per-group covariances."""
    n, d = Y.shape
    G = obs.shape[0]
    logpdf = np.zeros(n)
    Yhat = Y.copy()
    covs = np.zeros((G, d, d))
    log2pi = np.log(2.0 * np.pi)
    for g in range(G):
        o = np.empty(d, dtype=np.int64)
        m = np.empty(d, dtype=np.int64)
        no = 0
        nm = 0
        for j in range(d):
            if obs[g, j]:
                o[no] = j
                no += 1
            else:
                m[nm] = j
                nm += 1
        o = o[:no]
        m = m[:nm]
        if no == 0:
            # nothing observed: density 1, moments are the component's own
            if moments:
                for t in range(ptr[g], ptr[g + 1]):
                    r = rows[t]
                    for j in range(d):
                        Yhat[r, j] = mu[j]
                for a in range(d):
                    for b in range(d):
                        covs[g, a, b] = Sigma[a, b]
            continue
        Soo = np.empty((no, no))
        for a in range(no):
            for b in range(no):
                Soo[a, b] = Sigma[o[a], o[b]]
        L = np.linalg.cholesky(Soo)
        half_logdet = 0.0
        for a in range(no):
            half_logdet += np.log(L[a, a])
        A = np.empty((no, nm))
        if moments and nm > 0:
            Som = np.empty((no, nm))
            for a in range(no):
                for b in range(nm):
                    Som[a, b] = Sigma[o[a], m[b]]
            A = np.linalg.solve(Soo, Som)
            for a in range(nm):
                for b in range(nm):
                    acc = Sigma[m[a], m[b]]
                    for c in range(no):
                        acc -= Som[c, a] * A[c, b]
                    covs[g, m[a], m[b]] = acc
        diff = np.empty(no)
        z = np.empty(no)
        for t in range(ptr[g], ptr[g + 1]):
            r = rows[t]
            for a in range(no):
                diff[a] = Y[r, o[a]] - mu[o[a]]
            q = 0.0
            for a in range(no):
                acc = diff[a]
                for b in range(a):
                    acc -= L[a, b] * z[b]
                z[a] = acc / L[a, a]
                q += z[a] * z[a]
            logpdf[r] = -0.5 * q - half_logdet - 0.5 * no * log2pi
            if moments:
                for b in range(nm):
                    acc = mu[m[b]]
                    for a in range(no):
                        acc += diff[a] * A[a, b]
                    Yhat[r, m[b]] = acc
    return logpdf, Yhat, covs


def _component_pass(pat: _Patterns, mu: np.ndarray, Sigma: np.ndarray, moments: bool = True):
    try:
        return _pattern_pass(pat.Y, pat.obs, pat.ptr, pat.rows, np.ascontiguousarray(mu, dtype=float),
                             np.ascontiguousarray(Sigma, dtype=float), moments)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("observed covariance block is not positive definite") from exc


def _component_logpdf(pat: _Patterns, mu: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    return _component_pass(pat, mu, Sigma, moments=False)[0]


def _log_joint(pat: _Patterns, params: GmmParams) -> np.ndarray:
    """N x K matrix of ln pi_k + ln f_k(y_n^o)."""
    cols = [np.log(params.pi[k]) + _component_logpdf(pat, params.mu[k], params.Sigma[k])
            for k in range(params.K)]
    return np.column_stack(cols)


def _mask_logterm(counts: np.ndarray, n_mnar: int, rho: np.ndarray) -> np.ndarray:
    return counts[:, None] * np.log(rho)[None, :] + (n_mnar - counts)[:, None] * np.log1p(-rho)[None, :]


def rho_update(resp: np.ndarray, counts: np.ndarray, n_mnar: int) -> np.ndarray:
    """Closed-form maximiser of the Bernoulli mask term, clipped away from 0 and 1."""
    mass = resp.sum(axis=0)
    return np.clip(resp.T @ counts / (n_mnar * mass), RHO_CLIP, 1 - RHO_CLIP)


def _normalize(logp: np.ndarray):
    lse = gauss.log_sum_exp_rows(logp)
    resp = np.exp(logp - lse[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, float(lse.sum())


def _check_dim(data: MaskedDataset, params: GmmParams):
    if params.d != data.d:
        raise ValueError(f"parameter dimension {params.d} differs from data dimension {data.d}")


def observed_loglik(data: MaskedDataset, params: GmmParams) -> float:
    """Sum over rows of ln sum_k pi_k N(y_n^o | mu_k,o, Sigma_k,oo)."""
    _check_dim(data, params)
    return _normalize(_log_joint(_Patterns(data), params))[1]


def e_step(data: MaskedDataset, params: GmmParams) -> np.ndarray:
    """Posterior class probabilities t_nk computed from the observed coordinates only."""
    _check_dim(data, params)
    return _normalize(_log_joint(_Patterns(data), params))[0]


def impute(data: MaskedDataset, params: GmmParams, resp: Optional[np.ndarray] = None) -> np.ndarray:
    """E[y_m | y_o] under the mixture: per-component conditional means weighted by t_nk.

    ``resp`` overrides the MAR posteriors (e.g. those including a mask factor).
    """
    _check_dim(data, params)
    pat = _Patterns(data)
    passes = [_component_pass(pat, params.mu[k], params.Sigma[k]) for k in range(params.K)]
    if resp is None:
        logp = np.log(params.pi)[None, :] + np.column_stack([p[0] for p in passes])
        resp = _normalize(logp)[0]
    return sum(resp[:, [k]] * passes[k][1] for k in range(params.K))


# --------------------------------------------------------------------------
# M-step


def _moments_from_pass(pat: _Patterns, w: np.ndarray, Yhat: np.ndarray, covs: np.ndarray):
    mass = w.sum()
    new_mu = w @ Yhat / mass
    R = Yhat - new_mu
    S = (R * w[:, None]).T @ R + np.tensordot(pat.group_weights(w), covs, axes=1)
    return mass, new_mu, S / mass


def _weighted_moments(pat: _Patterns, w: np.ndarray, mu: np.ndarray, Sigma: np.ndarray):
    """Expected first/second moments of one component given weights w and current (mu, Sigma).

    Returns (mass, mean, covariance) with missing coordinates replaced by conditional
    means and the conditional covariance added to the scatter.
    """
    _, Yhat, covs = _component_pass(pat, mu, Sigma)
    return _moments_from_pass(pat, w, Yhat, covs)


def _finish_cov(S: np.ndarray, m: CovForm, floor: float):
    """Project onto the form, then lift eigenvalues below ``floor`` up to it.

    The floor is fixed for a whole fit, so clipping is the exact maximiser of the
    expected log-likelihood over the floored set and the EM trace stays monotone.
    """
    S = 0.5 * (S + S.T)
    if m is CovForm.DIAG_FREE:
        ev = np.diag(S)
        if ev.min() >= floor:
            return np.diag(ev), False
        return np.diag(np.maximum(ev, floor)), True
    ev, V = np.linalg.eigh(S)
    if ev[0] >= floor:
        return S, False
    S = (V * np.maximum(ev, floor)) @ V.T
    return 0.5 * (S + S.T), True


def _m_step(pat: _Patterns, resp: np.ndarray, passes, m: CovForm):
    """M-step from per-component (Yhat, covs) computed under the previous parameters."""
    N = pat.n
    mass = resp.sum(axis=0)
    empty = np.flatnonzero(mass < EMPTY_MASS * N)
    if empty.size:
        raise EmptyComponentError(f"component {int(empty[0])} has mass {mass[empty[0]]:.3g}")
    mus, Sigmas, reg = [], [], False
    for k in range(resp.shape[1]):
        _, mu, S = _moments_from_pass(pat, resp[:, k], passes[k][1], passes[k][2])
        S, changed = _finish_cov(S, m, pat.floor)
        reg |= changed
        mus.append(mu)
        Sigmas.append(S)
    return GmmParams.from_covariances(mass / N, np.array(mus), np.array(Sigmas)), reg


def m_step(data: MaskedDataset, resp: np.ndarray, params_prev: GmmParams, m: CovForm) -> GmmParams:
    """One M-step from responsibilities, integrating missing cells under ``params_prev``."""
    resp = np.asarray(resp, dtype=float)
    if resp.shape != (data.n, params_prev.K):
        raise ValueError("responsibility matrix has the wrong shape")
    if not np.allclose(resp.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("responsibility rows must sum to 1")
    pat = _Patterns(data)
    passes = [_component_pass(pat, params_prev.mu[k], params_prev.Sigma[k]) for k in range(params_prev.K)]
    return _m_step(pat, resp, passes, CovForm(m))[0]


# --------------------------------------------------------------------------
# initialisation


def _kmeans_labels(X: np.ndarray, K: int, rng: np.random.Generator, n_iter: int = 10) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        tot = d2.sum()
        idx = rng.integers(n) if tot <= 0 else rng.choice(n, p=d2 / tot)
        centers.append(X[idx])
    C = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for k in range(K):
            if (labels == k).any():
                C[k] = X[labels == k].mean(axis=0)
    return labels


def _params_from_resp(X: np.ndarray, resp: np.ndarray, m: CovForm, floor: float) -> GmmParams:
    """Complete-data M-step on a filled matrix; thin components borrow the global covariance."""
    n, d = X.shape
    mass = resp.sum(axis=0)
    if (mass < EMPTY_MASS * n).any() or (mass <= 0).any():
        raise EmptyComponentError("initial partition leaves a component empty")
    glob = np.atleast_2d(np.cov(X.T, bias=True)) if n > 1 else np.eye(d)
    mus, Sigmas = [], []
    for k in range(resp.shape[1]):
        w = resp[:, k]
        mu = w @ X / mass[k]
        R = X - mu
        S = (R * w[:, None]).T @ R / mass[k]
        if mass[k] <= d:
            S = glob.copy()
        S, _ = _finish_cov(S, m, floor)
        mus.append(mu)
        Sigmas.append(S)
    return GmmParams.from_covariances(mass / n, np.array(mus), np.array(Sigmas))


def _initial_params(data: MaskedDataset, K: int, m: CovForm, init: Init, rng) -> GmmParams:
    X = data.filled(data.column_means())
    if K == 1:
        resp = np.ones((data.n, 1))
    elif init is Init.KMEANS_LIKE:
        labels = _kmeans_labels(X, K, rng)
        resp = np.eye(K)[labels]
    else:
        resp = rng.dirichlet(np.ones(K), size=data.n)
    return _params_from_resp(X, resp, m, eigen_floor(data))


# --------------------------------------------------------------------------
# the EM loop


def _run_em(pat: _Patterns, params: GmmParams, m: CovForm, cfg: EmConfig,
            counts: Optional[np.ndarray] = None, n_mnar: int = 0,
            rho: Optional[np.ndarray] = None) -> FitResult:
    mnar = counts is not None and n_mnar > 0
    if mnar and rho is None:
        rate = counts.sum() / (counts.size * n_mnar)
        rho = np.full(params.K, np.clip(rate, RHO_CLIP, 1 - RHO_CLIP))
    trace, converged, reg_any = [], False, False
    resp = None
    for it in range(cfg.max_iter):
        passes = [_component_pass(pat, params.mu[k], params.Sigma[k]) for k in range(params.K)]
        logp = np.log(params.pi)[None, :] + np.column_stack([p[0] for p in passes])
        if mnar:
            logp = logp + _mask_logterm(counts, n_mnar, rho)
        resp, ll = _normalize(logp)
        trace.append(ll)
        if not np.isfinite(ll):
            raise NotSPDError("log-likelihood is not finite")
        if it > 0 and abs(trace[-1] - trace[-2]) < cfg.tol * abs(trace[-2]):
            converged = True
            break
        if it == cfg.max_iter - 1:
            break
        new_params, reg = _m_step(pat, resp, passes, m)
        if reg and not reg_any:
            log.info("covariance floor engaged during EM")
        reg_any |= reg
        if mnar:
            rho = rho_update(resp, counts, n_mnar)
        params = new_params
    return FitResult(params, np.array(trace), resp, converged, len(trace),
                     rho if mnar else None, reg_any)


def fit_engine(data: MaskedDataset, K: int, m: CovForm, cfg: EmConfig,
               counts: Optional[np.ndarray] = None, n_mnar: int = 0,
               init_params: Optional[GmmParams] = None,
               init_rho: Optional[np.ndarray] = None) -> FitResult:
    """Multi-start EM; optional MNARz mask counts add the per-class Bernoulli factor."""
    if K < 1:
        raise ValueError("K must be >= 1")
    m = CovForm(m)
    pat = _Patterns(data)
    if counts is not None:
        counts = np.asarray(counts, dtype=float)
    if init_params is not None:
        return _run_em(pat, init_params, m, cfg, counts, n_mnar, init_rho)
    n_starts = 1 if K == 1 else cfg.n_starts
    best, failures = None, []
    for i in range(n_starts):
        rng = np.random.default_rng([cfg.seed, i])
        try:
            p0 = _initial_params(data, K, m, cfg.init, rng)
            res = _run_em(pat, p0, m, cfg, counts, n_mnar, init_rho)
        except (EmptyComponentError, NotSPDError) as exc:
            failures.append(exc)
            continue
        if best is None or res.loglik > best.loglik:
            best = res
    if best is None:
        raise DegenerateFitError(f"all {n_starts} starts degenerate; last: {failures[-1]}")
    return best


def fit(data: MaskedDataset, K: int, m: CovForm = CovForm.FULL_FREE, cfg: EmConfig = EmConfig(),
        init_params: Optional[GmmParams] = None) -> FitResult:
    """Maximum-likelihood mixture fit under MAR; best of ``cfg.n_starts`` runs."""
    return fit_engine(data, K, m, cfg, init_params=init_params)


# --------------------------------------------------------------------------
# parameter counts and BIC


def form_df(form: RegForm, dim: int) -> int:
    form = RegForm(form)
    if dim == 0:
        return 0
    if form is RegForm.LI:
        return 1
    if form is RegForm.LB:
        return dim
    return dim * (dim + 1) // 2


def clust_df(K: int, s: int, m: CovForm) -> int:
    cov = s if CovForm(m) is CovForm.DIAG_FREE else s * (s + 1) // 2
    return (K - 1) + K * s + K * cov


def reg_df(n_r: int, n_u: int, r: RegForm) -> int:
    return n_u + n_r * n_u + form_df(r, n_u)


def indep_df(n_w: int, l: RegForm) -> int:
    return n_w + form_df(l, n_w)


def bic(loglik: float, df: int, n: int) -> float:
    return 2.0 * loglik - df * np.log(n)


def bic_clust(data_S: MaskedDataset, K: int, m: CovForm = CovForm.FULL_FREE,
              cfg: EmConfig = EmConfig()) -> float:
    """2 * max loglik - nu * ln N for a K-component mixture on the given columns."""
    res = fit(data_S, K, m, cfg)
    return bic(res.loglik, clust_df(K, data_S.d, m), data_S.n)


# --------------------------------------------------------------------------
# regression and independent blocks


@dataclass(frozen=True)
class RegressionFit:
    a: np.ndarray
    beta: np.ndarray  # |R| x |U|
    Omega: np.ndarray
    loglik: float  # conditional log-likelihood of U given R
    r: RegForm = RegForm.LC


@dataclass(frozen=True)
class IndependentFit:
    gamma: np.ndarray
    Gamma: np.ndarray
    loglik: float
    l: RegForm = RegForm.LB


def _floor(M: np.ndarray, ref: Optional[np.ndarray] = None) -> np.ndarray:
    """Condition floor; a residual covariance is clipped against its target's own scale.

    Clipping at COND_FLOOR times the target's top eigenvalue matches the clustering
    M-step, so a redundant variable scores the same in either block.
    """
    if ref is None:
        return gauss.regularize(M)[0]
    M = 0.5 * (M + M.T)
    top = np.linalg.eigvalsh(ref)[-1]
    if not top > 0:
        return gauss.regularize(M)[0]
    ev, V = np.linalg.eigh(M)
    if ev[0] >= gauss.COND_FLOOR * top:
        return M
    M = (V * np.maximum(ev, gauss.COND_FLOOR * top)) @ V.T
    return 0.5 * (M + M.T)


def _design_check(X: np.ndarray):
    Z = np.column_stack([np.ones(X.shape[0]), X])
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RankDeficientError("regressor design matrix is column-rank deficient")


def _gauss_loglik_complete(R: np.ndarray, Omega: np.ndarray) -> float:
    return float(gauss.log_mvn_pdf_rows(R, np.zeros(R.shape[1]), Omega, check=False).sum())


def _ols_complete(X: np.ndarray, Y: np.ndarray, r: RegForm) -> RegressionFit:
    n = Y.shape[0]
    Z = np.column_stack([np.ones(n), X])
    coef, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    res = Y - Z @ coef
    Yc = Y - Y.mean(axis=0)
    Omega = _floor(project_form(res.T @ res / n, r), Yc.T @ Yc / n)
    return RegressionFit(coef[0], coef[1:], Omega, _gauss_loglik_complete(res, Omega), r)


def _joint_em(Z: np.ndarray, mask: np.ndarray, nx: int, r: RegForm,
              max_iter: int = 500, tol: float = 1e-10):
    """Gaussian EM for (x, u) with u = a + x beta + e, e ~ N(0, Omega of form r).

    x gets an unrestricted Gaussian law. Returns (mu_x, Sxx, a, beta, Omega).
    """
    n, p = Z.shape
    pat = _Patterns(MaskedDataset(np.where(mask, np.nan, Z), mask, allow_empty_rows=True))
    xi, ui = np.arange(nx), np.arange(nx, p)
    obs = mask == 0
    mu = np.array([Z[obs[:, j], j].mean() if obs[:, j].any() else 0.0 for j in range(p)])
    var = np.array([Z[obs[:, j], j].var() if obs[:, j].sum() > 1 else 1.0 for j in range(p)])
    Sigma = np.diag(np.where(var > 0, var, 1.0))
    ones = np.ones(n)
    prev = -np.inf
    for _ in range(max_iter):
        # E-step: expected sufficient statistics of the joint
        _, mu_hat, S_hat = _weighted_moments(pat, ones, mu, Sigma)
        E_zz = S_hat + np.outer(mu_hat, mu_hat)  # E[z z'] / n
        mu_x, Sxx = mu_hat[xi], S_hat[np.ix_(xi, xi)]
        # regression on the expected design [1, x]
        G = np.empty((nx + 1, nx + 1))
        G[0, 0] = 1.0
        G[0, 1:] = G[1:, 0] = mu_hat[xi]
        G[1:, 1:] = E_zz[np.ix_(xi, xi)]
        H = np.vstack([mu_hat[ui][None, :], E_zz[np.ix_(xi, ui)]])
        try:
            coef = np.linalg.solve(G, H)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError("expected regressor design is singular") from exc
        a, beta = coef[0], coef[1:]
        Omega = E_zz[np.ix_(ui, ui)] - H.T @ coef
        Omega = _floor(project_form(Omega, r), S_hat[np.ix_(ui, ui)])
        Sxx = _floor(Sxx) if nx else Sxx
        # back to the joint parameterisation
        mu = np.concatenate([mu_x, a + mu_x @ beta])
        SxxB = Sxx @ beta
        Sigma = np.block([[Sxx, SxxB], [SxxB.T, Omega + beta.T @ SxxB]])
        ll = _normalize(_log_joint(pat, GmmParams.from_covariances([1.0], mu[None], Sigma[None])))[1]
        if abs(ll - prev) < tol * abs(ll):
            break
        prev = ll
    return mu_x, Sxx, a, beta, Omega, pat, mu, Sigma


def fit_regression(data_U: MaskedDataset, data_R: Optional[MaskedDataset], r: RegForm = RegForm.LC,
                   cc_threshold: float = 0.0) -> RegressionFit:
    """Gaussian linear regression of the U block on the R block (R may be empty).

    Complete data (or missingness at most ``cc_threshold``, using complete cases) is
    solved in closed form; otherwise EM on the joint law integrates the missing cells
    and the reported log-likelihood is that of U given R on observed coordinates.
    """
    r = RegForm(r)
    nr = 0 if data_R is None else data_R.d
    if nr == 0 and r is not RegForm.LC:
        ind = fit_independent(data_U, r, cc_threshold)
        return RegressionFit(ind.gamma, np.zeros((0, data_U.d)), ind.Gamma, ind.loglik, r)
    if nr:
        vals = np.hstack([data_R.values, data_U.values])
        mask = np.hstack([data_R.mask, data_U.mask])
    else:
        vals, mask = data_U.values, data_U.mask
    miss_rate = mask.mean()
    if miss_rate <= cc_threshold:
        keep = ~mask.any(axis=1)
        X, Y = vals[keep, :nr], vals[keep, nr:]
        if nr:
            _design_check(X)
        return _ols_complete(X, Y, r)
    Z = np.where(mask == 1, 0.0, vals)
    if nr:
        cc = ~mask[:, :nr].any(axis=1)
        if cc.sum() > nr:
            _design_check(Z[cc, :nr])
    mu_x, Sxx, a, beta, Omega, pat, mu, Sigma = _joint_em(Z, mask, nr, r)
    # conditional log-likelihood: joint observed minus regressor-observed
    ll_joint = _normalize(_log_joint(pat, GmmParams.from_covariances([1.0], mu[None], Sigma[None])))[1]
    ll_x = 0.0
    if nr:
        pat_x = _Patterns(MaskedDataset(np.where(mask[:, :nr], np.nan, Z[:, :nr]), mask[:, :nr],
                                        allow_empty_rows=True))
        ll_x = _normalize(_log_joint(pat_x, GmmParams.from_covariances([1.0], mu_x[None], Sxx[None])))[1]
    return RegressionFit(a, beta, Omega, ll_joint - ll_x, r)


def fit_independent(data_W: MaskedDataset, l: RegForm = RegForm.LB,
                    cc_threshold: float = 0.0) -> IndependentFit:
    """Gaussian fit of a block with covariance form ``l``; missing cells are integrated out."""
    l = RegForm(l)
    obs = data_W.observed
    Y = data_W.filled(0.0)
    if l is RegForm.LC:
        if data_W.mask.mean() <= cc_threshold:
            keep = obs.all(axis=1)
            if not keep.any():
                raise RankDeficientError("no complete rows in block")
            return IndependentFit(*_indep_complete(Y[keep], l), l=l)
        _, _, a, _, Omega, *_ = _joint_em(Y, data_W.mask, 0, l)
        ll = observed_loglik(data_W, GmmParams.from_covariances([1.0], a[None], Omega[None]))
        return IndependentFit(a, Omega, ll, l)
    cnt = obs.sum(axis=0)
    if (cnt == 0).any():
        raise RankDeficientError("a column has no observed cell")
    gamma = (Y * obs).sum(axis=0) / cnt
    sq = ((Y - gamma) ** 2 * obs).sum(axis=0)
    if l is RegForm.LB:
        var = sq / cnt
    else:
        var = np.full(data_W.d, sq.sum() / cnt.sum())
    Gamma = _floor(np.diag(var))
    var = np.diag(Gamma)
    ll = float((-0.5 * cnt * (gauss.LOG_2PI + np.log(var)) - 0.5 * sq / var).sum())
    return IndependentFit(gamma, Gamma, ll, l)


def _indep_complete(Y: np.ndarray, l: RegForm):
    gamma = Y.mean(axis=0)
    R = Y - gamma
    Gamma = _floor(project_form(R.T @ R / Y.shape[0], l))
    return gamma, Gamma, _gauss_loglik_complete(R, Gamma)


def bic_reg(data_U: MaskedDataset, data_R: Optional[MaskedDataset], r: RegForm = RegForm.LC,
            cc_threshold: float = 0.0) -> float:
    fitted = fit_regression(data_U, data_R, r, cc_threshold)
    nr = 0 if data_R is None else data_R.d
    return bic(fitted.loglik, reg_df(nr, data_U.d, r), data_U.n)


def bic_indep(data_W: MaskedDataset, l: RegForm = RegForm.LB, cc_threshold: float = 0.0) -> float:
    fitted = fit_independent(data_W, l, cc_threshold)
    return bic(fitted.loglik, indep_df(data_W.d, l), data_W.n)
