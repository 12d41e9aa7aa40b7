"""Gaussian density algebra: log-densities, observed-block marginals, conditionals, log-sum-exp."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import MnarselError, NotSPDError

LOG_2PI = np.log(2.0 * np.pi)

# eigenvalue-ratio floor and the diagonal jitter used when it is crossed
COND_FLOOR = 1e-10
JITTER = 1e-8


def regularize(Sigma: np.ndarray) -> tuple[np.ndarray, bool]:
    """Add ``JITTER * trace/d`` to the diagonal when min/max eigenvalue < ``COND_FLOOR``.

    Returns the (possibly) modified matrix and whether the floor engaged.
    """
    Sigma = 0.5 * (Sigma + Sigma.T)
    d = Sigma.shape[0]
    if d == 0:
        return Sigma, False
    ev = np.linalg.eigvalsh(Sigma)
    if ev[-1] > 0 and ev[0] >= COND_FLOOR * ev[-1]:
        return Sigma, False
    scale = np.trace(Sigma) / d
    if not scale > 0:
        scale = 1.0
    # a single shift may not lift a matrix with negative rounding eigenvalues
    shift = JITTER * scale + max(0.0, -ev[0])
    return Sigma + shift * np.eye(d), True


def cholesky(Sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("Cholesky factorization failed") from exc


def _logpdf_chol(Y: np.ndarray, mu: np.ndarray, L: np.ndarray) -> np.ndarray:
    d = L.shape[0]
    if d == 0:
        return np.zeros(Y.shape[0])
    Z = solve_triangular(L, (Y - mu).T, lower=True, check_finite=False)
    half_logdet = np.log(np.diag(L)).sum()
    return -0.5 * (Z * Z).sum(axis=0) - half_logdet - 0.5 * d * LOG_2PI


def log_mvn_pdf_rows(Y: np.ndarray, mu: np.ndarray, Sigma: np.ndarray, check: bool = True) -> np.ndarray:
    """Row-wise ln N(y_n | mu, Sigma) for an (n, d) array."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Sigma = np.asarray(Sigma, dtype=float)
    if check:
        _check_finite_sym(Sigma)
        Sigma, _ = regularize(Sigma)
    return _logpdf_chol(Y, np.asarray(mu, dtype=float), cholesky(Sigma))


def log_mvn_pdf(y, mu, Sigma) -> float:
    """ln N(y | mu, Sigma) via Cholesky; raises NotSPDError if factorization fails."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(log_mvn_pdf_rows(y[None, :], np.atleast_1d(mu), np.atleast_2d(Sigma))[0])


def _check_finite_sym(Sigma):
    if not np.isfinite(Sigma).all():
        raise NotSPDError("covariance has non-finite entries")
    if Sigma.size and not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=1e-12 * np.abs(Sigma).max()):
        raise NotSPDError("covariance is not symmetric")
    if Sigma.size:
        # the floor repairs near-singular matrices, not indefinite ones
        ev = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
        if ev[0] < -1e-12 * max(abs(ev[-1]), 1.0):
            raise NotSPDError("covariance has a negative eigenvalue")


@dataclass(frozen=True)
class BlockIndex:
    """Observed / missing coordinate split of a d-vector; both lists ascending."""

    observed: tuple
    missing: tuple

    def __post_init__(self):
        o = tuple(sorted(int(i) for i in self.observed))
        m = tuple(sorted(int(i) for i in self.missing))
        if set(o) & set(m):
            raise ValueError("observed and missing index sets overlap")
        object.__setattr__(self, "observed", o)
        object.__setattr__(self, "missing", m)

    @classmethod
    def from_mask(cls, mask_row) -> "BlockIndex":
        mask_row = np.asarray(mask_row)
        return cls(tuple(np.flatnonzero(mask_row == 0)), tuple(np.flatnonzero(mask_row != 0)))

    @property
    def d(self) -> int:
        return len(self.observed) + len(self.missing)

    def check(self, d: int) -> None:
        if sorted(self.observed + self.missing) != list(range(d)):
            raise ValueError(f"block index does not partition range({d})")
        if not self.observed:
            raise ValueError("observed index set is empty")


def marginal_block(mu, Sigma, idx: BlockIndex):
    """Mean sub-vector and principal sub-matrix at the observed coordinates."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    idx.check(mu.shape[0])
    o = list(idx.observed)
    return mu[o], Sigma[np.ix_(o, o)]


def conditional_moments(Y_o: np.ndarray, mu: np.ndarray, Sigma: np.ndarray, o, m):
    """Vectorised conditional law of the missing block for many rows sharing one pattern.

    Returns (means of shape (n, |m|), shared conditional covariance |m| x |m|).
    An empty observed set yields the marginal law of the missing block.
    """
    o, m = list(o), list(m)
    if not m:
        return np.zeros((Y_o.shape[0], 0)), np.zeros((0, 0))
    if not o:
        return np.broadcast_to(mu[m], (Y_o.shape[0], len(m))).copy(), Sigma[np.ix_(m, m)].copy()
    L = cholesky(Sigma[np.ix_(o, o)])
    S_om = Sigma[np.ix_(o, m)]
    # A = Sigma_oo^{-1} Sigma_om
    A = solve_triangular(L.T, solve_triangular(L, S_om, lower=True, check_finite=False),
                         lower=False, check_finite=False)
    mean = mu[m] + (Y_o - mu[o]) @ A
    cov = Sigma[np.ix_(m, m)] - S_om.T @ A
    return mean, 0.5 * (cov + cov.T)


def conditional_block(y_o, mu, Sigma, idx: BlockIndex):
    """Law of y_m given y_o: (mu_m + S_mo S_oo^-1 (y_o - mu_o), S_mm - S_mo S_oo^-1 S_om)."""
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    idx.check(mu.shape[0])
    y_o = np.atleast_1d(np.asarray(y_o, dtype=float))
    mean, cov = conditional_moments(y_o[None, :], mu, Sigma, idx.observed, idx.missing)
    return mean[0], cov


def log_sum_exp(xs) -> float:
    """ln sum exp(x_i), shifted by the maximum."""
    xs = np.asarray(xs, dtype=float).ravel()
    if xs.size == 0:
        raise MnarselError("log_sum_exp of an empty vector", code="EMPTY")
    top = xs.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.exp(xs - top).sum()))


def log_sum_exp_rows(A: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-d array."""
    top = A.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (top + np.log(np.exp(A - top).sum(axis=1, keepdims=True)))[:, 0]
