"""Data model shared by every stage: masked data, role partitions, parameter containers."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, NotSPDError, PartitionError

MISSING = np.nan


class CovForm(str, enum.Enum):
    """Covariance form of the clustering block."""

    DIAG_FREE = "DIAG_FREE"
    FULL_FREE = "FULL_FREE"


class RegForm(str, enum.Enum):
    """Covariance form of the regression (Omega) and independent (Gamma) blocks."""

    LI = "LI"  # scalar * identity
    LB = "LB"  # diagonal
    LC = "LC"  # full


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MaskedDataset:
    """N x D values with an explicit missingness mask (1 = missing).

    Missing cells hold NaN; code must always go through ``mask`` before reading.
    Blocks extracted with :meth:`columns` may contain rows with nothing observed.
    """

    values: np.ndarray
    mask: np.ndarray
    var_names: tuple = ()
    allow_empty_rows: bool = field(default=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise DataError("values must be a 2-d array", code="RAGGED")
        mask = np.asarray(self.mask)
        if mask.shape != values.shape:
            raise DataError("mask shape differs from values", code="RAGGED")
        if not np.isin(mask, (0, 1)).all():
            raise DataError("mask entries must be 0 or 1", code="PARSE")
        mask = mask.astype(np.int8)
        n, d = values.shape
        if n < 1 or d < 1:
            raise DataError("need at least one row and one column", code="EMPTY")
        obs = mask == 0
        if not np.isfinite(values[obs]).all():
            raise DataError("observed cells must be finite", code="PARSE")
        if not self.allow_empty_rows and not obs.any(axis=1).all():
            row = int(np.flatnonzero(~obs.any(axis=1))[0])
            raise DataError(f"row {row} has no observed value", code="ALL_MISSING_ROW")
        values[~obs] = MISSING
        values.setflags(write=False)
        mask.setflags(write=False)
        names = tuple(self.var_names) if len(self.var_names) else tuple(f"y{j + 1}" for j in range(d))
        if len(names) != d:
            raise DataError("var_names length differs from column count", code="RAGGED")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "var_names", names)

    @classmethod
    def complete(cls, values, var_names=()) -> "MaskedDataset":
        values = np.asarray(values, dtype=float)
        return cls(values, np.zeros(values.shape, dtype=np.int8), var_names)

    @classmethod
    def from_nan(cls, values, var_names=(), allow_empty_rows=False) -> "MaskedDataset":
        values = np.asarray(values, dtype=float)
        return cls(values, np.isnan(values).astype(np.int8), var_names, allow_empty_rows)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.mask == 0

    @property
    def missing_rate(self) -> float:
        return float(self.mask.mean())

    def filled(self, fill=0.0) -> np.ndarray:
        """Values with missing cells replaced by ``fill`` (scalar or per-column vector)."""
        fill = np.broadcast_to(np.asarray(fill, dtype=float), (self.d,))
        return np.where(self.observed, np.nan_to_num(self.values), fill[None, :])

    def column_means(self) -> np.ndarray:
        obs = self.observed
        cnt = obs.sum(axis=0)
        tot = np.where(obs, np.nan_to_num(self.values), 0.0).sum(axis=0)
        return np.divide(tot, cnt, out=np.zeros(self.d), where=cnt > 0)

    def columns(self, idx: Iterable[int]) -> "MaskedDataset":
        idx = sorted(int(j) for j in idx)
        return MaskedDataset(
            self.values[:, idx],
            self.mask[:, idx],
            tuple(self.var_names[j] for j in idx),
            allow_empty_rows=True,
        )

    def rows(self, idx) -> "MaskedDataset":
        return MaskedDataset(self.values[idx], self.mask[idx], self.var_names, self.allow_empty_rows)


@dataclass(frozen=True)
class VariablePartition:
    """Role assignment: S clustering, R regressors (subset of S), U redundant, W independent."""

    S: frozenset
    R: frozenset = frozenset()
    U: frozenset = frozenset()
    W: frozenset = frozenset()

    def __post_init__(self):
        for name in ("S", "R", "U", "W"):
            object.__setattr__(self, name, frozenset(int(j) for j in getattr(self, name)))

    @classmethod
    def all_clustering(cls, D: int) -> "VariablePartition":
        return cls(frozenset(range(D)))

    def sorted(self, name: str) -> list:
        return sorted(getattr(self, name))


def validate_partition(part: VariablePartition, D: int) -> bool:
    """Return True when ``part`` is a legal role partition of ``range(D)``; raise otherwise."""
    S, R, U, W = part.S, part.R, part.U, part.W
    if not R <= S:
        raise PartitionError("R must be a subset of S", code="R_NOT_IN_S")
    if S & U or S & W or U & W:
        raise PartitionError("S, U, W must be pairwise disjoint", code="OVERLAP")
    if (S | U | W) != frozenset(range(D)):
        raise PartitionError(f"S, U, W must cover exactly 0..{D - 1}", code="INCOMPLETE")
    if not S:
        raise PartitionError("S must be nonempty", code="EMPTY_S")
    if not U and R:
        raise PartitionError("R must be empty when U is empty", code="U_EMPTY_R_NONEMPTY")
    return True


@dataclass(frozen=True)
class ModelSpec:
    K: int
    m: CovForm = CovForm.FULL_FREE
    r: RegForm = RegForm.LC
    l: RegForm = RegForm.LB

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "m", CovForm(self.m))
        object.__setattr__(self, "r", RegForm(self.r))
        object.__setattr__(self, "l", RegForm(self.l))
        if self.l not in (RegForm.LI, RegForm.LB):
            raise ValueError("l must be LI or LB")


def cholesky_inverse(Sigma: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    P = Linv.T @ Linv
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class GmmParams:
    """K-component Gaussian mixture: proportions, means, covariances and their inverses."""

    pi: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        pi, mu, Sigma, Psi = (_frozen(x) for x in (self.pi, self.mu, self.Sigma, self.Psi))
        K = pi.shape[0]
        if mu.ndim != 2 or mu.shape[0] != K or Sigma.shape != (K, mu.shape[1], mu.shape[1]):
            raise ValueError("inconsistent GMM parameter shapes")
        if Psi.shape != Sigma.shape:
            raise ValueError("Psi shape differs from Sigma")
        if (pi <= 0).any() or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("mixing proportions must be positive and sum to 1")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "Psi", Psi)

    @classmethod
    def from_covariances(cls, pi, mu, Sigma) -> "GmmParams":
        pi = np.asarray(pi, dtype=float)
        pi = pi / pi.sum()
        Sigma = np.asarray(Sigma, dtype=float)
        Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
        Psi = np.stack([cholesky_inverse(S) for S in Sigma])
        return cls(pi, np.asarray(mu, dtype=float), Sigma, Psi)

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def permuted(self, order: Sequence[int]) -> "GmmParams":
        order = list(order)
        return GmmParams(self.pi[order], self.mu[order], self.Sigma[order], self.Psi[order])


def project_form(M: np.ndarray, form: RegForm) -> np.ndarray:
    """Closest matrix of the given structural form (the constrained Gaussian MLE update)."""
    form = RegForm(form)
    M = 0.5 * (M + M.T)
    if form is RegForm.LC:
        return M
    if form is RegForm.LB:
        return np.diag(np.diag(M))
    return np.eye(M.shape[0]) * (np.trace(M) / M.shape[0])


def conforms(M: np.ndarray, form: RegForm, atol=1e-12) -> bool:
    return bool(np.allclose(M, project_form(M, form), atol=atol, rtol=0))


@dataclass(frozen=True)
class SruwParams:
    """Clustering GMM on S plus the regression (U on R) and independent (W) blocks."""

    alpha: GmmParams
    a: np.ndarray
    beta: np.ndarray
    Omega: np.ndarray
    gamma: np.ndarray
    Gamma: np.ndarray
    r: RegForm = RegForm.LC
    l: RegForm = RegForm.LB

    def __post_init__(self):
        for name in ("a", "gamma"):
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name))))
        nu, nw = self.a.shape[0], self.gamma.shape[0]
        beta = _frozen(np.asarray(self.beta, dtype=float).reshape(-1, nu) if nu else np.zeros((0, 0)))
        Omega = _frozen(np.asarray(self.Omega, dtype=float).reshape(nu, nu))
        Gamma = _frozen(np.asarray(self.Gamma, dtype=float).reshape(nw, nw))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "Omega", Omega)
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "r", RegForm(self.r))
        object.__setattr__(self, "l", RegForm(self.l))

    def check(self, part: VariablePartition) -> None:
        """Raise ValueError if block dimensions or forms disagree with ``part``."""
        if self.alpha.d != len(part.S):
            raise ValueError("DIMENSION_MISMATCH: alpha dimension differs from |S|")
        if self.a.shape[0] != len(part.U) or self.Omega.shape != (len(part.U),) * 2:
            raise ValueError("DIMENSION_MISMATCH: regression block differs from |U|")
        if len(part.U) and self.beta.shape != (len(part.R), len(part.U)):
            raise ValueError("DIMENSION_MISMATCH: beta must be |R| x |U|")
        if self.gamma.shape[0] != len(part.W) or self.Gamma.shape != (len(part.W),) * 2:
            raise ValueError("DIMENSION_MISMATCH: independent block differs from |W|")
        for M, form in ((self.Omega, self.r), (self.Gamma, self.l)):
            if M.size and not conforms(M, form, atol=1e-10):
                raise ValueError(f"matrix does not respect form {form.value}")


@dataclass(frozen=True)
class MnarzParams:
    """Per-class missingness probabilities and the MAR / MNAR variable split."""

    rho: np.ndarray
    mar: frozenset = frozenset()
    mnar: frozenset = frozenset()

    def __post_init__(self):
        rho = _frozen(np.atleast_1d(self.rho))
        if ((rho <= 0) | (rho >= 1)).any():
            raise ValueError("RHO_OUT_OF_RANGE: rho must lie strictly inside (0, 1)")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mar", frozenset(int(j) for j in self.mar))
        object.__setattr__(self, "mnar", frozenset(int(j) for j in self.mnar))
        if self.mar & self.mnar:
            raise ValueError("MAR and MNAR variable sets overlap")

    @classmethod
    def all_mnar(cls, rho, D: int) -> "MnarzParams":
        return cls(rho, frozenset(), frozenset(range(D)))

    def check(self, D: int) -> None:
        if (self.mar | self.mnar) != frozenset(range(D)):
            raise ValueError("MAR and MNAR sets must cover all variables")


def load_csv(path, na_token: str = "NA") -> MaskedDataset:
    """Read a header-first CSV; cells equal to ``na_token`` become missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError("file is empty", code="EMPTY")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError("no data rows", code="EMPTY")
    D = len(header)
    values = np.empty((len(body), D))
    mask = np.zeros((len(body), D), dtype=np.int8)
    for i, row in enumerate(body):
        if len(row) != D:
            raise DataError(f"line {i + 2} has {len(row)} fields, expected {D}", code="RAGGED")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == na_token:
                mask[i, j] = 1
                values[i, j] = MISSING
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"line {i + 2}, column {j + 1}: {cell!r}", code="PARSE") from None
            if not np.isfinite(values[i, j]):
                raise DataError(f"line {i + 2}, column {j + 1}: non-finite value", code="PARSE")
    return MaskedDataset(values, mask, tuple(h.strip() for h in header))


def save_csv(data: MaskedDataset, path, na_token: str = "NA") -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.var_names)
        for vals, miss in zip(data.values, data.mask):
            w.writerow([na_token if c else f"{v:.17g}" for v, c in zip(vals, miss)])
    return path
