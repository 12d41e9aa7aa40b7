"""Synthetic designs with known roles and labels, and missingness generators."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .core import MaskedDataset, VariablePartition
from .errors import MnarselError

# seed of the repo-fixed Dataset 2 coefficient table
DATASET2_TABLE_SEED = 20_240_617
MAX_MASK_RETRIES = 100


class Design(str, enum.Enum):
    DATASET1 = "DATASET1"
    DATASET2 = "DATASET2"
    MNARZ_APPENDIX = "MNARZ_APPENDIX"


@dataclass(frozen=True)
class SimSpec:
    design: Design
    n: int = 2000
    scenario: int = 8
    sigma_scale: float = 1.0
    seed: int = 0
    D: int = 6  # MNARZ_APPENDIX only

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 1 <= self.scenario <= 8:
            raise MnarselError(f"scenario {self.scenario} outside 1..8", code="BAD_SCENARIO")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")


@dataclass(frozen=True)
class Simulated:
    data: MaskedDataset
    labels: np.ndarray
    truth: Optional[VariablePartition]
    complete: Optional[np.ndarray] = None  # values before masking

    def __iter__(self):
        return iter((self.data, self.labels, self.truth))


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


# --------------------------------------------------------------------------
# Dataset 1

DS1_MEANS = np.array([[0.0, 0.0, 0.0], [-6.0, 6.0, 0.0], [0.0, 0.0, 6.0], [-6.0, 6.0, 6.0]])
DS1_VAR = np.array([6.0 * np.sqrt(2.0), 1.0, 2.0])
DS1_A = np.array([-1.0, 2.0])
# |R| x |U|: y4 = -1 + 0.5 y1 + 2 y2, y5 = 2 + y1
DS1_BETA = np.array([[0.5, 1.0], [2.0, 0.0]])
DS1_OMEGA = rotation(np.pi / 6) @ np.diag([1.0, 3.0]) @ rotation(np.pi / 6).T
DS1_TRUTH = VariablePartition({0, 1, 2}, {0, 1}, {3, 4}, {5, 6})


def gen_dataset1(n: int = 2000, sigma_scale: float = 1.0, seed: int = 0) -> Simulated:
    rng = np.random.default_rng(seed)
    z = rng.integers(4, size=n)
    XS = DS1_MEANS[z] + rng.normal(size=(n, 3)) * np.sqrt(DS1_VAR) * sigma_scale
    eps = rng.multivariate_normal(np.zeros(2), DS1_OMEGA, size=n)
    XU = DS1_A + XS[:, :2] @ DS1_BETA + eps
    XW = rng.normal(size=(n, 2))
    Y = np.hstack([XS, XU, XW])
    return Simulated(MaskedDataset.complete(Y), z, DS1_TRUTH, Y)


# --------------------------------------------------------------------------
# Dataset 2

DS2_MEANS = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 2.0], [4.0, 2.0]])
DS2_D = 14


def dataset2_table(scenario: int):
    """(a, beta 2x12, regressed column indices) for a scenario; Omega is the identity.

    Scenario s in 2..7 regresses columns 3..s+2 with intercept 0; scenario 8 regresses
    columns 3..11 with nonzero intercepts and leaves 12..14 as noise (1-based).
    """
    if not 1 <= scenario <= 8:
        raise MnarselError(f"scenario {scenario} outside 1..8", code="BAD_SCENARIO")
    rng = np.random.default_rng(DATASET2_TABLE_SEED)
    mags = rng.uniform(0.5, 1.5, size=(2, 12))
    signs = rng.choice([-1.0, 1.0], size=(2, 12))
    intercepts = rng.uniform(1.0, 3.0, size=12) * rng.choice([-1.0, 1.0], size=12)
    n_reg = {1: 0, 8: 9}.get(scenario, scenario)
    beta = np.zeros((2, 12))
    beta[:, :n_reg] = mags[:, :n_reg] * signs[:, :n_reg]
    a = np.zeros(12)
    if scenario == 8:
        a[:n_reg] = intercepts[:n_reg]
    return a, beta, tuple(range(2, 2 + n_reg))


def gen_dataset2(n: int = 2000, scenario: int = 8, seed: int = 0) -> Simulated:
    a, beta, reg_cols = dataset2_table(scenario)
    rng = np.random.default_rng(seed)
    z = rng.integers(4, size=n)
    XS = DS2_MEANS[z] + rng.normal(size=(n, 2)) * np.sqrt(0.5)
    rest = a + XS @ beta + rng.normal(size=(n, 12))
    Y = np.hstack([XS, rest])
    U = frozenset(reg_cols)
    truth = VariablePartition({0, 1}, {0, 1} if U else set(), U, set(range(2, DS2_D)) - U)
    return Simulated(MaskedDataset.complete(Y), z, truth, Y)


# --------------------------------------------------------------------------
# appendix MNAR design

APPENDIX_TAU = 2.31
APPENDIX_PI = np.array([0.5, 0.25, 0.25])
APPENDIX_SLOPES = np.array([1.45, 0.2, -3.0, 1.45, 0.2, -3.0])


def appendix_delta(D: int) -> np.ndarray:
    delta = np.zeros((3, D))
    for k in range(3):
        delta[k, k] = delta[k, k + 3] = APPENDIX_TAU
    return delta


def gen_mnarz_appendix(n: int = 100, D: int = 6, seed: int = 0) -> Simulated:
    if D not in (6, 9):
        raise MnarselError(f"D={D} not in {{6, 9}}", code="BAD_D")
    rng = np.random.default_rng(seed)
    z = rng.choice(3, size=n, p=APPENDIX_PI)
    Y = appendix_delta(D)[z] + rng.normal(size=(n, D))
    slopes = np.resize(APPENDIX_SLOPES, D)
    prob = norm.cdf(slopes * Y)
    mask = _draw_mask(prob, rng)
    return Simulated(MaskedDataset(Y, mask), z, None, Y)


# --------------------------------------------------------------------------
# missingness mechanisms


@dataclass(frozen=True)
class MCAR:
    p: float


@dataclass(frozen=True)
class MAR:
    """Logistic in the standardized anchor column, intercept calibrated to ``rate``."""

    rate: float
    anchor: int = 0
    slope: float = 1.0


@dataclass(frozen=True)
class MNARZ:
    rho: tuple  # per-class cell missingness probability

    @classmethod
    def from_rate(cls, rate: float, K: int) -> "MNARZ":
        """Class probabilities spread linearly over [0.5, 1.5] x rate."""
        return cls(tuple(np.linspace(0.5 * rate, 1.5 * rate, K)) if K > 1 else (rate,))


@dataclass(frozen=True)
class MNARY:
    slopes: tuple  # probit slope per variable


Mechanism = Union[MCAR, MAR, MNARZ, MNARY]


def _draw_mask(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = (rng.random(prob.shape) < prob).astype(np.int8)
    for row in np.flatnonzero(mask.all(axis=1)):
        for _ in range(MAX_MASK_RETRIES):
            mask[row] = rng.random(prob.shape[1]) < prob[row]
            if not mask[row].all():
                break
        else:
            raise MnarselError(f"row {row} stays fully missing", code="MASK_RETRY_EXHAUSTED")
    return mask


def _mar_prob(Y: np.ndarray, mech: MAR) -> np.ndarray:
    x = Y[:, mech.anchor]
    x = (x - x.mean()) / (x.std() or 1.0)
    prob = np.zeros_like(Y)
    if mech.rate <= 0:
        return prob
    lin = mech.slope * x
    b = brentq(lambda b0: expit(b0 + lin).mean() - mech.rate, -50.0, 50.0)
    cols = [j for j in range(Y.shape[1]) if j != mech.anchor]
    prob[:, cols] = expit(b + lin)[:, None]
    return prob


def apply_missingness(data: MaskedDataset, labels, mech: Mechanism, seed: int = 0) -> MaskedDataset:
    """Mask a complete dataset under the given mechanism; fully missing rows are redrawn."""
    if data.mask.any():
        raise ValueError("apply_missingness expects complete data")
    Y = data.values
    n, D = Y.shape
    rng = np.random.default_rng(seed)
    if isinstance(mech, MCAR):
        if not 0 <= mech.p < 1:
            raise ValueError("p must lie in [0, 1)")
        prob = np.full((n, D), float(mech.p))
    elif isinstance(mech, MAR):
        if not 0 <= mech.rate < 1:
            raise ValueError("rate must lie in [0, 1)")
        prob = _mar_prob(Y, mech)
    elif isinstance(mech, MNARZ):
        rho = np.asarray(mech.rho, dtype=float)
        labels = np.asarray(labels)
        if ((rho < 0) | (rho >= 1)).any() or labels.max() >= rho.size:
            raise ValueError("need one rho in [0, 1) per class label")
        prob = np.repeat(rho[labels][:, None], D, axis=1)
    elif isinstance(mech, MNARY):
        slopes = np.resize(np.asarray(mech.slopes, dtype=float), D)
        prob = norm.cdf(slopes * Y)
    else:
        raise TypeError(f"unknown mechanism {mech!r}")
    return MaskedDataset(Y, _draw_mask(prob, rng), data.var_names)


def generate(spec: SimSpec) -> Simulated:
    if spec.design is Design.DATASET1:
        return gen_dataset1(spec.n, spec.sigma_scale, spec.seed)
    if spec.design is Design.DATASET2:
        return gen_dataset2(spec.n, spec.scenario, spec.seed)
    return gen_mnarz_appendix(spec.n, spec.D, spec.seed)
