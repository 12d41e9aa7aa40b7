import numpy as np
import pytest

from mnarsel.core import GmmParams


def random_spd(rng, d, floor=0.3):
    A = rng.normal(size=(d, d))
    return A @ A.T / d + floor * np.eye(d)


def random_gmm(rng, K, d, spread=3.0):
    pi = rng.dirichlet(np.full(K, 3.0))
    mu = rng.normal(scale=spread, size=(K, d))
    Sigma = np.stack([random_spd(rng, d) for _ in range(K)])
    return GmmParams.from_covariances(pi, mu, Sigma)


def random_mask(rng, n, d, p):
    """Bernoulli(p) mask with at least one observed cell per row."""
    M = (rng.random((n, d)) < p).astype(np.int8)
    full = M.all(axis=1)
    M[full, rng.integers(d, size=full.sum())] = 0
    return M


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
