import numpy as np
import pytest
import mpmath

from conftest import random_gmm, random_mask
from mnarsel import em_mar, metrics, mnarz, simgen, sruw
from mnarsel.core import CovForm, GmmParams, MaskedDataset, MnarzParams, SruwParams, VariablePartition
from mnarsel.em_mar import EmConfig


def _instance(rng, K=None, d=None, n=None):
    K = K or int(rng.integers(1, 4))
    d = d or int(rng.integers(1, 7))
    n = n or 20
    g = random_gmm(rng, K, d)
    data = MaskedDataset(rng.normal(scale=2.0, size=(n, d)), random_mask(rng, n, d, 0.3))
    return data, g, rng.uniform(0.05, 0.95, size=K)


def _mask_oracle(c, rho):
    return np.log(np.prod([rho if x else 1 - rho for x in c]))


def _separated(rng, n, rho):
    z = rng.integers(2, size=n)
    Y = rng.normal(size=(n, 4)) + 6.0 * z[:, None]
    data = simgen.apply_missingness(MaskedDataset.complete(Y), z, simgen.MNARZ(tuple(rho)), seed=int(rng.integers(1 << 30)))
    return data, z


# --------------------------------------------------------------------------
# mask term and likelihood


def test_mask_loglik_cases(rng):
    assert mnarz.mask_loglik([0, 0, 0], 0.5) == pytest.approx(np.log(1 / 8), abs=1e-15)
    assert mnarz.mask_loglik([1, 1, 1], 0.5) == pytest.approx(np.log(1 / 8), abs=1e-15)
    for _ in range(20):
        c = rng.integers(2, size=6)
        assert mnarz.mask_loglik(c, 0.3) == pytest.approx(_mask_oracle(c, 0.3), abs=1e-14)


@pytest.mark.parametrize("rho", [0.0, 1.0, -0.1, 1.5])
def test_mask_loglik_range(rho):
    with pytest.raises(ValueError, match="RHO_OUT_OF_RANGE"):
        mnarz.mask_loglik([0, 1], rho)


def test_complete_data_adds_constant(rng):
    g = random_gmm(rng, 2, 3)
    data = MaskedDataset.complete(rng.normal(size=(40, 3)))
    ll = mnarz.observed_loglik_mnarz(data, g, MnarzParams.all_mnar([0.2, 0.2], 3))
    assert ll == pytest.approx(em_mar.observed_loglik(data, g) + 40 * 3 * np.log(0.8), abs=1e-9)


def test_equal_rho_keeps_mar_responsibilities(rng):
    data, g, _ = _instance(rng, K=3, d=4, n=50)
    t = mnarz.responsibilities_mnarz(data, g, MnarzParams.all_mnar([0.3] * 3, 4))
    np.testing.assert_allclose(t, em_mar.e_step(data, g), atol=1e-12)


def test_equivalence_with_augmented_data(rng):
    for _ in range(50):
        data, g, rho = _instance(rng)
        mn = MnarzParams.all_mnar(rho, data.d)
        aug = mnarz.augment(data)
        lhs = mnarz.observed_loglik_mnarz(data, g, mn)
        rhs = mnarz.augmented_loglik(aug, g, rho)
        assert abs(lhs - rhs) <= 1e-12 * data.n * max(1.0, abs(lhs) / data.n)


def test_sruw_parameters_use_the_embedding(rng):
    part = VariablePartition({0, 1}, {0}, {2}, {3})
    alpha = random_gmm(rng, 2, 2)
    theta = SruwParams(alpha, [0.5], [[1.2]], [[0.7]], [-1.0], [[2.0]])
    data = MaskedDataset(rng.normal(size=(30, 4)), random_mask(rng, 30, 4, 0.25))
    mn = MnarzParams.all_mnar([0.2, 0.4], 4)
    g = sruw.sruw_to_global_gmm(theta, part)
    assert mnarz.observed_loglik_mnarz(data, theta, mn, part) == mnarz.observed_loglik_mnarz(data, g, mn)
    with pytest.raises(ValueError):
        mnarz.observed_loglik_mnarz(data, theta, mn)


def test_augment_shapes(rng):
    data = MaskedDataset.complete(rng.normal(size=(5, 3)))
    aug = mnarz.augment(data)
    assert aug.data.values.shape == (5, 6)
    np.testing.assert_array_equal(aug.indicators, 0.0)
    mask = np.zeros((5, 3), dtype=int)
    mask[0, 1] = 1
    aug = mnarz.augment(MaskedDataset(rng.normal(size=(5, 3)), mask))
    assert aug.indicators[0, 1] == 1.0 and aug.indicators.sum() == 1.0
    assert aug.data.mask[:, 3:].sum() == 0 and aug.d == 3


# --------------------------------------------------------------------------
# mixed mechanisms


def test_mixed_all_mnar_matches_pure(rng):
    data, g, rho = _instance(rng, K=2, d=4, n=30)
    mn = MnarzParams.all_mnar(rho, 4)
    assert mnarz.observed_loglik_mixed(data, g, mn) == mnarz.observed_loglik_mnarz(data, g, mn)


def test_mixed_all_mar_is_ignorable(rng):
    data, g, rho = _instance(rng, K=2, d=4, n=30)
    mn = MnarzParams(rho, frozenset(range(4)), frozenset())
    assert mnarz.observed_loglik_mixed(data, g, mn) == pytest.approx(em_mar.observed_loglik(data, g), abs=1e-12)


def test_mixed_regrouping_oracle(rng):
    for _ in range(20):
        data, g, rho = _instance(rng, K=int(rng.integers(1, 4)), d=5, n=25)
        mnar = frozenset(int(j) for j in rng.choice(5, size=int(rng.integers(1, 5)), replace=False))
        mar = frozenset(range(5)) - mnar
        mn = MnarzParams(rho, mar, mnar)
        P = rng.uniform(0.1, 0.9, size=(25, len(mar)))
        got = mnarz.observed_loglik_mixed(data, g, mn, mar_model=lambda d: P)
        ref = 0.0
        for i in range(25):
            o = data.observed[i]
            c = data.mask[i, sorted(mnar)]
            tot = sum(g.pi[k] * np.exp(em_mar.observed_loglik(data.rows([i]).columns(np.flatnonzero(o)),
                                                              _marginal(g, k, o)))
                      * rho[k] ** c.sum() * (1 - rho[k]) ** (len(c) - c.sum()) for k in range(g.K))
            cm = data.mask[i, sorted(mar)]
            ref += np.log(tot) + np.sum(np.where(cm == 1, np.log(P[i]), np.log(1 - P[i])))
        assert got == pytest.approx(ref, abs=1e-12 * 25 * max(1.0, abs(ref) / 25))


def _marginal(g, k, o):
    return GmmParams.from_covariances([1.0], g.mu[k][o][None], g.Sigma[k][np.ix_(o, o)][None])


# --------------------------------------------------------------------------
# estimation


def _golden_argmax_q(t, counts, D, iters=200):
    # double precision cannot resolve a flat maximum below ~1e-8, so search in 40 digits
    with mpmath.workdps(40):
        A = mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(c)) for a, c in zip(t, counts))
        B = mpmath.fsum(mpmath.mpf(float(a)) * (D - mpmath.mpf(float(c))) for a, c in zip(t, counts))

        def q(r):
            return A * mpmath.log(r) + B * mpmath.log(1 - r)

        g = (mpmath.sqrt(5) - 1) / 2
        lo, hi = mpmath.mpf("1e-12"), 1 - mpmath.mpf("1e-12")
        for _ in range(iters):
            a, b = hi - g * (hi - lo), lo + g * (hi - lo)
            if q(a) > q(b):
                hi = b
            else:
                lo = a
        return float((lo + hi) / 2)


def test_rho_update_is_q_maximiser(rng):
    for _ in range(100):
        n, K, D = 40, int(rng.integers(1, 4)), int(rng.integers(1, 7))
        resp = rng.dirichlet(np.ones(K), size=n)
        counts = rng.integers(0, D + 1, size=n).astype(float)
        if counts.sum() in (0, n * D):
            counts[0] = 1 if counts.sum() == 0 else D - 1
        rho = mnarz.rho_update(resp, counts, D)
        for k in range(K):
            if not 1e-6 < rho[k] < 1 - 1e-6:
                continue
            h = 1e-6
            dq = (mnarz.q_mask(rho[k] + h, resp[:, k], counts, D)
                  - mnarz.q_mask(rho[k] - h, resp[:, k], counts, D)) / (2 * h)
            assert abs(dq) <= 1e-6 * max(1.0, n)
            assert abs(_golden_argmax_q(resp[:, k], counts, D) - rho[k]) < 1e-8


def test_rho_update_clipped():
    rho = mnarz.rho_update(np.ones((5, 1)), np.zeros(5), 3)
    assert rho[0] == mnarz.RHO_CLIP
    rho = mnarz.rho_update(np.ones((5, 1)), np.full(5, 3.0), 3)
    assert rho[0] == 1 - mnarz.RHO_CLIP


def test_no_missingness_matches_mar_fit(rng):
    g = random_gmm(rng, 2, 3, spread=4.0)
    z = rng.choice(2, size=200, p=g.pi)
    Y = np.stack([rng.multivariate_normal(g.mu[k], g.Sigma[k]) for k in z])
    data = MaskedDataset.complete(Y)
    fit = mnarz.em_fit_mnarz(data, 2)
    ref = em_mar.fit(data, 2)
    np.testing.assert_allclose(fit.mnarz.rho, mnarz.RHO_CLIP)
    np.testing.assert_allclose(fit.clustering.mu, ref.params.mu, atol=1e-6)
    np.testing.assert_allclose(fit.clustering.Sigma, ref.params.Sigma, atol=1e-6)


def test_rho_recovered_on_separated_classes(rng):
    data, z = _separated(rng, 2000, (0.1, 0.4))
    fit = mnarz.em_fit_mnarz(data, 2)
    order = np.argsort(fit.clustering.mu[:, 0])
    np.testing.assert_allclose(fit.mnarz.rho[order], [0.1, 0.4], atol=0.05)


@pytest.mark.parametrize("form", list(CovForm))
def test_mnarz_trace_monotone(rng, form):
    for _ in range(5):
        data, _ = _separated(rng, 150, rng.uniform(0.05, 0.5, size=2))
        fit = mnarz.em_fit_mnarz(data, int(rng.integers(1, 4)), form)
        assert (np.diff(fit.loglik_trace) >= -1e-8).all()
        assert ((fit.mnarz.rho > 0) & (fit.mnarz.rho < 1)).all()


def test_trace_is_the_mnarz_loglik(rng):
    data, _ = _separated(rng, 300, (0.1, 0.3))
    fit = mnarz.em_fit_mnarz(data, 2, cfg=EmConfig(max_iter=7, n_starts=1))
    # the trace entry at iteration i is evaluated before the i-th update
    ref = mnarz.observed_loglik_mnarz(data, fit.clustering, fit.mnarz)
    assert fit.loglik <= ref + 1e-8


def test_fit_with_partition(rng):
    data, _ = _separated(rng, 300, (0.1, 0.3))
    part = VariablePartition({0, 1}, {0}, {2}, {3})
    fit = mnarz.em_fit_mnarz(data, 2, part=part)
    fit.theta.check(part)
    assert fit.part == part


# --------------------------------------------------------------------------
# selection


def test_select_complete_data_matches_mar_selection(rng):
    Y = rng.normal(size=(300, 4))
    Y[:150, 0] += 5.0
    Y[:, 2] += 0.8 * Y[:, 0]
    data = MaskedDataset.complete(Y)
    a = sruw.select_model(data, [1, 2])
    b = mnarz.select_model_mnarz(data, [1, 2])
    assert a[0] == b[0] and a[1] == b[1]


def test_dataset1_mnarz_beats_mean_imputation():
    truth = {0, 1, 2}
    wins = {"mnarz": 0, "impute": 0}
    for seed in range(20):
        sim = simgen.gen_dataset1(2000, seed=seed)
        mech = simgen.MNARZ.from_rate(0.2, 4)
        data = simgen.apply_missingness(sim.data, sim.labels, mech, seed=seed)
        cfg = EmConfig(seed=seed)
        _, part, _ = mnarz.select_model_mnarz(data, [2, 3, 4], cfg=cfg)
        wins["mnarz"] += part.S == truth
        filled = MaskedDataset.complete(data.filled(data.column_means()))
        _, part, _ = sruw.select_model(filled, [2, 3, 4], cfg=cfg)
        wins["impute"] += part.S == truth
    assert wins["mnarz"] > wins["impute"], wins


def test_appendix_mnarz_ari_not_below_mean_imputation():
    a, b = [], []
    for seed in range(20):
        sim = simgen.gen_mnarz_appendix(100, 6, seed=seed)
        cfg = EmConfig(seed=seed)
        fit = mnarz.em_fit_mnarz(sim.data, 3, cfg=cfg)
        a.append(metrics.ari(sim.labels, fit.responsibilities.argmax(axis=1)))
        filled = MaskedDataset.complete(sim.data.filled(sim.data.column_means()))
        res = em_mar.fit(filled, 3, cfg=cfg)
        b.append(metrics.ari(sim.labels, res.responsibilities.argmax(axis=1)))
    assert np.median(a) >= np.median(b), (np.median(a), np.median(b))
