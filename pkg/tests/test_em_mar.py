import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment, minimize

from conftest import random_gmm, random_mask, random_spd
from mnarsel import em_mar, gauss, simgen
from mnarsel.core import CovForm, GmmParams, MaskedDataset, RegForm
from mnarsel.em_mar import EmConfig
from mnarsel.errors import DegenerateFitError, EmptyComponentError, RankDeficientError


def _masked(rng, n, d, p, params=None):
    Y = rng.normal(size=(n, d)) if params is None else _sample(rng, params, n)
    return MaskedDataset(Y, random_mask(rng, n, d, p))


def _sample(rng, params, n):
    z = rng.choice(params.K, size=n, p=params.pi)
    return np.stack([rng.multivariate_normal(params.mu[k], params.Sigma[k]) for k in z])


# --------------------------------------------------------------------------
# observed log-likelihood and E-step


def test_loglik_single_component_complete(rng):
    Y = rng.normal(size=(30, 3))
    g = random_gmm(rng, 1, 3)
    ref = gauss.log_mvn_pdf_rows(Y, g.mu[0], g.Sigma[0]).sum()
    assert em_mar.observed_loglik(MaskedDataset.complete(Y), g) == pytest.approx(ref, abs=1e-10)


def test_loglik_identical_components_collapse(rng):
    S = random_spd(rng, 2)
    g = GmmParams.from_covariances([0.3, 0.7], np.zeros((2, 2)), np.stack([S, S]))
    y = np.array([[0.4, -1.0]])
    assert em_mar.observed_loglik(MaskedDataset.complete(y), g) == pytest.approx(
        gauss.log_mvn_pdf(y[0], np.zeros(2), S), abs=1e-12)


def test_loglik_matches_monte_carlo_integration(rng):
    g = random_gmm(rng, 2, 3, spread=1.0)
    data = _masked(rng, 50, 3, 0.2, g)
    rows = np.flatnonzero(data.mask.any(axis=1))[:5]
    for i in rows:
        m = ~data.observed[i]
        exact = em_mar.observed_loglik(data.rows([i]), g)
        # integrate the missing coordinates with a wide Gaussian proposal
        draws = rng.normal(scale=4.0, size=(200_000, m.sum()))
        Y = np.tile(data.filled(0.0)[i], (len(draws), 1))
        Y[:, m] = draws
        joint = np.exp(gauss.log_sum_exp_rows(np.column_stack(
            [np.log(g.pi[k]) + gauss.log_mvn_pdf_rows(Y, g.mu[k], g.Sigma[k]) for k in range(2)])))
        prop = np.exp(gauss.log_mvn_pdf_rows(draws, np.zeros(m.sum()), 16.0 * np.eye(m.sum())))
        w = joint / prop
        est, se = w.mean(), w.std() / np.sqrt(len(w))
        assert abs(np.exp(exact) - est) < 3 * se + 1e-12


def test_mar_integration_single_missing_coordinate(rng):
    g = random_gmm(rng, 2, 3)
    Y = rng.normal(size=(40, 3))
    mask = np.zeros((40, 3), dtype=int)
    mask[:15, 2] = 1
    data = MaskedDataset(Y, mask)
    # explicit marginal model on the first two coordinates for affected rows
    g2 = GmmParams.from_covariances(g.pi, g.mu[:, :2], g.Sigma[:, :2, :2])
    ref = (em_mar.observed_loglik(MaskedDataset.complete(Y[:15, :2]), g2)
           + em_mar.observed_loglik(MaskedDataset.complete(Y[15:]), g))
    assert em_mar.observed_loglik(data, g) == pytest.approx(ref, abs=1e-10)


def test_permutation_equivariance(rng):
    g = random_gmm(rng, 3, 4)
    data = _masked(rng, 60, 4, 0.25, g)
    assert em_mar.observed_loglik(data, g) == em_mar.observed_loglik(data, g.permuted([2, 0, 1]))


def test_e_step_k1_and_symmetry(rng):
    data = _masked(rng, 20, 2, 0.2)
    g1 = random_gmm(rng, 1, 2)
    np.testing.assert_array_equal(em_mar.e_step(data, g1), np.ones((20, 1)))
    g = GmmParams.from_covariances([0.5, 0.5], np.array([[-1.0, 0.0], [1.0, 0.0]]), np.stack([np.eye(2)] * 2))
    t = em_mar.e_step(MaskedDataset.complete([[0.0, 3.0]]), g)
    np.testing.assert_allclose(t, [[0.5, 0.5]], atol=1e-15)


def test_e_step_ratio_oracle(rng):
    g = random_gmm(rng, 3, 3, spread=1.0)
    data = _masked(rng, 30, 3, 0.3, g)
    t = em_mar.e_step(data, g)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-10)
    for i in range(30):
        o = data.observed[i]
        f = [g.pi[k] * np.exp(gauss.log_mvn_pdf(data.values[i, o], g.mu[k][o], g.Sigma[k][np.ix_(o, o)]))
             for k in range(3)]
        assert t[i, 0] / t[i, 1] == pytest.approx(f[0] / f[1], rel=1e-12)


def test_impute_single_component_is_conditional_mean(rng):
    g = random_gmm(rng, 1, 3)
    data = _masked(rng, 25, 3, 0.3, g)
    X = em_mar.impute(data, g)
    for i in range(25):
        o, m = data.observed[i], ~data.observed[i]
        np.testing.assert_array_equal(X[i, o], data.values[i, o])
        if m.any():
            idx = gauss.BlockIndex.from_mask(data.mask[i])
            mean, _ = gauss.conditional_block(data.values[i, o], g.mu[0], g.Sigma[0], idx)
            np.testing.assert_allclose(X[i, m], mean, atol=1e-12)


# --------------------------------------------------------------------------
# M-step and fit


def test_m_step_complete_single_component(rng):
    Y = rng.normal(size=(40, 3))
    g = em_mar.m_step(MaskedDataset.complete(Y), np.ones((40, 1)), random_gmm(rng, 1, 3), CovForm.FULL_FREE)
    np.testing.assert_allclose(g.mu[0], Y.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.Sigma[0], np.cov(Y.T, bias=True), atol=1e-12)
    gd = em_mar.m_step(MaskedDataset.complete(Y), np.ones((40, 1)), random_gmm(rng, 1, 3), CovForm.DIAG_FREE)
    np.testing.assert_allclose(gd.Sigma[0], np.diag(Y.var(axis=0)), atol=1e-12)


def test_m_step_empty_component(rng):
    resp = np.zeros((10, 2))
    resp[:, 0] = 1.0
    with pytest.raises(EmptyComponentError):
        em_mar.m_step(MaskedDataset.complete(rng.normal(size=(10, 2))), resp, random_gmm(rng, 2, 2),
                      CovForm.FULL_FREE)


def test_m_step_fixed_point_is_mle(rng):
    S = np.array([[1.0, 0.6], [0.6, 2.0]])
    Y = rng.multivariate_normal([1.0, -1.0], S, size=200)
    mask = np.zeros((200, 2), dtype=int)
    mask[rng.random(200) < 0.2, 1] = 1
    mask[rng.random(200) < 0.2, 0] = 1
    mask[mask.all(axis=1), 0] = 0
    data = MaskedDataset(Y, mask)
    res = em_mar.fit(data, 1, CovForm.FULL_FREE, EmConfig(tol=1e-14, max_iter=5000))

    def negll(th):
        L = np.array([[np.exp(th[2]), 0.0], [th[3], np.exp(th[4])]])
        g = GmmParams.from_covariances([1.0], th[None, :2], (L @ L.T)[None])
        return -em_mar.observed_loglik(data, g)

    p = res.params
    L0 = np.linalg.cholesky(p.Sigma[0])
    th0 = np.r_[p.mu[0], np.log(L0[0, 0]), L0[1, 0], np.log(L0[1, 1])]
    opt = minimize(negll, th0 + 0.05, method="BFGS", options={"gtol": 1e-9})
    L = np.array([[np.exp(opt.x[2]), 0.0], [opt.x[3], np.exp(opt.x[4])]])
    assert np.abs(opt.x[:2] - p.mu[0]).max() < 1e-4
    assert np.abs(L @ L.T - p.Sigma[0]).max() < 1e-4


def test_fit_recovers_dataset1_means():
    hits = 0
    truth = simgen.DS1_MEANS
    for seed in range(20):
        sim = simgen.gen_dataset1(2000, seed=seed)
        res = em_mar.fit(sim.data.columns([0, 1, 2]), 4, CovForm.FULL_FREE, EmConfig(seed=seed))
        cost = np.linalg.norm(res.params.mu[:, None, :] - truth[None], axis=2)
        r, c = linear_sum_assignment(cost)
        hits += np.abs(res.params.mu[r] - truth[c]).max() < 0.3
    assert hits >= 18


def test_fit_tracks_empirical_class_means():
    # the class-wise sample means are the best any estimator can do at this n
    for seed in range(20):
        sim = simgen.gen_dataset1(2000, seed=seed)
        res = em_mar.fit(sim.data.columns([0, 1, 2]), 4, CovForm.FULL_FREE, EmConfig(seed=seed))
        emp = np.array([sim.complete[sim.labels == k, :3].mean(axis=0) for k in range(4)])
        cost = np.linalg.norm(res.params.mu[:, None, :] - emp[None], axis=2)
        r, c = linear_sum_assignment(cost)
        assert np.abs(res.params.mu[r] - emp[c]).max() < 0.15


def test_fit_n_equals_k_diag_does_not_crash():
    Y = np.array([[0.0, 1.0], [3.0, -2.0], [7.0, 5.0]])
    try:
        res = em_mar.fit(MaskedDataset.complete(Y), 3, CovForm.DIAG_FREE)
        assert np.isfinite(res.loglik)
    except DegenerateFitError as e:
        assert e.code == "ALL_STARTS_DEGENERATE"


def test_fit_k1_is_seed_independent(rng):
    data = _masked(rng, 50, 3, 0.2)
    a = em_mar.fit(data, 1, cfg=EmConfig(seed=1))
    b = em_mar.fit(data, 1, cfg=EmConfig(seed=99))
    np.testing.assert_array_equal(a.params.mu, b.params.mu)
    np.testing.assert_array_equal(a.loglik_trace, b.loglik_trace)


def test_fit_is_deterministic(rng):
    g = random_gmm(rng, 2, 3)
    data = _masked(rng, 120, 3, 0.2, g)
    a, b = em_mar.fit(data, 2), em_mar.fit(data, 2)
    np.testing.assert_array_equal(a.loglik_trace, b.loglik_trace)


@pytest.mark.parametrize("init", ["KMEANS_LIKE", "RANDOM_RESP"])
@pytest.mark.parametrize("form", list(CovForm))
def test_fit_trace_monotone(rng, init, form):
    g = random_gmm(rng, 3, 4, spread=2.0)
    data = _masked(rng, 150, 4, 0.25, g)
    res = em_mar.fit(data, 3, form, EmConfig(init=init))
    assert (np.diff(res.loglik_trace) >= -1e-8).all()
    np.testing.assert_allclose(res.responsibilities.sum(axis=1), 1.0, atol=1e-10)


# --------------------------------------------------------------------------
# BIC blocks


def test_clust_df():
    assert em_mar.clust_df(4, 3, CovForm.FULL_FREE) == 39
    assert em_mar.clust_df(1, 1, CovForm.FULL_FREE) == 2
    assert em_mar.clust_df(2, 3, CovForm.DIAG_FREE) == 1 + 6 + 6


def test_bic_clust_k1_one_variable(rng):
    y = rng.normal(size=(80, 1))
    ll = gauss.log_mvn_pdf_rows(y, y.mean(axis=0), np.atleast_2d(y.var())).sum()
    assert em_mar.bic_clust(MaskedDataset.complete(y), 1) == pytest.approx(2 * ll - 2 * np.log(80), abs=1e-8)


def test_bic_monotone_in_penalty():
    assert em_mar.bic(-100.0, 5, 50) > em_mar.bic(-100.0, 6, 50)


def test_bic_clust_prefers_two_separated_clusters(rng):
    y = np.r_[rng.normal(0, 1, 250), rng.normal(6, 1, 250)][:, None]
    data = MaskedDataset.complete(y)
    assert em_mar.bic_clust(data, 2) > em_mar.bic_clust(data, 1)


@pytest.mark.parametrize("form", [RegForm.LI, RegForm.LB])
def test_bic_reg_empty_r_equals_bic_indep(rng, form):
    data = _masked(rng, 60, 3, 0.1)
    assert em_mar.bic_reg(data, None, form) == pytest.approx(em_mar.bic_indep(data, form), abs=1e-10)


def test_bic_reg_empty_r_full_form_complete(rng):
    data = MaskedDataset.complete(rng.normal(size=(60, 2)) @ np.array([[1.0, 0.5], [0.0, 1.0]]))
    ref = em_mar.bic(em_mar.fit(data, 1).loglik, em_mar.reg_df(0, 2, RegForm.LC), 60)
    assert em_mar.bic_reg(data, None, RegForm.LC) == pytest.approx(ref, abs=1e-6)


def test_regression_matches_normal_equations(rng):
    X = rng.normal(size=(100, 2))
    Y = 1.0 + X @ np.array([[0.5, -1.0], [2.0, 0.3]]) + rng.normal(size=(100, 2))
    fit = em_mar.fit_regression(MaskedDataset.complete(Y), MaskedDataset.complete(X), RegForm.LC)
    Z = np.column_stack([np.ones(100), X])
    coef = np.linalg.solve(Z.T @ Z, Z.T @ Y)
    np.testing.assert_allclose(fit.a, coef[0], atol=1e-8)
    np.testing.assert_allclose(fit.beta, coef[1:], atol=1e-8)
    R = Y - Z @ coef
    np.testing.assert_allclose(fit.Omega, R.T @ R / 100, atol=1e-8)
    assert fit.loglik == pytest.approx(gauss.log_mvn_pdf_rows(R, np.zeros(2), R.T @ R / 100).sum(), abs=1e-8)


def test_regression_exact_linear_is_finite(rng):
    X = rng.normal(size=(50, 1))
    Y = 2.0 * X + 1.0
    b = em_mar.bic_reg(MaskedDataset.complete(Y), MaskedDataset.complete(X), RegForm.LC)
    assert np.isfinite(b)


def test_regression_rank_deficient(rng):
    x = rng.normal(size=(30, 1))
    with pytest.raises(RankDeficientError):
        em_mar.fit_regression(MaskedDataset.complete(rng.normal(size=(30, 1))),
                              MaskedDataset.complete(np.hstack([x, 2 * x])), RegForm.LC)


def test_regression_with_missing_is_conditional_likelihood(rng):
    X = rng.normal(size=(300, 2))
    Y = X @ np.array([[1.0], [-0.5]]) + 0.5 * rng.normal(size=(300, 1))
    mx = random_mask(rng, 300, 2, 0.15)
    my = (rng.random((300, 1)) < 0.15).astype(int)
    dR, dU = MaskedDataset(X, mx, allow_empty_rows=True), MaskedDataset(Y, my, allow_empty_rows=True)
    fit = em_mar.fit_regression(dU, dR, RegForm.LC)
    assert fit.beta.ravel() == pytest.approx([1.0, -0.5], abs=0.15)
    # reported loglik = joint observed minus regressor-observed under the fitted joint law
    both = MaskedDataset(np.hstack([X, Y]), np.hstack([mx, my]))
    cc = ~np.hstack([mx, my]).any(axis=1)
    assert cc.sum() > 100
    assert fit.loglik < 0 and np.isfinite(fit.loglik)
    # the complete-case path on complete data agrees with the EM path
    full = em_mar.fit_regression(MaskedDataset.complete(Y), MaskedDataset.complete(X), RegForm.LC)
    em = em_mar._joint_em(np.hstack([X, Y]), np.zeros((300, 3), dtype=np.int8), 2, RegForm.LC)
    np.testing.assert_allclose(em[3], full.beta, atol=1e-6)
    assert both.n == 300


def test_independent_forms(rng):
    Y = rng.normal(size=(200, 3)) * np.array([1.0, 2.0, 3.0])
    data = MaskedDataset.complete(Y)
    lb = em_mar.fit_independent(data, RegForm.LB)
    np.testing.assert_allclose(np.diag(lb.Gamma), Y.var(axis=0), atol=1e-12)
    li = em_mar.fit_independent(data, RegForm.LI)
    np.testing.assert_allclose(np.diag(li.Gamma), np.full(3, Y.var(axis=0).mean()), atol=1e-12)
    ref = gauss.log_mvn_pdf_rows(Y, Y.mean(axis=0), lb.Gamma).sum()
    assert lb.loglik == pytest.approx(ref, abs=1e-8)
