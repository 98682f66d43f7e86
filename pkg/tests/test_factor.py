import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsegx import factor as fa
from sparsegx.config import EvolutionControl, FactorOptions, HyperParameters, McmcControl
from sparsegx.dataset import ExpressionMatrix, ValidationError
from sparsegx.oracle import simulate_factor, simulate_module
from sparsegx.sampler import run_chain

H_DEFAULT = HyperParameters()
SHORT = McmcControl(burn_in=300, samples=700, seed=5)
GAUSSIAN = FactorOptions(dirichlet_process=False)


def match_abs_corr(est, true):
    """Best absolute correlation per true factor under a greedy one-to-one matching."""
    k = true.shape[1]
    C = np.abs(np.corrcoef(est.T, true.T)[:k, k:])
    best = np.zeros(k)
    used = set()
    for _ in range(k):
        i, j = np.unravel_index(np.argmax(np.where(np.isnan(C), -1, C)), C.shape)
        best[j] = C[i, j]
        used.add(i)
        C[i, :] = -1
        C[:, j] = -1
    return best


@pytest.fixture(scope="module")
def two_factor_fit():
    X, truth = simulate_factor(40, 40, 2, seed=3)
    return X, truth, fa.fit_factors(X, k=2, c=SHORT, options=GAUSSIAN)


def test_varimax_orthogonal_rotation():
    L = np.random.default_rng(1).standard_normal((20, 3))
    rot, R = fa.varimax(L)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(rot, L @ R, atol=1e-12)


def test_varimax_recovers_simple_structure():
    base = np.kron(np.eye(2), np.ones((5, 1)))
    theta = 0.6
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    rot, _ = fa.varimax(base @ R)
    # each row loads on one factor only after rotation
    assert np.all(np.sort(np.abs(rot), axis=1)[:, 0] < 1e-6)


def test_choose_anchors_prefers_pure_genes():
    L = np.array([[1.0, 0.9], [0.8, 0.0], [0.1, 0.7], [0.0, 0.5]])
    np.testing.assert_array_equal(fa.choose_anchors(L), [1, 2])


def test_fit_invariants_and_anchor_constraint(two_factor_fit):
    X, _, fit = two_factor_fit
    fit.state.check()
    g = [X.gene_ids.index(a) for a in fit.anchors]
    assert fit.loadings[g[0], 0] > 0 and fit.loadings[g[1], 1] > 0
    assert fit.loadings[g[0], 1] == 0.0 and fit.loading_pi[g[0], 1] == 0.0
    assert fit.loading_pi[g[0], 0] == 1.0
    assert np.all((fit.loading_pi >= 0) & (fit.loading_pi <= 1))


def test_fit_recovers_loadings(two_factor_fit):
    _, truth, fit = two_factor_fit
    assert np.all(match_abs_corr(fit.loadings, truth.A) > 0.9)


def test_reconstruction_stable_across_signs_and_seeds(two_factor_fit):
    X, _, fit = two_factor_fit
    AL = fit.loadings @ fit.scores
    flip = np.diag([-1.0, 1.0])
    np.testing.assert_allclose((fit.loadings @ flip) @ (flip @ fit.scores), AL, atol=1e-12)
    other = fa.fit_factors(X, k=2, c=McmcControl(burn_in=300, samples=700, seed=99),
                           options=GAUSSIAN)
    # the intercept absorbs A times the mean score, so compare whole fitted means
    fitted = lambda f: f.summary.beta_mean[:, :1] + f.loadings @ f.scores
    centred = X.values - X.values.mean(axis=1, keepdims=True)
    err = np.linalg.norm(fitted(other) - fitted(fit)) / np.linalg.norm(centred)
    assert err < 0.05


def test_fit_deterministic():
    X, _ = simulate_factor(15, 20, 1, seed=1)
    c = McmcControl(burn_in=50, samples=100, seed=2)
    a, b = fa.fit_factors(X, k=1, c=c), fa.fit_factors(X, k=1, c=c)
    np.testing.assert_array_equal(a.loadings, b.loadings)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_single_component_is_gaussian():
    X, _ = simulate_factor(20, 25, 2, seed=4)
    c = McmcControl(burn_in=100, samples=200, seed=8)
    gauss = fa.fit_factors(X, k=2, c=c, options=GAUSSIAN)
    single = fa.fit_factors(X, k=2, c=c, options=FactorOptions(truncation=1))
    np.testing.assert_array_equal(gauss.loadings, single.loadings)
    np.testing.assert_array_equal(gauss.scores, single.scores)
    np.testing.assert_array_equal(gauss.summary.psi_mean, single.summary.psi_mean)


def test_mixture_state_invariants():
    X, _ = simulate_factor(20, 30, 2, seed=5, clusters=3)
    fit = fa.fit_factors(X, k=2, c=McmcControl(burn_in=100, samples=200, seed=1))
    fit.state.check()
    mix = fit.state.mixture
    assert mix.truncation == 30 and mix.alpha[0] > 0
    assert 1 <= fit.mean_occupied <= 30


@pytest.mark.parametrize("options,second_moment", [(GAUSSIAN, 1.0), (FactorOptions(), 2.0)])
def test_zero_loadings_leave_scores_at_prior(options, second_moment):
    X = 8 + 0.2 * np.random.default_rng(2).standard_normal((10, 30))
    fit = fa.fit_factors(X, k=2, c=McmcControl(burn_in=200, samples=4000, seed=3),
                         options=options, zero_loadings=True)
    assert np.all(fit.loadings == 0) and np.all(fit.loading_pi == 0)
    # under N(mu, I) components with mu ~ N(0, I) the marginal second moment is 2
    m2 = np.mean(fit.scores ** 2 + fit.scores_sd ** 2)
    assert m2 == pytest.approx(second_moment, rel=0.1)
    assert abs(fit.scores.mean()) < 0.15


def test_control_block_matches_regression_sampler():
    r = np.random.default_rng(6)
    n = 24
    cov = r.standard_normal((n, 2))
    cov -= cov.mean(axis=0)
    H = np.column_stack([np.ones(n), cov])
    X = 8 + 0.7 * np.outer(r.integers(0, 2, 12), cov[:, 0]) + 0.2 * r.standard_normal((12, n))
    c = McmcControl(burn_in=100, samples=300, seed=4)
    fit = fa.fit_factors(X, controls=cov, k=2, c=c, options=GAUSSIAN, zero_loadings=True)
    reg = run_chain(X, H, H_DEFAULT, c)
    # same random streams; sums differ only by rounding from the extra zero columns
    np.testing.assert_array_equal(fit.summary.pi_star[:, :3], reg.pi_star)
    np.testing.assert_allclose(fit.summary.beta_mean[:, :3], reg.beta_mean, rtol=1e-12)
    np.testing.assert_allclose(fit.summary.psi_mean, reg.psi_mean, rtol=1e-12)


def test_fit_errors():
    X = np.ones((3, 4)) + np.arange(4)
    with pytest.raises(ValidationError, match="exceeds"):
        fa.fit_factors(X, k=5, c=SHORT)
    with pytest.raises(ValidationError, match="empty"):
        fa.fit_factors(np.zeros((0, 4)), k=1, c=SHORT)
    with pytest.raises(ValidationError, match="controls"):
        fa.fit_factors(X, controls=np.zeros((5, 1)), k=1, c=SHORT)


def test_predictive_inclusion_self_consistency(two_factor_fit):
    X, _, fit = two_factor_fit
    strong = np.flatnonzero(fit.loading_pi[:, 0] > 0.99)
    assert strong.size
    for g in strong[:5]:
        assert fa.predictive_inclusion(fit, X.values[g])[0] > 0.95


def test_predictive_inclusion_constant_gene_is_prior(two_factor_fit):
    _, _, fit = two_factor_fit
    prob = fa.predictive_inclusion(fit, np.full(fit.scores.shape[1], 7.5))
    np.testing.assert_allclose(prob, fit.summary.rho_mean[1:] * H_DEFAULT.m)


def test_predictive_inclusion_wrong_length(two_factor_fit):
    with pytest.raises(ValidationError):
        fa.predictive_inclusion(two_factor_fit[2], np.ones(3))


def test_predictive_inclusion_matches_brute_force(two_factor_fit):
    from scipy import stats

    _, _, fit = two_factor_fit
    y = 8 + np.random.default_rng(0).standard_normal(fit.scores.shape[1]) * 0.3
    y[:10] += 0.8 * fit.scores[1, :10]
    got = fa.predictive_inclusion(fit, y)
    G = fit.design.values
    n, d = G.shape
    tau = fit.summary.tau_mean.copy()
    tau[0] = H_DEFAULT.tau1
    prior = fit.summary.rho_mean[1:] * H_DEFAULT.m
    y0 = y - H_DEFAULT.b
    coef = np.linalg.lstsq(G, y0, rcond=None)[0]
    shape = H_DEFAULT.psi_shape + 0.5 * (n - d)
    psi = (H_DEFAULT.psi_rate + 0.5 * np.sum((y0 - G @ coef) ** 2)) / (shape - 1)
    weights, incl = [], []
    for z1 in (0, 1):
        for z2 in (0, 1):
            on = np.array([True, bool(z1), bool(z2)])
            cov = psi * np.eye(n) + (G[:, on] * tau[on]) @ G[:, on].T
            lp = stats.multivariate_normal.logpdf(y0, np.zeros(n), cov)
            lp += np.log(np.where([z1, z2], prior, 1 - prior)).sum()
            weights.append(lp)
            incl.append((z1, z2))
    w = np.exp(np.array(weights) - max(weights))
    w /= w.sum()
    np.testing.assert_allclose(got, w @ np.array(incl), atol=1e-9)


def test_predictive_inclusion_noise_rarely_passes(two_factor_fit):
    _, _, fit = two_factor_fit
    r = np.random.default_rng(10)
    n = fit.scores.shape[1]
    hits = sum(np.max(fa.predictive_inclusion(fit, 8 + 0.2 * r.standard_normal(n))) > 0.75
               for _ in range(400))
    assert hits / 400 <= 0.05


FAST = EvolutionControl(stage_burn_in=200, stage_samples=600)


def test_evolve_admits_module_and_is_deterministic():
    M, seeds, module, _ = simulate_module(n_seed=6, n_module=8, n_noise=0, n=40, seed=2)
    a = fa.evolve(seeds, M, ec=FAST, seed=1)
    b = fa.evolve(seeds, M, ec=FAST, seed=1)
    assert a.format_log() == b.format_log()
    assert set(module) <= set(a.genes)
    counts = [r.gene_count for r in a.log]
    assert counts == sorted(counts)
    assert a.log[-1].admitted == ()


def test_evolve_noise_pool_single_stage():
    M, seeds, _, noise = simulate_module(n_seed=8, n_module=0, n_noise=15, n=40, seed=3,
                                         noise_sd=0.2)
    res = fa.evolve(seeds, M, ec=FAST, seed=2)
    assert res.genes == tuple(seeds) and len(res.log) == 1


def test_evolve_seed_only_pool_single_stage():
    M, seeds, _, _ = simulate_module(n_seed=6, n_module=0, n_noise=0, n=30, seed=4)
    assert len(fa.evolve(seeds, M, ec=FAST).log) == 1


@settings(max_examples=4, deadline=None)
@given(st.integers(0, 1000), st.integers(7, 12), st.integers(1, 3))
def test_evolve_respects_caps_and_stage_bound(seed, max_genes, max_factors):
    M, seeds, module, _ = simulate_module(n_seed=5, n_module=10, n_noise=5, n=30, seed=seed)
    ec = EvolutionControl(stage_burn_in=100, stage_samples=200, max_genes=max_genes,
                          max_factors=max_factors, max_admit_per_stage=3)
    res = fa.evolve(seeds, M, ec=ec, seed=seed)
    assert len(res.genes) <= max_genes and res.fit.k <= max_factors
    assert set(seeds) <= set(res.genes)
    assert len(res.log) <= max_genes - len(seeds) + max_factors + 1
    counts = [r.gene_count for r in res.log]
    assert counts == sorted(counts)
    assert all(len(r.admitted) <= 3 for r in res.log)


def test_evolve_errors():
    M, seeds, _, _ = simulate_module(n_seed=3, n_module=0, n_noise=0, n=10, seed=0)
    with pytest.raises(ValidationError, match="not in the pool"):
        fa.evolve(["nope"], M, ec=FAST)
    with pytest.raises(ValidationError):
        fa.evolve([], M, ec=FAST)


def test_stage_log_format():
    rec = fa.StageRecord(1, 2, 30, ("a", "b"), True, 6, "+factor")
    res = fa.EvolutionResult(None, (), (rec,))
    line = json.loads(res.format_log())
    assert line == {"stage": 1, "k": 2, "gene_count": 30, "admitted": ["a", "b"],
                    "factor_added": True, "trial_support": 6, "decision": "+factor"}


def test_tables(two_factor_fit):
    _, _, fit = two_factor_fit
    rows = fa.format_loadings(fit).splitlines()
    assert rows[0] == "gene\tfactor\tpi_star\tloading_mean" and len(rows) == 1 + 40 * 2
    rows = fa.format_factor_scores(fit).splitlines()
    assert rows[0] == "factor\tsample\tscore_mean\tscore_sd" and len(rows) == 1 + 2 * 40


def test_evolution_defaults():
    ec = EvolutionControl()
    assert (ec.stage_burn_in, ec.stage_samples) == (2000, 8000)
    assert (ec.max_genes, ec.max_factors) == (150, 10)
    assert (ec.gene_inclusion_threshold, ec.factor_gene_threshold, ec.factor_gene_count) == (0.75, 0.75, 5)
