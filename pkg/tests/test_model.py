import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from wfanova.basis import eval_basis
from wfanova.model import (ComputationError, GroupData, ModelParams, ObservationSet, WarpEffects,
                           amplitude_conditional_moments, group_loglik_given_warps,
                           simulate_from_model, warped_design)

from oracles import dense_loglik, dense_moments, gh_loglik, subject_marginal_sum, tiny_params


@pytest.fixture(scope="module")
def params():
    return tiny_params()


def make_group(params, J=2, nu=3, seed=0, irregular=False):
    rng = np.random.default_rng(seed)
    subjects = []
    for j in range(J):
        n = nu + (j if irregular else 0)
        t = np.sort(rng.uniform(0, 1, n))
        y = params.mean_function(t) + rng.normal(0, 0.5, n)
        subjects.append((t, y))
    return ObservationSet.from_subjects([subjects], (0, 1)).groups[0]


def random_warps(r, J, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return WarpEffects(rng.normal(0, scale, r), rng.normal(0, scale, (J, r)))


def mean_only(params):
    s = params.s
    return replace(params, C=np.zeros((s, 0)), D=np.zeros((s, 0)), gamma=np.zeros(0),
                   lam=np.zeros(0))


def test_observation_set_properties():
    data = ObservationSet.from_subjects(
        [[([0.1, 0.5], [1, 2]), ([0.2], [3])], [([0.3, 0.4, 0.9], [4, 5, 6])]], (0, 1))
    assert data.I == 2
    assert data.J_i == [2, 1]
    assert data.n_subjects == 3
    assert data.n_obs == 6
    assert not data.is_balanced()
    t, y = data.groups[0].subject(1)
    np.testing.assert_array_equal(t, [0.2])
    np.testing.assert_array_equal(y, [3])
    assert [(i, j) for i, j, _ in data.iter_subjects()] == [(0, 0), (0, 1), (1, 0)]


@pytest.mark.parametrize("subjects", [
    [[([0.5, 0.2], [1, 2])]],
    [[([0.5, 1.2], [1, 2])]],
    [[([], [])]],
])
def test_observation_set_validation(subjects):
    with pytest.raises(ValueError):
        ObservationSet.from_subjects(subjects, (0, 1))


def test_subset_allows_repeats():
    data = ObservationSet.from_subjects([[([0.1], [1])], [([0.2], [2])]], (0, 1))
    sub = data.subset([1, 1, 0])
    assert sub.I == 3
    np.testing.assert_array_equal(sub.groups[0].y, [2])
    assert len(set(sub.group_ids)) == 3


def test_params_round_trip_through_json(params):
    back = ModelParams.from_dict(json.loads(json.dumps(params.to_dict())))
    for name in ("m", "C", "D", "gamma", "lam", "Sigma", "Omega"):
        np.testing.assert_array_equal(getattr(back, name), getattr(params, name))
    assert back.sigma2 == params.sigma2
    assert back.knots == params.knots and back.basis == params.basis


def test_params_validation(params):
    with pytest.raises(ValueError):
        replace(params, C=2 * params.C).validate()
    with pytest.raises(ValueError):
        replace(params, gamma=np.array([-1.0])).validate()
    with pytest.raises(ValueError):
        replace(params, Sigma=np.zeros((1, 1))).validate()
    with pytest.raises(ValueError):
        replace(params, sigma2=0.0).validate()


def test_mean_only_model_reduces_to_independent_normals(params):
    pm = mean_only(params)
    group = make_group(params)
    warps = random_warps(1, 2, 3)
    expected = 0.0
    for j in range(2):
        t, y = group.subject(j)
        B = warped_design(params, t, params.theta0 + warps.eta + warps.xi[j])
        expected += stats.norm.logpdf(y, B @ params.m, np.sqrt(params.sigma2)).sum()
    assert group_loglik_given_warps(pm, group, warps) == pytest.approx(expected, abs=1e-10)


def test_matches_gauss_hermite_oracle(params):
    group = make_group(params, J=2, nu=3)
    for seed in range(3):
        w = random_warps(1, 2, seed)
        assert group_loglik_given_warps(params, group, w) == pytest.approx(
            gh_loglik(params, group, w.eta, w.xi), abs=1e-6)


def test_matches_dense_covariance_oracle():
    params = tiny_params(tau0=(0.3, 0.7), Sigma=0.05, Omega=0.02, n_knots=5)
    group = make_group(params, J=4, nu=5, irregular=True, seed=2)
    for seed in range(5):
        w = random_warps(2, 4, seed)
        assert group_loglik_given_warps(params, group, w) == pytest.approx(
            dense_loglik(params, group, w.eta, w.xi), abs=1e-9)


def test_zero_warps_use_unwarped_basis(params):
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(warped_design(params, t, params.theta0), eval_basis(params.basis, t),
                               atol=1e-13)


def test_sum_of_subject_marginals_only_without_shared_scores(params):
    group = make_group(params, J=3, nu=4)
    w = random_warps(1, 3, 1)
    no_u = replace(params, C=np.zeros((params.s, 0)), gamma=np.zeros(0))
    assert group_loglik_given_warps(no_u, group, w) == pytest.approx(
        subject_marginal_sum(no_u, group, w.eta, w.xi), abs=1e-9)
    full = group_loglik_given_warps(params, group, w)
    assert abs(full - subject_marginal_sum(params, group, w.eta, w.xi)) > 1e-3


def test_permutation_invariance(params):
    group = make_group(params, J=3, nu=4, irregular=True)
    w = random_warps(1, 3, 4)
    perm = [2, 0, 1]
    subjects = [group.subject(j) for j in perm]
    permuted = ObservationSet.from_subjects([subjects], (0, 1)).groups[0]
    wp = WarpEffects(w.eta, w.xi[perm])
    assert group_loglik_given_warps(params, group, w) == pytest.approx(
        group_loglik_given_warps(params, permuted, wp), abs=1e-10)


def test_singular_covariance_raises(params):
    group = make_group(params)
    bad = replace(params, sigma2=0.0, gamma=np.array([np.nan]))
    with pytest.raises(ComputationError):
        group_loglik_given_warps(bad, group, WarpEffects.zeros(1, 2))


def test_moments_match_dense_conditioning(params):
    group = make_group(params, J=3, nu=5)
    w = random_warps(1, 3, 9)
    mom = amplitude_conditional_moments(params, group, w)
    mean, cov = dense_moments(params, group, w.eta, w.xi)
    np.testing.assert_allclose(mom.mean, mean, atol=1e-10)
    np.testing.assert_allclose(mom.cov, cov, atol=1e-10)
    assert mom.loglik == pytest.approx(group_loglik_given_warps(params, group, w), abs=1e-10)
    np.testing.assert_allclose(mom.uu, cov[:1, :1] + np.outer(mean[:1], mean[:1]), atol=1e-10)
    np.testing.assert_allclose(mom.vv(2), cov[3:, 3:] + np.outer(mean[3:], mean[3:]), atol=1e-10)
    np.testing.assert_allclose(mom.uv(1), cov[:1, 2:3] + np.outer(mean[:1], mean[2:3]),
                               atol=1e-10)
    assert np.linalg.eigvalsh(mom.cov).min() > -1e-12


def test_moments_uninformative_limit(params):
    group = make_group(params)
    mom = amplitude_conditional_moments(replace(params, sigma2=1e6), group, WarpEffects.zeros(1, 2))
    np.testing.assert_allclose(mom.mean, 0.0, atol=1e-2)
    np.testing.assert_allclose(np.diag(mom.cov), [0.5, 0.2, 0.2], atol=1e-2)


def test_moments_ridge_shrinkage_toy(params):
    # one subject, one component, no subject-level term
    pc = replace(params, D=np.zeros((params.s, 0)), lam=np.zeros(0), knots=replace(params.knots),
                 sigma2=0.3)
    t = np.linspace(0, 1, 9)
    Phi = warped_design(pc, t, pc.theta0) @ pc.C[:, 0]
    y = pc.mean_function(t) + 1.7 * Phi
    group = ObservationSet.from_subjects([[(t, y)]], (0, 1)).groups[0]
    mom = amplitude_conditional_moments(pc, group, WarpEffects.zeros(1, 1))
    n2 = Phi @ Phi
    ols = Phi @ (y - pc.mean_function(t)) / n2
    g = pc.gamma[0]
    assert mom.mean_u[0] == pytest.approx(g / (g + pc.sigma2 / n2) * ols, abs=1e-12)


def test_covariance_psd_random_cases(params):
    for seed in range(20):
        group = make_group(params, J=2, nu=3, seed=seed)
        mom = amplitude_conditional_moments(params, group, random_warps(1, 2, seed, 1.0))
        assert np.linalg.eigvalsh(mom.cov).min() > -1e-12


def test_simulation_is_deterministic(params):
    grid = np.linspace(0, 1, 7)
    d1, t1 = simulate_from_model(params, 3, 2, grid, 42)
    d2, t2 = simulate_from_model(params, 3, 2, grid, 42)
    for g1, g2 in zip(d1.groups, d2.groups):
        np.testing.assert_array_equal(g1.y, g2.y)
    np.testing.assert_array_equal(t1["warps"][0].xi, t2["warps"][0].xi)


def test_simulation_without_any_variance_is_the_mean(params):
    zero = replace(params, gamma=np.zeros(1), lam=np.zeros(1), Sigma=np.zeros((1, 1)),
                   Omega=np.zeros((1, 1)), sigma2=0.0)
    grid = np.linspace(0, 1, 9)
    data, truth = simulate_from_model(zero, 2, 3, grid, 0)
    for g in data.groups:
        for j in range(g.J):
            np.testing.assert_allclose(g.subject(j)[1], params.mean_function(grid), atol=1e-13)
    assert all(np.all(w.xi == 0) and np.all(w.eta == 0) for w in truth["warps"])


def test_simulation_without_warp_variance_centres_on_mean(params):
    flat = replace(params, Sigma=np.zeros((1, 1)), Omega=np.zeros((1, 1)))
    grid = np.linspace(0, 1, 6)
    data, _ = simulate_from_model(flat, 2000, 1, grid, 3)
    Y = np.array([g.y for g in data.groups])
    se = Y.std(axis=0) / np.sqrt(Y.shape[0])
    assert np.all(np.abs(Y.mean(axis=0) - params.mean_function(grid)) < 4 * se)


def test_simulated_score_variance(params):
    no_warp = replace(params, knots=replace(params.knots, tau0=()), Sigma=np.zeros((0, 0)),
                      Omega=np.zeros((0, 0)))
    _, truth = simulate_from_model(no_warp, 100_000, 1, np.array([0.5]), 11)
    u = np.array([sc.u[0] for sc in truth["scores"]])
    assert np.var(u) == pytest.approx(params.gamma[0], rel=0.02)


def test_law_of_total_variance(params):
    no_warp = replace(params, knots=replace(params.knots, tau0=()), Sigma=np.zeros((0, 0)),
                      Omega=np.zeros((0, 0)), sigma2=0.2)
    data, _ = simulate_from_model(no_warp, 40_000, 2, np.linspace(0.1, 0.9, 3), 5)
    means, variances = [], []
    w = WarpEffects(np.zeros(0), np.zeros((2, 0)))
    for g in data.groups:
        mom = amplitude_conditional_moments(no_warp, g, w)
        means.append(mom.mean_u[0])
        variances.append(mom.cov[0, 0])
    total = np.var(means) + np.mean(variances)
    assert total == pytest.approx(params.gamma[0], rel=0.02)
