import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfanova.estimation import FitConfig
from wfanova.inference import variance_ratio_amplitude, variance_ratio_warping
from wfanova.simulation import (_draw_scores, dense_grid, error_metrics, generate_replication,
                                make_sim_model, normal_density, run_benchmark)

GRID = dense_grid()


def l2_inner(f, g, grid=GRID):
    w = np.full(grid.size, grid[1] - grid[0])
    w[[0, -1]] *= 0.5
    return float(np.sum(w * f * g))


def test_normal_density_peak_value():
    assert normal_density(0.3, 0.3, 0.1) == pytest.approx(1 / (0.1 * math.sqrt(2 * math.pi)),
                                                          rel=1e-15)
    assert normal_density(0.3, 0.3, 0.1) == pytest.approx(3.98942, abs=1e-5)


def test_normal_density_mode_and_symmetry():
    t = np.linspace(-1, 2, 3001)
    f = normal_density(t, 0.4, 0.2)
    assert t[np.argmax(f)] == pytest.approx(0.4, abs=1e-12)
    for d in (0.05, 0.3, 1.1):
        assert normal_density(0.4 + d, 0.4, 0.2) == pytest.approx(normal_density(0.4 - d, 0.4, 0.2),
                                                                  rel=1e-14)


@pytest.mark.parametrize("b", [0.0, -0.1])
def test_normal_density_rejects_nonpositive_scale(b):
    with pytest.raises(ValueError):
        normal_density(0.0, 0.0, b)


def test_model_one():
    spec = make_sim_model(1)
    assert (spec.p, spec.q, spec.r) == (1, 1, 0)
    assert spec.phi[0] is spec.psi[0]
    assert variance_ratio_amplitude(spec.gamma, spec.lam) == pytest.approx(0.80, abs=1e-15)
    assert (spec.I, spec.J, spec.nu, spec.sigma2) == (10, 5, 20, 0.01)
    np.testing.assert_allclose(spec.grid, np.linspace(0, 1, 20))


def test_model_five_warping():
    spec = make_sim_model(5)
    assert spec.tau0 == (0.3, 0.6)
    np.testing.assert_allclose(spec.Sigma, 0.04 * np.eye(2), rtol=1e-15)
    np.testing.assert_allclose(spec.Omega, 0.01 * np.eye(2), rtol=1e-15)
    assert variance_ratio_warping(spec.Sigma, spec.Omega) == pytest.approx(0.80, abs=1e-15)


@pytest.mark.parametrize("model_id,p,q,r,scores,same", [
    (1, 1, 1, 0, "normal", True), (2, 1, 1, 0, "normal", False), (3, 1, 1, 1, "normal", True),
    (4, 1, 1, 1, "normal", False), (5, 1, 1, 2, "normal", True), (6, 1, 1, 2, "normal", False),
    (7, 1, 1, 1, "t4", False), (8, 1, 1, 1, "contaminated", False),
    (9, 2, 2, 1, "normal", True), (10, 2, 2, 2, "normal", True),
])
def test_model_table(model_id, p, q, r, scores, same):
    spec = make_sim_model(model_id)
    assert (spec.p, spec.q, spec.r, spec.scores) == (p, q, r, scores)
    assert (spec.phi[0] is spec.psi[0]) == same
    if r == 1:
        assert spec.tau0 == (0.3,)
        np.testing.assert_allclose(np.diag(spec.Sigma), [0.04])
        np.testing.assert_allclose(np.diag(spec.Omega), [0.01])
    assert variance_ratio_amplitude(spec.gamma, spec.lam) == pytest.approx(0.80, abs=1e-15)


@pytest.mark.parametrize("model_id", [0, 11])
def test_make_sim_model_rejects_unknown_id(model_id):
    with pytest.raises(ValueError):
        make_sim_model(model_id)


def test_mean_function():
    spec = make_sim_model(3)
    t = np.linspace(0, 1, 7)
    np.testing.assert_allclose(spec.mu(t), 0.6 * normal_density(t, 0.3, 0.1)
                               + 0.4 * normal_density(t, 0.6, 0.1), rtol=1e-15)


def test_model_nine_components_nearly_orthonormal():
    spec = make_sim_model(9)
    f1, f2 = spec.phi[0](GRID), spec.phi[1](GRID)
    assert math.sqrt(l2_inner(f1, f1)) == pytest.approx(1.0, abs=0.01)
    assert abs(l2_inner(f1, f2)) < 0.01
    expected = (normal_density(GRID, 0.6, 0.1) / 1.68 - 0.105 * f1) / 0.99
    np.testing.assert_allclose(f2, expected, rtol=1e-14)


def test_model_one_score_variance():
    spec = replace(make_sim_model(1), J=1, nu=2)
    _, truth = generate_replication(spec, 0, I=100_000)
    assert np.var(truth["u"]) == pytest.approx(0.04, rel=0.02)
    assert truth["eta"].shape == (100_000, 0) and truth["xi"].shape == (100_000, 1, 0)


def test_model_eight_contaminated_score_variance():
    spec = replace(make_sim_model(8), J=1, nu=2)
    _, truth = generate_replication(spec, 1, I=100_000)
    assert np.var(truth["u"]) == pytest.approx(1.4 * 0.04, rel=0.03)
    assert spec.score_variances()[0][0] == pytest.approx(1.4 * 0.04, rel=1e-14)


def test_model_seven_score_variance():
    spec = make_sim_model(7)
    u = _draw_scores(np.random.default_rng(2), spec, spec.gamma, (200_000, 1))
    assert np.var(u) == pytest.approx(2 * 0.04, rel=0.05)


@pytest.mark.parametrize("model_id", [1, 2, 3, 4, 5, 6, 9, 10])
def test_drawn_scores_reproduce_amplitude_ratio(model_id):
    spec = make_sim_model(model_id)
    rng = np.random.default_rng(model_id)
    u = _draw_scores(rng, spec, spec.gamma, (100_000, spec.p))
    v = _draw_scores(rng, spec, spec.lam, (100_000, spec.q))
    h = variance_ratio_amplitude(u.var(axis=0), v.var(axis=0))
    assert h == pytest.approx(0.80, abs=0.01)


def test_replication_is_deterministic_and_shaped():
    spec = make_sim_model(10)
    d1, t1 = generate_replication(spec, 9)
    d2, t2 = generate_replication(spec, 9)
    assert d1.I == 10 and d1.J_i == [5] * 10
    for g1, g2 in zip(d1.groups, d2.groups):
        np.testing.assert_array_equal(g1.y, g2.y)
        np.testing.assert_array_equal(g1.t, g2.t)
    for key in ("eta", "xi", "u", "v"):
        np.testing.assert_array_equal(t1[key], t2[key])
    assert t1["xi"].shape == (10, 5, 2) and t1["v"].shape == (10, 5, 2)
    d3, _ = generate_replication(spec, 10)
    assert not np.array_equal(d1.groups[0].y, d3.groups[0].y)


def test_no_noise_no_scores_recovers_warped_mean():
    spec = replace(make_sim_model(3), sigma2=0.0, gamma=(0.0,), lam=(0.0,),
                   Sigma=np.zeros((1, 1)), Omega=np.zeros((1, 1)))
    data, _ = generate_replication(spec, 0)
    for g in data.groups:
        for j in range(g.J):
            t, y = g.subject(j)
            np.testing.assert_allclose(y, spec.mu(t), atol=1e-12)


# ---------------------------------------------------------------------------
# Error functionals


def test_metrics_of_exact_estimates_vanish():
    f0 = np.sin(3 * GRID)
    rep = error_metrics(np.tile(f0, (4, 1)), f0)
    assert (rep.bias, rep.sd, rep.rmse, rep.n) == (0.0, 0.0, 0.0, 4)


def test_metrics_of_fixed_offset():
    f0 = np.cos(GRID)
    g = GRID ** 2
    rep = error_metrics(np.tile(f0 + g, (3, 1)), f0)
    assert rep.bias == pytest.approx(math.sqrt(1 / 5), abs=1e-6)
    assert rep.sd == pytest.approx(0.0, abs=1e-14)


def test_metrics_two_replication_hand_case():
    # estimates t and 3t around a zero truth: mean 2t, deviations +-t
    rep = error_metrics(np.vstack([GRID, 3 * GRID]), np.zeros_like(GRID))
    assert rep.bias == pytest.approx(math.sqrt(4 / 3), abs=1e-6)
    assert rep.sd == pytest.approx(math.sqrt(1 / 3), abs=1e-6)
    assert rep.rmse == pytest.approx(math.sqrt(5 / 3), abs=1e-6)


def test_metrics_errors():
    with pytest.raises(ValueError):
        error_metrics(np.zeros((1, GRID.size)), np.zeros(GRID.size))
    with pytest.raises(ValueError):
        error_metrics(np.zeros((2, 10)), np.zeros(GRID.size))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_metrics_identity_and_sign_invariance(seed, R):
    rng = np.random.default_rng(seed)
    grid = np.linspace(0, 1, 200)
    f0 = normal_density(grid, 0.3, 0.1) / 1.68
    F = f0 * rng.uniform(0.5, 1.5, (R, 1)) + 0.1 * rng.standard_normal((R, 200))
    rep = error_metrics(F, f0, grid, align=True)
    assert rep.rmse ** 2 == pytest.approx(rep.bias ** 2 + rep.sd ** 2, abs=1e-10)
    assert min(rep.bias, rep.sd, rep.rmse) >= 0
    flips = rng.choice([-1.0, 1.0], R)
    flipped = error_metrics(F * flips[:, None], f0, grid, align=True)
    assert flipped.bias == pytest.approx(rep.bias, abs=1e-12)
    assert flipped.sd == pytest.approx(rep.sd, abs=1e-12)


def test_paper_literal_alignment_scales_by_inner_product():
    f0 = np.sqrt(2) * np.sin(np.pi * GRID)
    F = np.vstack([-0.5 * f0, 2 * f0])
    lit = error_metrics(F, f0, align=True, paper_literal=True)
    sign = error_metrics(F, f0, align=True)
    assert sign.bias == pytest.approx(abs((0.5 + 2) / 2 - 1), abs=1e-5)
    # inner products -0.5 and 2 give 0.25 f0 and 4 f0
    assert lit.bias == pytest.approx(abs((0.25 + 4) / 2 - 1), abs=1e-5)


# ---------------------------------------------------------------------------
# Benchmark harness


FAST = FitConfig(n_interior_knots=6, em_max_iter=12, em_min_iter=4, mc_start=40, mc_cap=80)


def test_benchmark_is_deterministic_and_complete():
    a = run_benchmark([1, 3], 2, ("C", "ML"), seed=5, config=FAST)
    b = run_benchmark([1, 3], 2, ("C", "ML"), seed=5, config=FAST)
    rows_a, rows_b = list(a.rows()), list(b.rows())
    assert rows_a == rows_b
    assert {(r["model"], r["target"], r["estimator"]) for r in rows_a} == {
        (m, t, e) for m in (1, 3) for t in ("mu", "phi1", "psi1") for e in ("C", "ML")}
    for r in rows_a:
        assert r["rmse"] ** 2 == pytest.approx(r["bias"] ** 2 + r["sd"] ** 2, abs=1e-10)
        assert r["n_ok"] + r["n_failed"] == 2


def test_benchmark_order_and_validation():
    table = run_benchmark([2], 2, ("C",), seed=0, config=FAST)
    assert [r["target"] for r in table.rows()] == ["mu", "phi1", "psi1"]
    assert table.failures == {(2, "C"): 0}
    with pytest.raises(ValueError):
        run_benchmark([1], 1)
