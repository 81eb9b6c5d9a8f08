"""The compiled and pure-Python kernels must agree."""

import numpy as np
import pytest

from wfanova import kernels
from wfanova.model import _kernel_args

from oracles import tiny_data, tiny_params

backends = kernels.available_backends()
pytestmark = pytest.mark.skipif("cython" not in backends, reason="compiled kernels not built")
PY, CY = backends["python"], backends.get("cython")


def test_backend_names():
    assert PY.BACKEND == "python"
    assert CY.BACKEND == "cython"
    assert kernels.BACKEND in backends


def test_bspline_design_agrees():
    knots = np.array([0, 0, 0, 0, 0.2, 0.5, 0.7, 1, 1, 1, 1.0])
    t = np.linspace(0, 1, 513)
    np.testing.assert_allclose(PY.bspline_design(knots, 3, t), CY.bspline_design(knots, 3, t),
                               atol=1e-15)


def test_warp_primitives_agree():
    rng = np.random.default_rng(0)
    for _ in range(50):
        theta = rng.normal(0, 2, 3)
        tau_p, tau_c = PY.jupp_inverse(theta, 1.0, 19.0), CY.jupp_inverse(theta, 1.0, 19.0)
        np.testing.assert_allclose(tau_p, tau_c, rtol=0, atol=1e-14)
        x = np.array([1.0, 5.0, 9.0, 13.0, 19.0])
        y = np.concatenate(([1.0], tau_p, [19.0]))
        m_p, m_c = PY.fc_slopes(x, y), CY.fc_slopes(x, y)
        np.testing.assert_allclose(m_p, m_c, rtol=1e-14)
        t = rng.uniform(1, 19, 40)
        np.testing.assert_allclose(PY.hermite_eval(x, y, m_p, t), CY.hermite_eval(x, y, m_p, t),
                                   rtol=1e-14)
        np.testing.assert_allclose(PY.hermite_invert(x, y, m_p, t),
                                   CY.hermite_invert(x, y, m_p, t), atol=1e-11)
        tau0 = np.array([5.0, 9.0, 13.0])
        np.testing.assert_allclose(PY.warped_times(theta, 1.0, 19.0, tau0, t),
                                   CY.warped_times(theta, 1.0, 19.0, tau0, t), atol=1e-11)


@pytest.fixture(scope="module")
def instance():
    params = tiny_params()
    data, _ = tiny_data(params, I=2, J=3, nu=6)
    return params, data.groups[0]


def test_group_logliks_agree(instance):
    params, group = instance
    rng = np.random.default_rng(1)
    etas = rng.normal(0, 0.3, (20, 1))
    xis = rng.normal(0, 0.2, (20, group.J, 1))
    args = _kernel_args(params, group)
    np.testing.assert_allclose(PY.group_logliks(*args, etas, xis),
                               CY.group_logliks(*args, etas, xis), rtol=1e-11)


def test_group_moments_agree(instance):
    params, group = instance
    eta, xi = np.array([0.1]), np.array([[0.05], [-0.2], [0.0]])
    args = _kernel_args(params, group)
    for a, b in zip(PY.group_moments(*args, eta, xi), CY.group_moments(*args, eta, xi)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)


def _chain(mod, params, group, n=60, n_burn=20):
    r, J, p, q, s = params.r, group.J, params.p, params.q, params.s
    K = 1 + p + q
    rng = np.random.default_rng(5)
    normals = rng.standard_normal((n, J + 1, r))
    uniforms = rng.uniform(size=(n, J + 1))
    out = {"H": np.zeros((K * s, K * s)), "g": np.zeros(K * s), "Euu": np.zeros((p, p)),
           "Eu": np.zeros(p), "Evv": np.zeros((J, q, q)), "Ev": np.zeros((J, q)),
           "Eee": np.zeros((r, r)), "Ee": np.zeros(r), "Exx": np.zeros((J, r, r)),
           "Ex": np.zeros((J, r)), "X1": np.zeros(r * (J + 1)),
           "X2": np.zeros((r * (J + 1), r * (J + 1))), "acc": np.zeros(2)}
    L = np.linalg.cholesky(params.Sigma)
    M = np.linalg.cholesky(params.Omega)
    eta, xi, step = np.zeros(r), np.zeros((J, r)), np.array([1.0, 1.0])
    ll = mod.group_chain(*_kernel_args(params, group), L, np.linalg.inv(params.Sigma), M,
                         np.linalg.inv(params.Omega), eta, xi, step, normals, uniforms,
                         n_burn, out)
    return ll, eta, xi, step, out


def test_group_chain_agrees(instance):
    params, group = instance
    ll_p, eta_p, xi_p, step_p, out_p = _chain(PY, params, group)
    ll_c, eta_c, xi_c, step_c, out_c = _chain(CY, params, group)
    assert ll_p == pytest.approx(ll_c, rel=1e-10)
    np.testing.assert_allclose(eta_p, eta_c, atol=1e-12)
    np.testing.assert_allclose(xi_p, xi_c, atol=1e-12)
    np.testing.assert_allclose(step_p, step_c, rtol=1e-12)
    for key in out_p:
        np.testing.assert_allclose(out_p[key], out_c[key], rtol=1e-8, atol=1e-10, err_msg=key)
    assert 0 < out_p["acc"][0] <= 1
