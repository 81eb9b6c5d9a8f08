"""Monotone Hermite-spline warping family and the Jupp landmark transform."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .basis import eval_basis


@dataclass(frozen=True)
class KnotVector:
    """Reference landmarks ``tau0`` inside ``(a, b)``."""

    a: float
    b: float
    tau0: tuple

    def __post_init__(self):
        _check_increasing(self.tau0, self.a, self.b)

    @property
    def r(self):
        return len(self.tau0)

    @property
    def theta0(self):
        return jupp_forward(self.tau0, self.a, self.b)

    def to_dict(self):
        return {"a": float(self.a), "b": float(self.b), "tau0": [float(x) for x in self.tau0]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["a"]), float(d["b"]), tuple(d["tau0"]))


@dataclass(frozen=True)
class WarpFunction:
    """Piecewise-cubic Hermite map of ``[a, b]`` onto itself.

    ``nodes`` are ``(a, tau0, b)``, ``values`` are ``(a, tau, b)`` and
    ``slopes`` are the Fritsch-Carlson derivatives at the nodes.
    """

    nodes: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    @property
    def a(self):
        return float(self.nodes[0])

    @property
    def b(self):
        return float(self.nodes[-1])


def _check_increasing(tau, a, b):
    tau = np.asarray(tau, dtype=float)
    if not a < b:
        raise ValueError(f"invalid interval ({a}, {b})")
    full = np.concatenate(([a], tau, [b]))
    if not np.all(np.isfinite(full)) or np.any(np.diff(full) <= 0):
        raise ValueError("landmarks must satisfy a < tau_1 < ... < tau_r < b")
    return tau


def jupp_forward(tau, a, b):
    """Map increasing landmarks in ``(a, b)`` to unconstrained log gap ratios."""
    tau = _check_increasing(tau, a, b)
    gaps = np.diff(np.concatenate(([a], tau, [b])))
    return np.log(gaps[1:] / gaps[:-1])


def jupp_inverse(theta, a, b):
    """Inverse Jupp transform; total on finite ``theta``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if theta.size == 0:
        return np.zeros(0)
    return kernels.jupp_inverse(theta, float(a), float(b))


def fc_slopes(x, y):
    """Fritsch-Carlson node derivatives for strictly increasing data."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or x.shape != y.shape:
        raise ValueError("need at least two nodes of matching shape")
    if np.any(np.diff(x) <= 0):
        raise ValueError("node abscissae must be strictly increasing")
    if np.any(np.diff(y) <= 0):
        raise ValueError("node ordinates must be strictly increasing")
    return kernels.fc_slopes(x, y)


def make_warp(knots, tau):
    """Warp with ``w(a)=a``, ``w(b)=b`` and ``w(tau0_j) = tau_j``."""
    tau = _check_increasing(tau, knots.a, knots.b)
    if tau.size != knots.r:
        raise ValueError(f"expected {knots.r} landmarks, got {tau.size}")
    x = np.concatenate(([knots.a], np.asarray(knots.tau0, float), [knots.b]))
    y = np.concatenate(([knots.a], tau, [knots.b]))
    return WarpFunction(x, y, fc_slopes(x, y))


def warp_from_theta(knots, theta):
    return make_warp(knots, jupp_inverse(theta, knots.a, knots.b))


def _domain(w, t):
    t = np.asarray(t, dtype=float)
    tol = 1e-12 * (w.b - w.a)
    if np.any(t < w.a - tol) or np.any(t > w.b + tol) or not np.all(np.isfinite(t)):
        raise ValueError(f"argument outside [{w.a}, {w.b}]")
    return np.clip(t, w.a, w.b)


def warp_eval(w, t):
    t = _domain(w, t)
    out = kernels.hermite_eval(w.nodes, w.values, w.slopes, np.atleast_1d(t))
    return out.reshape(np.shape(t)) if np.ndim(t) else float(out[0])


def warp_invert(w, y):
    """Solve ``w(t) = y`` on each segment by bracketed Newton iteration."""
    y = _domain(w, y)
    out = kernels.hermite_invert(w.nodes, w.values, w.slopes, np.atleast_1d(y))
    return out.reshape(np.shape(y)) if np.ndim(y) else float(out[0])


def warped_basis_matrix(basis, w, grid):
    """Rows ``b(w^{-1}(t_k))^T``."""
    return eval_basis(basis, warp_invert(w, np.asarray(grid, dtype=float)))
