"""B-spline amplitude basis, Gram matrix and Gram-metric orthonormalization."""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis on ``[a, b]``.

    Parameters
    ----------
    degree : int
        Polynomial degree (3 for cubic splines).
    interval : tuple of float
        Endpoints ``(a, b)``.
    interior_knots : tuple of float
        Strictly increasing knots strictly inside ``(a, b)``.
    """

    degree: int
    interval: tuple
    interior_knots: tuple

    def __post_init__(self):
        a, b = self.interval
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise ValueError(f"invalid interval {self.interval!r}")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        k = np.asarray(self.interior_knots, dtype=float)
        if k.size and (np.any(np.diff(k) <= 0) or k[0] <= a or k[-1] >= b):
            raise ValueError("interior knots must be strictly increasing inside (a, b)")

    @property
    def a(self):
        return float(self.interval[0])

    @property
    def b(self):
        return float(self.interval[1])

    @property
    def dimension(self):
        return len(self.interior_knots) + self.degree + 1

    @property
    def knots(self):
        """Full clamped knot vector."""
        d = self.degree
        return np.concatenate(([self.a] * (d + 1), np.asarray(self.interior_knots, float),
                               [self.b] * (d + 1)))

    def to_dict(self):
        return {"degree": self.degree, "interval": [self.a, self.b],
                "interior_knots": [float(x) for x in self.interior_knots]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["degree"]), tuple(d["interval"]), tuple(d["interior_knots"]))


def make_basis(degree, n_interior_knots, interval):
    """Basis with ``n_interior_knots`` equispaced interior knots.

    The dimension is ``n_interior_knots + degree + 1``; a cubic basis with 10
    interior knots on [0, 1] has 14 functions.
    """
    if degree < 0 or n_interior_knots < 0:
        raise ValueError("degree and n_interior_knots must be nonnegative")
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ValueError(f"invalid interval {interval!r}")
    inner = np.linspace(a, b, n_interior_knots + 2)[1:-1]
    return SplineBasis(int(degree), (a, b), tuple(float(x) for x in inner))


def _check_domain(basis, t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tol = 1e-12 * (basis.b - basis.a)
    if np.any(t < basis.a - tol) or np.any(t > basis.b + tol) or not np.all(np.isfinite(t)):
        raise ValueError(f"time points outside [{basis.a}, {basis.b}]")
    return np.clip(t, basis.a, basis.b)


def eval_basis(basis, t_points):
    """Evaluate the basis at ``t_points``; returns a ``(len(t), s)`` matrix."""
    t = _check_domain(basis, t_points)
    return kernels.bspline_design(basis.knots, basis.degree, t)


def gram_matrix(basis):
    """Exact ``J = int b(t) b(t)^T dt`` by per-span Gauss-Legendre quadrature."""
    n_nodes = (2 * basis.degree + 1 + 1) // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    breaks = np.unique(basis.knots)
    s = basis.dimension
    J = np.zeros((s, s))
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (hi - lo)
        tq = lo + half * (x + 1.0)
        B = kernels.bspline_design(basis.knots, basis.degree, tq)
        J += (B * (half * w)[:, None]).T @ B
    return 0.5 * (J + J.T)


def gram_orthonormalize(A, W, J):
    """Rewrite the coefficient covariance ``A W A^T`` in a J-orthonormal frame.

    Returns ``(A_orth, variances)`` with ``A_orth^T J A_orth = I_k``,
    ``A_orth diag(variances) A_orth^T = A W A^T`` and variances descending.
    Each column's largest-magnitude entry is made positive.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    s, k = A.shape
    if k > s:
        raise ValueError(f"cannot orthonormalize {k} components in dimension {s}")
    if k == 0:
        return np.zeros((s, 0)), np.zeros(0)
    L = np.linalg.cholesky(J)
    Q, R = np.linalg.qr(L.T @ A)
    M = R @ (0.5 * (W + W.T)) @ R.T
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    E = Q @ vecs[:, order]
    A_orth = np.linalg.solve(L.T, E)
    idx = np.argmax(np.abs(A_orth), axis=0)
    signs = np.sign(A_orth[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return A_orth * signs, vals
