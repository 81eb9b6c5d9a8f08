"""Data containers, the parameter set, and exact Gaussian computations given warps."""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import kernels
from .basis import SplineBasis, eval_basis, gram_matrix
from .warp import KnotVector, jupp_inverse, warp_from_theta, warp_eval


class ComputationError(RuntimeError):
    """Numerical failure (singular covariance, non-finite likelihood, ...)."""


@dataclass(frozen=True)
class GroupData:
    """Observations of one group, stored contiguously with subject offsets."""

    t: np.ndarray
    y: np.ndarray
    offsets: np.ndarray
    subject_ids: tuple = ()

    @property
    def J(self):
        return self.offsets.size - 1

    @property
    def n_obs(self):
        return self.t.size

    def subject(self, j):
        lo, hi = self.offsets[j], self.offsets[j + 1]
        return self.t[lo:hi], self.y[lo:hi]

    def nu(self):
        return np.diff(self.offsets)


@dataclass(frozen=True)
class ObservationSet:
    """Irregular longitudinal data: ``I`` groups of ``J_i`` subjects each."""

    groups: tuple
    interval: tuple
    group_ids: tuple = ()

    def __post_init__(self):
        a, b = self.interval
        if not a < b:
            raise ValueError("invalid interval")
        for g in self.groups:
            if np.any(np.diff(g.offsets) < 1):
                raise ValueError("every subject needs at least one observation")
            if g.t.size and (g.t.min() < a or g.t.max() > b):
                raise ValueError("time points outside the interval")
            for j in range(g.J):
                tj, _ = g.subject(j)
                if np.any(np.diff(tj) < 0):
                    raise ValueError("subject grids must be sorted")

    @property
    def I(self):
        return len(self.groups)

    @property
    def J_i(self):
        return [g.J for g in self.groups]

    @property
    def n_subjects(self):
        return sum(self.J_i)

    @property
    def n_obs(self):
        return sum(g.n_obs for g in self.groups)

    @property
    def a(self):
        return float(self.interval[0])

    @property
    def b(self):
        return float(self.interval[1])

    def is_balanced(self):
        return len(set(self.J_i)) == 1

    @classmethod
    def from_subjects(cls, subjects, interval, group_ids=None, subject_ids=None):
        """Build from ``subjects[i][j] = (t, y)``."""
        groups = []
        for i, grp in enumerate(subjects):
            ts = [np.asarray(t, float) for t, _ in grp]
            ys = [np.asarray(y, float) for _, y in grp]
            offsets = np.concatenate(([0], np.cumsum([t.size for t in ts]))).astype(np.int64)
            sids = tuple(subject_ids[i]) if subject_ids is not None else tuple(range(len(ts)))
            groups.append(GroupData(np.concatenate(ts), np.concatenate(ys), offsets, sids))
        ids = tuple(group_ids) if group_ids is not None else tuple(range(len(groups)))
        return cls(tuple(groups), (float(interval[0]), float(interval[1])), ids)

    def subset(self, indices):
        """Groups selected by ``indices`` (repeats allowed, as in a bootstrap)."""
        groups = tuple(self.groups[i] for i in indices)
        ids = tuple(f"{self.group_ids[i]}#{k}" for k, i in enumerate(indices))
        return ObservationSet(groups, self.interval, ids)

    def with_times(self, new_t):
        """Same observations on replaced time grids (``new_t[i]`` per group)."""
        groups = tuple(replace(g, t=np.asarray(t, float)) for g, t in zip(self.groups, new_t))
        return ObservationSet(groups, self.interval, self.group_ids)

    def iter_subjects(self):
        for i, g in enumerate(self.groups):
            for j in range(g.J):
                yield i, j, g.subject(j)


@dataclass(frozen=True)
class WarpEffects:
    """Warp effects of one group: ``eta`` (r,) and ``xi`` (J, r)."""

    eta: np.ndarray
    xi: np.ndarray

    def theta(self, theta0):
        return theta0[None, :] + self.eta[None, :] + self.xi

    @classmethod
    def zeros(cls, r, J):
        return cls(np.zeros(r), np.zeros((J, r)))


@dataclass(frozen=True)
class AmplitudeScores:
    """Amplitude scores of one group: ``u`` (p,) and ``v`` (J, q)."""

    u: np.ndarray
    v: np.ndarray


@dataclass
class ModelParams:
    """Full parameter set of the warped one-way model."""

    basis: SplineBasis
    knots: KnotVector
    m: np.ndarray
    C: np.ndarray
    D: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    Sigma: np.ndarray
    Omega: np.ndarray
    sigma2: float
    flags: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.C.shape[1]

    @property
    def q(self):
        return self.D.shape[1]

    @property
    def r(self):
        return self.knots.r

    @property
    def s(self):
        return self.basis.dimension

    @cached_property
    def J(self):
        return gram_matrix(self.basis)

    @cached_property
    def theta0(self):
        return np.asarray(self.knots.theta0, dtype=float)

    def validate(self, tol=1e-8):
        p, q, r = self.p, self.q, self.r
        if self.m.shape != (self.s,):
            raise ValueError("m has wrong shape")
        if p and np.max(np.abs(self.C.T @ self.J @ self.C - np.eye(p))) > tol:
            raise ValueError("C is not J-orthonormal")
        if q and np.max(np.abs(self.D.T @ self.J @ self.D - np.eye(q))) > tol:
            raise ValueError("D is not J-orthonormal")
        for name, v in (("gamma", self.gamma), ("lam", self.lam)):
            if v.size and (np.any(v <= 0) or np.any(np.diff(v) > 0)):
                raise ValueError(f"{name} must be positive and descending")
        for name, M in (("Sigma", self.Sigma), ("Omega", self.Omega)):
            if M.shape != (r, r) or (r and np.min(np.linalg.eigvalsh(M)) < 1e-10 * (1 - 1e-6)):
                raise ValueError(f"{name} must be r x r positive definite")
        if not self.sigma2 >= 1e-12:
            raise ValueError("sigma2 below floor")
        return self

    def mean_function(self, t):
        return eval_basis(self.basis, t) @ self.m

    def phi(self, t):
        return eval_basis(self.basis, t) @ self.C

    def psi(self, t):
        return eval_basis(self.basis, t) @ self.D

    def warp(self, theta):
        return warp_from_theta(self.knots, theta)

    def to_dict(self):
        return {
            "basis": self.basis.to_dict(),
            "knots": self.knots.to_dict(),
            "m": self.m.tolist(),
            "C": self.C.tolist(),
            "D": self.D.tolist(),
            "gamma": self.gamma.tolist(),
            "lambda": self.lam.tolist(),
            "Sigma": self.Sigma.tolist(),
            "Omega": self.Omega.tolist(),
            "sigma2": float(self.sigma2),
        }

    @classmethod
    def from_dict(cls, d):
        basis = SplineBasis.from_dict(d["basis"])
        knots = KnotVector.from_dict(d["knots"])
        s, r = basis.dimension, len(knots.tau0)

        def mat(x, rows):
            a = np.asarray(x, dtype=float)
            return a.reshape(rows, -1) if a.size else np.zeros((rows, 0))

        return cls(basis, knots, np.asarray(d["m"], float), mat(d["C"], s), mat(d["D"], s),
                   np.asarray(d["gamma"], float), np.asarray(d["lambda"], float),
                   np.asarray(d["Sigma"], float).reshape(r, r),
                   np.asarray(d["Omega"], float).reshape(r, r), float(d["sigma2"]))


def _kernel_args(params, group):
    return (np.ascontiguousarray(group.t, float), np.ascontiguousarray(group.y, float),
            np.ascontiguousarray(group.offsets, np.int64), params.basis.knots,
            params.basis.degree, params.basis.a, params.basis.b,
            np.asarray(params.knots.tau0, float), params.theta0, params.m,
            np.ascontiguousarray(params.C), np.ascontiguousarray(params.D),
            params.gamma, params.lam, float(params.sigma2))


def group_loglik_given_warps(params, group, warps):
    """Log density of the stacked group vector with amplitude effects integrated out."""
    r, J = params.r, group.J
    etas = np.asarray(warps.eta, float).reshape(1, r)
    xis = np.asarray(warps.xi, float).reshape(1, J, r)
    try:
        ll = kernels.group_logliks(*_kernel_args(params, group), etas, xis)[0]
    except np.linalg.LinAlgError as exc:
        raise ComputationError(f"singular group covariance: {exc}") from exc
    if not np.isfinite(ll):
        raise ComputationError("non-finite group log-likelihood")
    return float(ll)


@dataclass(frozen=True)
class AmplitudeMoments:
    """Gaussian conditional of ``(u, v_1..v_J)`` given the data and warps."""

    loglik: float
    mean: np.ndarray
    cov: np.ndarray
    p: int
    q: int

    @property
    def J(self):
        return (self.mean.size - self.p) // self.q if self.q else 0

    @property
    def mean_u(self):
        return self.mean[:self.p]

    @property
    def mean_v(self):
        return self.mean[self.p:].reshape(-1, self.q) if self.q else np.zeros((0, 0))

    @property
    def uu(self):
        p = self.p
        return self.cov[:p, :p] + np.outer(self.mean[:p], self.mean[:p])

    def vv(self, j):
        sl = slice(self.p + j * self.q, self.p + (j + 1) * self.q)
        return self.cov[sl, sl] + np.outer(self.mean[sl], self.mean[sl])

    def uv(self, j):
        p = self.p
        sl = slice(p + j * self.q, p + (j + 1) * self.q)
        return self.cov[:p, sl] + np.outer(self.mean[:p], self.mean[sl])


def amplitude_conditional_moments(params, group, warps):
    """Exact conditional mean and covariance of amplitude scores given warps."""
    r, J = params.r, group.J
    try:
        ll, mean, cov = kernels.group_moments(*_kernel_args(params, group),
                                              np.asarray(warps.eta, float).reshape(r),
                                              np.asarray(warps.xi, float).reshape(J, r))
    except np.linalg.LinAlgError as exc:
        raise ComputationError(f"singular group covariance: {exc}") from exc
    return AmplitudeMoments(float(ll), np.asarray(mean), np.asarray(cov), params.p, params.q)


def warped_design(params, t, theta):
    """``B*`` for one subject: basis rows at ``w^{-1}(t)``."""
    if params.r:
        ts = kernels.warped_times(np.asarray(theta, float), params.basis.a, params.basis.b,
                                  np.asarray(params.knots.tau0, float), np.asarray(t, float))
    else:
        ts = np.asarray(t, float)
    return eval_basis(params.basis, np.clip(ts, params.basis.a, params.basis.b))


def sqrt_psd(M):
    """Symmetric square root factor ``L`` with ``L L^T = M`` for PSD ``M``."""
    M = np.atleast_2d(np.asarray(M, float))
    if M.size == 0:
        return M
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def simulate_from_model(params, I, J, grid, seed):
    """Draw a balanced dataset from the generative hierarchy.

    Returns ``(data, truth)`` where ``truth`` holds per-group
    :class:`WarpEffects` and :class:`AmplitudeScores`.
    """
    rng = np.random.default_rng(seed)
    grid = np.asarray(grid, dtype=float)
    r, p, q = params.r, params.p, params.q
    Ls, Lo = sqrt_psd(params.Sigma), sqrt_psd(params.Omega)
    subjects, warps, scores = [], [], []
    for _ in range(I):
        eta = Ls @ rng.standard_normal(r) if r else np.zeros(0)
        xi = np.array([Lo @ rng.standard_normal(r) for _ in range(J)]) if r else np.zeros((J, 0))
        u = np.sqrt(params.gamma) * rng.standard_normal(p)
        v = np.sqrt(params.lam)[None, :] * rng.standard_normal((J, q))
        grp = []
        for j in range(J):
            theta = params.theta0 + eta + xi[j]
            B = warped_design(params, grid, theta)
            x = B @ (params.m + params.C @ u + params.D @ v[j])
            y = x + np.sqrt(params.sigma2) * rng.standard_normal(grid.size)
            grp.append((grid.copy(), y))
        subjects.append(grp)
        warps.append(WarpEffects(eta, xi.reshape(J, r)))
        scores.append(AmplitudeScores(u, v))
    data = ObservationSet.from_subjects(subjects, (params.basis.a, params.basis.b))
    return data, {"warps": warps, "scores": scores}


def evaluate_warp(params, theta, t):
    """``w(t)`` for Jupp coordinates ``theta``."""
    if params.r == 0:
        return np.asarray(t, float)
    return warp_eval(warp_from_theta(params.knots, theta), t)


__all__ = [
    "AmplitudeMoments", "AmplitudeScores", "ComputationError", "GroupData", "ModelParams",
    "ObservationSet", "WarpEffects", "amplitude_conditional_moments", "evaluate_warp",
    "group_loglik_given_warps", "jupp_inverse", "simulate_from_model", "sqrt_psd",
    "warped_design",
]
