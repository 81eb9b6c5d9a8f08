"""Estimators: Monte-Carlo EM for the warped model, common ANOVA and two-step.

The E-step integrates the amplitude scores analytically and samples the warp
effects of each group with a Metropolis-within-Gibbs chain; amplitude moments
are Rao-Blackwellized. The M-step is closed form on an unconstrained
reparameterization followed by Gram-metric re-orthonormalization.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from . import kernels
from .basis import SplineBasis, eval_basis, gram_matrix, gram_orthonormalize, make_basis
from .model import ComputationError, ModelParams, _kernel_args
from .warp import KnotVector, warp_from_theta

VARIANCE_FLOOR = 1e-10
SIGMA2_FLOOR = 1e-12


class MCMCDiagnosticsError(ComputationError):
    """Metropolis acceptance collapsed below 1% after adaptation."""


@dataclass(frozen=True)
class FitConfig:
    """Configuration shared by all three estimators.

    ``tau0`` empty means no warping (``r = 0``). The Monte-Carlo size is
    ``mc_start`` for the first ``mc_double_every`` iterations and doubles
    every ``mc_double_every`` iterations after that, up to ``mc_cap``.
    """

    p: int = 1
    q: int = 1
    tau0: tuple = ()
    n_interior_knots: int = 10
    degree: int = 3
    interval: tuple = None
    em_max_iter: int = 200
    em_min_iter: int = 10
    em_tol: float = 1e-6
    mc_start: int = 100
    mc_double_every: int = 20
    mc_cap: int = 1600
    burn_frac: float = 0.2
    final_mc_factor: int = 4
    mh_step: float = 0.25
    penalty_lambda: float = 0.0
    seed: int = 0
    threads: int = None
    register_init: bool = True
    register_sweeps: int = 5
    register_evals: int = 200
    proposal_df: float = 5.0

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise ValueError("p and q must be nonnegative")
        if self.em_tol <= 0 or self.em_max_iter < 1:
            raise ValueError("em_tol must be positive and em_max_iter >= 1")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be nonnegative")
        if not 0 <= self.burn_frac < 1:
            raise ValueError("burn_frac must lie in [0, 1)")
        if self.mc_start < 1 or self.mc_cap < self.mc_start:
            raise ValueError("invalid Monte-Carlo schedule")
        object.__setattr__(self, "tau0", tuple(float(x) for x in self.tau0))
        if np.any(np.diff(self.tau0) <= 0):
            raise ValueError("tau0 must be strictly increasing")

    @property
    def r(self):
        return len(self.tau0)

    def mc_size(self, iteration):
        """Monte-Carlo sample size at 1-based EM ``iteration``."""
        doublings = max(iteration - 1, 0) // self.mc_double_every
        return int(min(self.mc_start * 2 ** min(doublings, 30), self.mc_cap))

    def n_threads(self):
        return self.threads if self.threads else (os.cpu_count() or 1)

    def make_basis(self, data):
        interval = self.interval if self.interval is not None else data.interval
        return make_basis(self.degree, self.n_interior_knots, interval)

    def make_knots(self, data):
        interval = self.interval if self.interval is not None else data.interval
        return KnotVector(float(interval[0]), float(interval[1]), self.tau0)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["tau0"] = list(self.tau0)
        d["interval"] = None if self.interval is None else list(self.interval)
        return d


@dataclass
class ChainState:
    """Current warp effects and proposal scales of one group's chain."""

    eta: np.ndarray
    xi: np.ndarray
    step: np.ndarray

    @classmethod
    def start(cls, r, J, step, eta=None, xi=None):
        eta = np.zeros(r) if eta is None else np.array(eta, dtype=float)
        xi = np.zeros((J, r)) if xi is None else np.array(xi, dtype=float).reshape(J, r)
        return cls(np.ascontiguousarray(eta), np.ascontiguousarray(xi), np.full(2, float(step)))

    def copy(self):
        return ChainState(self.eta.copy(), self.xi.copy(), self.step.copy())


@dataclass
class GroupPosterior:
    """E-step output for one group.

    ``H`` and ``g`` are the Kronecker accumulators of the mean-structure
    least-squares problem; the remaining arrays are posterior first and
    second moments of ``u``, ``v_j``, ``eta`` and ``xi_j``.
    """

    H: np.ndarray
    g: np.ndarray
    Euu: np.ndarray
    Eu: np.ndarray
    Evv: np.ndarray
    Ev: np.ndarray
    Eee: np.ndarray
    Ee: np.ndarray
    Exx: np.ndarray
    Ex: np.ndarray
    acceptance: np.ndarray
    loglik: float
    loglik_var: float
    ess: float
    n_samples: int


@dataclass
class PosteriorSummaries:
    """Per-group conditional moments of the latent effects."""

    groups: list

    @property
    def loglik(self):
        return float(sum(g.loglik for g in self.groups))

    @property
    def loglik_se(self):
        return float(math.sqrt(sum(g.loglik_var for g in self.groups)))

    @property
    def uu_hat(self):
        return [g.Euu for g in self.groups]

    @property
    def vv_hat(self):
        return [g.Evv for g in self.groups]

    @property
    def eta2_hat(self):
        return [g.Eee for g in self.groups]

    @property
    def xi2_hat(self):
        return [g.Exx for g in self.groups]

    @property
    def u_hat(self):
        return [g.Eu for g in self.groups]

    @property
    def v_hat(self):
        return [g.Ev for g in self.groups]

    @property
    def min_ess(self):
        return float(min(g.ess for g in self.groups))


@dataclass
class FitResult:
    """Fitted parameters, traces, posterior summaries and predicted effects."""

    params: ModelParams
    estimator: str
    loglik: float
    loglik_trace: np.ndarray
    loglik_se_trace: np.ndarray
    posterior: PosteriorSummaries
    u_hat: list
    v_hat: list
    eta_hat: list
    xi_hat: list
    theta_hat: list
    converged: bool
    n_iter: int
    config: FitConfig
    flags: dict = field(default_factory=dict)

    @property
    def h_z(self):
        from .inference import variance_ratio_amplitude
        return variance_ratio_amplitude(self.params.gamma, self.params.lam)

    @property
    def h_w(self):
        from .inference import variance_ratio_warping
        return variance_ratio_warping(self.params.Sigma, self.params.Omega)


# ---------------------------------------------------------------------------
# Penalized spline fits used for initialization


def _second_difference(s):
    if s < 3:
        return np.zeros((0, s))
    return np.diff(np.eye(s), n=2, axis=0)


def _penalized_fit(B, y, rho):
    """Least squares with a second-difference penalty scaled by ``rho``."""
    s = B.shape[1]
    BtB = B.T @ B
    P = _second_difference(s)
    P = P.T @ P
    scale = np.trace(BtB) / s if BtB.size else 1.0
    A = BtB + rho * scale * P + 1e-10 * scale * np.eye(s)
    return np.linalg.solve(A, B.T @ y)


def _subject_designs(basis, data, grids):
    out = []
    for i, g in enumerate(data.groups):
        rows = []
        for j in range(g.J):
            lo, hi = g.offsets[j], g.offsets[j + 1]
            rows.append(eval_basis(basis, grids[i][lo:hi]))
        out.append(rows)
    return out


def _mom_warp_covariances(theta, theta0):
    """One-way MANOVA method-of-moments estimates of ``Sigma`` and ``Omega``."""
    r = theta0.size
    x = [np.asarray(th, float).reshape(-1, r) - theta0 for th in theta]
    n_i = np.array([len(xi) for xi in x], dtype=float)
    I, n = len(x), n_i.sum()
    allx = np.vstack(x)
    grand = allx.mean(axis=0)
    means = np.array([xi.mean(axis=0) for xi in x])
    SSB = sum(ni * np.outer(mi - grand, mi - grand) for ni, mi in zip(n_i, means))
    SSW = sum((xi - mi).T @ (xi - mi) for xi, mi in zip(x, means))
    MSW = SSW / max(n - I, 1.0)
    MSB = SSB / max(I - 1, 1.0)
    n0 = (n - (n_i ** 2).sum() / n) / max(I - 1, 1.0)
    return _psd_floor((MSB - MSW) / n0, VARIANCE_FLOOR), _psd_floor(MSW, VARIANCE_FLOOR)


def _psd_floor(M, floor):
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return M
    vals, vecs = np.linalg.eigh(M)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


# ---------------------------------------------------------------------------
# Least-squares registration


@dataclass
class Registration:
    """Per-subject warps found by least-squares registration."""

    theta: list
    mu_coef: np.ndarray
    objective_trace: list
    knots: KnotVector

    def warps(self):
        return [[warp_from_theta(self.knots, th) for th in grp] for grp in self.theta]

    def warped_grids(self, data):
        """``w_ij^{-1}(t_ij)`` for every subject, as per-group flat arrays."""
        a, b = self.knots.a, self.knots.b
        tau0 = np.asarray(self.knots.tau0, float)
        out = []
        for g, th in zip(data.groups, self.theta):
            parts = []
            for j in range(g.J):
                tj, _ = g.subject(j)
                ts = kernels.warped_times(np.asarray(th[j], float), a, b, tau0, tj)
                parts.append(np.clip(ts, a, b))
            out.append(np.concatenate(parts))
        return out


def _registration_objective(theta, knots_vec, degree, a, b, tau0, t, y, mu):
    ts = kernels.warped_times(theta, a, b, tau0, t)
    res = y - kernels.bspline_design(knots_vec, degree, ts) @ mu
    return float(res @ res)


def register_least_squares(data, knots, max_iter=5, *, basis=None, max_evals=200, rho=1e-6):
    """Alternating least-squares registration in Jupp coordinates.

    Each sweep fits the pooled mean curve on the currently registered grids
    and then moves every subject's landmarks by Nelder-Mead to minimize the
    squared residuals of ``y`` against ``mu(w^{-1}(t))``. The total objective
    is nonincreasing across sweeps.

    Parameters
    ----------
    data : ObservationSet
    knots : KnotVector
    max_iter : int
        Number of alternating sweeps.
    basis : SplineBasis, optional
        Basis for the mean curve; cubic with 10 interior knots by default.
    max_evals : int
        Function evaluations per subject and sweep.
    """
    basis = basis or make_basis(3, 10, (knots.a, knots.b))
    a, b = knots.a, knots.b
    tau0 = np.asarray(knots.tau0, float)
    theta0 = np.asarray(knots.theta0, float)
    r = knots.r
    theta = [np.tile(theta0, (g.J, 1)) for g in data.groups]
    reg = Registration(theta, np.zeros(basis.dimension), [], knots)
    kv = basis.knots
    simplex_offsets = np.vstack([np.zeros(r), 0.1 * np.eye(r)]) if r else None
    for _ in range(max_iter):
        grids = reg.warped_grids(data)
        B = eval_basis(basis, np.concatenate(grids))
        y = np.concatenate([g.y for g in data.groups])
        mu = _penalized_fit(B, y, rho)
        res = y - B @ mu
        reg.objective_trace.append(float(res @ res))
        if r == 0:
            break
        total = 0.0
        for i, g in enumerate(data.groups):
            for j in range(g.J):
                tj, yj = g.subject(j)
                args = (kv, basis.degree, a, b, tau0, tj, yj, mu)
                x0 = theta[i][j]
                sol = optimize.minimize(
                    _registration_objective, x0, args=args, method="Nelder-Mead",
                    options={"maxfev": max_evals, "initial_simplex": x0 + simplex_offsets,
                             "xatol": 1e-8, "fatol": 1e-12})
                f0 = _registration_objective(x0, *args)
                if sol.fun < f0:
                    theta[i][j] = sol.x
                    total += sol.fun
                else:
                    total += f0
        reg.objective_trace.append(total)
        reg.mu_coef = mu
    grids = reg.warped_grids(data)
    B = eval_basis(basis, np.concatenate(grids))
    reg.mu_coef = _penalized_fit(B, np.concatenate([g.y for g in data.groups]), rho)
    return reg


# ---------------------------------------------------------------------------
# Initialization


def _amplitude_start(basis, data, grids, p, q):
    """Moment-style starts for ``m, C, D, gamma, lam, sigma2`` on given grids."""
    Jm = gram_matrix(basis)
    s = basis.dimension
    designs = _subject_designs(basis, data, grids)
    Ball = np.vstack([B for rows in designs for B in rows])
    yall = np.concatenate([g.y for g in data.groups])
    if Ball.shape[0] < 1:
        raise ValueError("no observations")
    m = _penalized_fit(Ball, yall, 1e-8)
    coefs, resid, dof = [], 0.0, 0.0
    for i, g in enumerate(data.groups):
        ci = []
        for j in range(g.J):
            B = designs[i][j]
            _, yj = g.subject(j)
            c = _penalized_fit(B, yj - B @ m, 1e-2) if (p or q) else np.zeros(s)
            e = yj - B @ (m + c)
            resid += float(e @ e)
            dof += yj.size
            ci.append(c)
        coefs.append(np.array(ci))
    if p or q:
        n_par = min(s, max(1, int(np.median([g.nu().mean() for g in data.groups]) // 2)))
        dof -= n_par * data.n_subjects
    sigma2 = max(resid / max(dof, 1.0), 1e-6 * float(np.var(yall)) + SIGMA2_FLOOR)

    means = np.array([c.mean(axis=0) for c in coefs])
    within = np.vstack([c - c.mean(axis=0) for c in coefs])
    n, I = data.n_subjects, data.I
    Sw = within.T @ within / max(n - I, 1)
    Sb = np.cov(means.T, bias=False) if I > 1 else np.zeros((s, s))
    Jbar = n / I
    Sb = Sb - Sw / Jbar
    C, gam = _leading_components(Sb, Jm, p)
    D, lam = _leading_components(Sw, Jm, q)
    return m, C, D, gam, lam, sigma2


def _leading_components(S, Jm, k):
    s = S.shape[0]
    if k == 0:
        return np.zeros((s, 0)), np.zeros(0)
    A, vals = gram_orthonormalize(np.eye(s), _psd_floor(S, 0.0), Jm)
    vals = vals[:k]
    floor = max(1e-6 * (vals[0] if vals.size and vals[0] > 0 else 1.0), VARIANCE_FLOOR)
    return A[:, :k], np.maximum(vals, floor)


INIT_STREAM = 2**31 - 1  # RNG stream id reserved for scoring candidate starts


def _identity_start(data, knots, config):
    r = knots.r
    states = [ChainState.start(r, g.J, config.mh_step) for g in data.groups]
    return [g.t for g in data.groups], 0.01 * np.eye(r), 0.01 * np.eye(r), states


def _registration_start(data, knots, basis, config, registration):
    r = knots.r
    theta0 = np.asarray(knots.theta0, float)
    reg = registration or register_least_squares(
        data, knots, config.register_sweeps, basis=basis, max_evals=config.register_evals)
    Sigma, Omega = _mom_warp_covariances(reg.theta, theta0)
    Sigma, Omega = _psd_floor(Sigma, 1e-4), _psd_floor(Omega, 1e-4)
    states = []
    for th in reg.theta:
        x = np.asarray(th, float) - theta0
        eta = x.mean(axis=0)
        states.append(ChainState.start(r, len(x), config.mh_step, eta, x - eta))
    return reg.warped_grids(data), Sigma, Omega, states


def _initialize(data, config, registration=None):
    """Starting parameters and chain states.

    With warping and ``register_init``, two candidates are built: one from
    least-squares registration and one at identity warps. Registration can
    chase noise when there is little true warping, so each candidate is
    scored by a short E-step log-likelihood estimate and the better one kept.
    """
    basis = config.make_basis(data)
    knots = config.make_knots(data)
    r = knots.r
    s = basis.dimension
    if config.p > s or config.q > s:
        raise ValueError(f"p and q cannot exceed the basis dimension {s}")
    if data.n_obs < s:
        raise ValueError(f"{data.n_obs} observations cannot identify {s} mean coefficients")
    starts = {"identity": _identity_start(data, knots, config)}
    if r and config.register_init:
        starts["registration"] = _registration_start(data, knots, basis, config, registration)
    best = None
    for name, (grids, Sigma, Omega, states) in starts.items():
        m, C, D, gam, lam, sigma2 = _amplitude_start(basis, data, grids, config.p, config.q)
        params = ModelParams(basis, knots, m, C, D, gam, lam, Sigma, Omega, sigma2)
        if len(starts) == 1:
            return params, states
        post = e_step(params, data, config.mc_start, config.seed, iteration=INIT_STREAM,
                      states=states, burn_frac=config.burn_frac, threads=config.n_threads(),
                      proposal_df=config.proposal_df)
        if best is None or post.loglik > best[0]:
            best = (post.loglik, params, states, name)
    _, params, states, name = best
    params.flags["init"] = name
    return params, states


def initialize_params(data, config):
    """Deterministic starting values satisfying all parameter invariants."""
    return _initialize(data, config)[0]


# ---------------------------------------------------------------------------
# E-step


def _alloc(params, J):
    p, q, r, s = params.p, params.q, params.r, params.s
    K = 1 + p + q
    d = r * (J + 1)
    return {
        "H": np.zeros((K * s, K * s)), "g": np.zeros(K * s),
        "Euu": np.zeros((p, p)), "Eu": np.zeros(p),
        "Evv": np.zeros((J, q, q)), "Ev": np.zeros((J, q)),
        "Eee": np.zeros((r, r)), "Ee": np.zeros(r),
        "Exx": np.zeros((J, r, r)), "Ex": np.zeros((J, r)),
        "X1": np.zeros(d), "X2": np.zeros((d, d)), "acc": np.zeros(2),
    }


def _gauss_logpdf(x, chol):
    """Row-wise log N(0, L L^T) density."""
    z = np.linalg.solve(chol, x.T)
    r = chol.shape[0]
    return (-0.5 * (z * z).sum(axis=0) - np.log(np.diag(chol)).sum()
            - 0.5 * r * math.log(2 * math.pi))


def _is_loglik(params, group, args, out, size, rng, df, sig_chol, om_chol):
    """Importance-sampling estimate of log f(y_i) with a Student-t proposal
    fitted to the chain's moments of the warp effects."""
    r, J = params.r, group.J
    d = r * (J + 1)
    loc = out["X1"].copy()
    cov = out["X2"] - np.outer(loc, loc)
    cov = 0.5 * (cov + cov.T)
    prior_diag = np.concatenate([np.diag(params.Sigma)] + [np.diag(params.Omega)] * J)
    cov += np.diag(1e-6 * prior_diag + 1e-12)
    prop = stats.multivariate_t(loc=loc, shape=cov, df=df, allow_singular=False)
    x = np.asarray(prop.rvs(size=size, random_state=rng)).reshape(size, d)
    etas = np.ascontiguousarray(x[:, :r])
    xis = np.ascontiguousarray(x[:, r:].reshape(size, J, r))
    ll_y = kernels.group_logliks(*args, etas, xis)
    lp = _gauss_logpdf(etas, sig_chol)
    for j in range(J):
        lp = lp + _gauss_logpdf(xis[:, j], om_chol)
    lw = ll_y + lp - prop.logpdf(x).reshape(size)
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    top = lw.max()
    if not np.isfinite(top):
        raise ComputationError("non-finite importance weights")
    w = np.exp(lw - top)
    mean_w = w.mean()
    ll = top + math.log(mean_w)
    var = float(w.var() / (size * mean_w ** 2))
    ess = float(w.sum() ** 2 / (w @ w))
    return ll, var, ess


def _run_group(params, group, state, mc_size, burn_frac, rng, df, want_loglik):
    r, J = params.r, group.J
    args = _kernel_args(params, group)
    out = _alloc(params, J)
    if r == 0:
        ll = kernels.group_chain(*args, np.zeros((0, 0)), np.zeros((0, 0)),
                                 np.zeros((0, 0)), np.zeros((0, 0)), state.eta, state.xi,
                                 state.step, np.zeros((1, J + 1, 0)), np.ones((1, J + 1)), 0, out)
        return _pack(out, float(ll), 0.0, 1.0, 1)
    sig_chol = np.linalg.cholesky(params.Sigma)
    om_chol = np.linalg.cholesky(params.Omega)
    sig_inv = np.linalg.inv(params.Sigma)
    om_inv = np.linalg.inv(params.Omega)
    n_burn = max(10, int(math.ceil(burn_frac / (1.0 - burn_frac) * mc_size)))
    for attempt in range(2):
        burn = n_burn * (1 + 3 * attempt)
        normals = rng.standard_normal((burn + mc_size, J + 1, r))
        uniforms = rng.random((burn + mc_size, J + 1))
        kernels.group_chain(*args, sig_chol, sig_inv, om_chol, om_inv, state.eta, state.xi,
                            state.step, normals, uniforms, burn, out)
        low = out["acc"][0] < 0.01 or (J > 0 and out["acc"][1] < 0.01)
        if not low:
            break
        state.step[:] = np.where(out["acc"] < 0.01, state.step * 0.1, state.step)
    else:
        raise MCMCDiagnosticsError(
            f"Metropolis acceptance {out['acc'].round(4).tolist()} below 1% after adaptation")
    if want_loglik:
        ll, var, ess = _is_loglik(params, group, args, out, mc_size, rng, df, sig_chol, om_chol)
    else:
        ll, var, ess = float("nan"), 0.0, float("nan")
    return _pack(out, ll, var, ess, mc_size)


def _pack(out, ll, var, ess, n):
    return GroupPosterior(out["H"], out["g"], out["Euu"], out["Eu"], out["Evv"], out["Ev"],
                          out["Eee"], out["Ee"], out["Exx"], out["Ex"], out["acc"].copy(),
                          ll, var, ess, n)


def e_step(params, data, mc_size, seed=0, *, iteration=0, states=None, burn_frac=0.2,
           threads=1, proposal_df=5.0, want_loglik=True):
    """Monte-Carlo E-step over all groups.

    Group ``i`` draws from its own stream ``default_rng([seed, iteration, i])``
    so results do not depend on ``threads``. ``states`` (one
    :class:`ChainState` per group) are advanced in place; chains start at
    zero warp effects when omitted. With ``r = 0`` the step is exact.
    """
    if states is None:
        states = [ChainState.start(params.r, g.J, 0.25) for g in data.groups]

    def task(i):
        rng = np.random.default_rng([int(seed), int(iteration), i])
        return _run_group(params, data.groups[i], states[i], mc_size, burn_frac, rng,
                          proposal_df, want_loglik)

    idx = range(data.I)
    if threads and threads > 1 and data.I > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            groups = list(ex.map(task, idx))
    else:
        groups = [task(i) for i in idx]
    return PosteriorSummaries(groups)


# ---------------------------------------------------------------------------
# M-step


def _penalized_cov(S_sum, n, pen):
    """Maximizer of -n/2 log|S| - tr(S^{-1} S_sum)/2 - pen tr(S)."""
    S_sum = 0.5 * (S_sum + S_sum.T)
    if pen <= 0:
        return S_sum / n
    vals, vecs = np.linalg.eigh(S_sum)
    vals = np.clip(vals, 0.0, None)
    shrunk = (-n + np.sqrt(n * n + 8.0 * pen * vals)) / (4.0 * pen)
    return (vecs * shrunk) @ vecs.T


def m_step(posterior, data, params_old, config):
    """Closed-form parameter update from E-step moments.

    ``[m, C, D]`` solve the expected least-squares problem, ``sigma2`` is the
    expected residual mean square, full score covariances are averaged and
    then rotated back to J-orthonormal components with descending variances.
    """
    p, q, s, r = params_old.p, params_old.q, params_old.s, params_old.r
    K = 1 + p + q
    H = sum(g.H for g in posterior.groups)
    gv = sum(g.g for g in posterior.groups)
    H = 0.5 * (H + H.T)
    yy = sum(float(g.y @ g.y) for g in data.groups)
    N = data.n_obs
    try:
        L = np.linalg.cholesky(H)
        a = np.linalg.solve(L.T, np.linalg.solve(L, gv))
    except np.linalg.LinAlgError:
        vals = np.linalg.eigvalsh(H)
        raise ComputationError(
            f"mean-structure system is rank deficient (condition {vals[-1] / max(vals[0], 1e-300):.3g}); "
            "reduce the basis dimension s or the component counts p, q") from None
    sigma2 = (yy - 2.0 * a @ gv + a @ H @ a) / N
    flags = {}
    if sigma2 < SIGMA2_FLOOR:
        sigma2 = SIGMA2_FLOOR
        flags["sigma2_floor"] = True
    A = a.reshape(K, s).T
    m = A[:, 0].copy()
    I = data.I
    n = data.n_subjects
    Jm = params_old.J
    if p:
        Gfull = sum(g.Euu for g in posterior.groups) / I
        C, gam = gram_orthonormalize(A[:, 1:1 + p], Gfull, Jm)
    else:
        C, gam = np.zeros((s, 0)), np.zeros(0)
    if q:
        Lfull = sum(g.Evv.sum(axis=0) for g in posterior.groups) / n
        D, lam = gram_orthonormalize(A[:, 1 + p:], Lfull, Jm)
    else:
        D, lam = np.zeros((s, 0)), np.zeros(0)
    for name, v in (("gamma", gam), ("lambda", lam)):
        if np.any(v < VARIANCE_FLOOR):
            flags[f"{name}_floor"] = True
            v[v < VARIANCE_FLOOR] = VARIANCE_FLOOR
    if r:
        pen = config.penalty_lambda
        Sigma = _penalized_cov(sum(g.Eee for g in posterior.groups), I, pen)
        Omega = _penalized_cov(sum(g.Exx.sum(axis=0) for g in posterior.groups), n, pen)
        for name, M in (("Sigma", Sigma), ("Omega", Omega)):
            if np.linalg.eigvalsh(M)[0] < VARIANCE_FLOOR:
                flags[f"{name}_floor"] = True
        Sigma, Omega = _psd_floor(Sigma, VARIANCE_FLOOR), _psd_floor(Omega, VARIANCE_FLOOR)
    else:
        Sigma, Omega = np.zeros((0, 0)), np.zeros((0, 0))
    new = ModelParams(params_old.basis, params_old.knots, m, C, D, gam, lam, Sigma, Omega,
                      float(sigma2), flags)
    new.__dict__["J"] = Jm
    return new


# ---------------------------------------------------------------------------
# Drivers


def _result(params, post, trace, se_trace, converged, n_iter, config, estimator, flags,
            theta0=None):
    r = params.r
    theta0 = params.theta0 if theta0 is None else theta0
    eta_hat = [g.Ee.copy() for g in post.groups]
    xi_hat = [g.Ex.copy() for g in post.groups]
    theta_hat = [theta0[None, :] + e[None, :] + x for e, x in zip(eta_hat, xi_hat)] if r else \
        [np.zeros((g.Ex.shape[0], 0)) for g in post.groups]
    return FitResult(params, estimator, post.loglik, np.asarray(trace, float),
                     np.asarray(se_trace, float), post, [g.Eu.copy() for g in post.groups],
                     [g.Ev.copy() for g in post.groups], eta_hat, xi_hat, theta_hat,
                     converged, n_iter, config, flags)


def _converged(smooth, se, config, r):
    """Relative-change test; with sampling, on non-overlapping window-3 medians
    and with the Monte-Carlo standard error as a noise allowance."""
    if r == 0:
        return len(smooth) >= 2 and abs(smooth[-1] - smooth[-2]) <= config.em_tol * abs(smooth[-2])
    if len(smooth) < 4:
        return False
    ref = smooth[-4]
    allowance = 2.0 * math.hypot(se[-1], se[-4])
    return abs(smooth[-1] - ref) <= max(config.em_tol * abs(ref), allowance)


def fit_warped_anova(data, config, *, registration=None, estimator="ML"):
    """Maximum-likelihood fit by Monte-Carlo EM.

    Parameters
    ----------
    data : ObservationSet
    config : FitConfig
    registration : Registration, optional
        Precomputed least-squares registration used for the starting values.

    Returns
    -------
    FitResult
        Parameters at the last M-step; posterior summaries and predicted
        effects come from a refreshed E-step with ``final_mc_factor`` times
        the last Monte-Carlo size.
    """
    params, states = _initialize(data, config, registration)
    r = params.r
    threads = config.n_threads()
    trace, se_trace, smooth = [], [], []
    flags = {"init": params.flags["init"]} if "init" in params.flags else {}
    converged = False
    it = 0
    for it in range(1, config.em_max_iter + 1):
        mc = config.mc_size(it)
        post = e_step(params, data, mc, config.seed, iteration=it, states=states,
                      burn_frac=config.burn_frac, threads=threads,
                      proposal_df=config.proposal_df)
        ll = post.loglik
        if not np.isfinite(ll):
            raise ComputationError(f"non-finite log-likelihood at iteration {it}")
        trace.append(ll)
        se_trace.append(post.loglik_se)
        smooth.append(float(np.median(trace[-3:])) if r else ll)
        new = m_step(post, data, params, config)
        for k in new.flags:
            flags[k] = True
        params = new
        if _converged(smooth, se_trace, config, r) and (it >= config.em_min_iter or r == 0):
            converged = True
            break
    mc_final = config.mc_size(it) * (config.final_mc_factor if r else 1)
    post = e_step(params, data, mc_final, config.seed, iteration=0, states=states,
                  burn_frac=config.burn_frac, threads=threads, proposal_df=config.proposal_df)
    if not converged:
        flags["not_converged"] = True
    return _result(params, post, trace, se_trace, converged, it, config, estimator, flags)


def fit_common_anova(data, config):
    """Unwarped functional ANOVA: the same EM with ``r = 0`` (exact E-step)."""
    return fit_warped_anova(data, replace(config, tau0=()), estimator="common")


def fit_two_step(data, config, *, registration=None):
    """Least-squares registration followed by common ANOVA on aligned grids.

    Warp covariances come from a one-way MANOVA method-of-moments fit to the
    registered Jupp coordinates.
    """
    knots = config.make_knots(data)
    basis = config.make_basis(data)
    reg = registration or register_least_squares(
        data, knots, config.register_sweeps, basis=basis, max_evals=config.register_evals)
    aligned = data.with_times(reg.warped_grids(data))
    common = fit_common_anova(aligned, config)
    theta0 = np.asarray(knots.theta0, float)
    r = knots.r
    if r:
        Sigma, Omega = _mom_warp_covariances(reg.theta, theta0)
    else:
        Sigma, Omega = np.zeros((0, 0)), np.zeros((0, 0))
    p = common.params
    params = ModelParams(p.basis, knots, p.m, p.C, p.D, p.gamma, p.lam, Sigma, Omega,
                         p.sigma2, dict(p.flags))
    theta_hat = [np.asarray(th, float).reshape(-1, r) for th in reg.theta]
    eta_hat = [(th - theta0).mean(axis=0) for th in theta_hat]
    xi_hat = [th - theta0 - e for th, e in zip(theta_hat, eta_hat)]
    return replace(common, params=params, estimator="two-step", eta_hat=eta_hat, xi_hat=xi_hat,
                   theta_hat=theta_hat, config=config,
                   flags={**common.flags, "registration_objective": reg.objective_trace[-1]})


__all__ = [
    "ChainState", "FitConfig", "FitResult", "GroupPosterior", "MCMCDiagnosticsError",
    "PosteriorSummaries", "Registration", "e_step", "fit_common_anova", "fit_two_step",
    "fit_warped_anova", "initialize_params", "m_step", "register_least_squares",
]
