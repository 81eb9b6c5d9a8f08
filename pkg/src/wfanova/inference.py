"""Variance ratios, information matrices, delta-method intervals, F-test and bootstrap."""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats


class InferenceWarning(UserWarning):
    """Non-fatal issue in an inference computation."""


def variance_ratio_amplitude(gamma, lam):
    """Share of amplitude variance due to the group factor."""
    g = float(np.sum(gamma))
    l = float(np.sum(lam))
    if np.any(np.asarray(gamma) < 0) or np.any(np.asarray(lam) < 0):
        raise ValueError("variances must be nonnegative")
    if g + l <= 0:
        raise ValueError("all amplitude variances are zero")
    return g / (g + l)


def variance_ratio_warping(Sigma, Omega):
    """Share of warping variance due to the group factor, ``tr S / tr(S + O)``."""
    s = float(np.trace(np.atleast_2d(Sigma)))
    o = float(np.trace(np.atleast_2d(Omega)))
    if s < 0 or o < 0:
        raise ValueError("covariances must have nonnegative trace")
    if s + o <= 0:
        raise ValueError("all warping variances are zero")
    return s / (s + o)


# ---------------------------------------------------------------------------
# Scores and information


def _group_sizes(fit):
    J = np.array([g.Evv.shape[0] if g.Evv.ndim == 3 else g.Exx.shape[0]
                  for g in fit.posterior.groups], dtype=float)
    if len(set(J.tolist())) > 1:
        warnings.warn("unbalanced design: per-group J_i used in scores and information",
                      InferenceWarning, stacklevel=3)
    return J


def _amplitude_moments(fit):
    """Per-group ``E(u_k^2|y)`` (I, p) and ``sum_j E(v_jk^2|y)`` (I, q)."""
    post = fit.posterior.groups
    U2 = np.array([np.diag(g.Euu) for g in post]).reshape(len(post), -1)
    V2 = np.array([np.einsum("jkk->k", g.Evv) for g in post]).reshape(len(post), -1)
    return U2, V2


def _warp_moments(fit):
    """Per-group ``vec E(eta eta^T|y)`` and ``sum_j vec E(xi xi^T|y)``."""
    post = fit.posterior.groups
    E2 = np.array([g.Eee.reshape(-1, order="F") for g in post])
    X2 = np.array([g.Exx.sum(axis=0).reshape(-1, order="F") for g in post])
    return E2, X2


def score_components(fit):
    """Per-group scores for ``omega = (gamma, lambda)`` and ``zeta = (diag Sigma, diag Omega)``.

    Returns
    -------
    dict
        ``"omega"``: (I, p + q) array; ``"zeta"``: (I, 2r) array.
    """
    P = fit.params
    gam, lam = np.asarray(P.gamma, float), np.asarray(P.lam, float)
    if np.any(gam <= 0) or np.any(lam <= 0):
        raise ValueError("scores need strictly positive variances")
    J = _group_sizes(fit)
    U2, V2 = _amplitude_moments(fit)
    s_g = -0.5 / gam + U2 / (2 * gam ** 2)
    s_l = -0.5 * J[:, None] / lam + V2 / (2 * lam ** 2)
    out = {"omega": np.hstack([s_g, s_l])}
    r = P.r
    if r:
        Si, Oi = np.linalg.inv(P.Sigma), np.linalg.inv(P.Omega)
        E2, X2 = _warp_moments(fit)
        aS = np.array([np.kron(Si[:, k], Si[:, k]) for k in range(r)])
        aO = np.array([np.kron(Oi[:, k], Oi[:, k]) for k in range(r)])
        s_S = -0.5 * np.diag(Si)[None, :] + 0.5 * E2 @ aS.T
        s_O = -0.5 * J[:, None] * np.diag(Oi)[None, :] + 0.5 * X2 @ aO.T
        out["zeta"] = np.hstack([s_S, s_O])
    else:
        out["zeta"] = np.zeros((len(J), 0))
    return out


def _psd_repair(M):
    M = 0.5 * (M + M.T)
    vals, vecs = np.linalg.eigh(M)
    clipped = bool(np.any(vals < 0))
    if clipped:
        M = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        M = 0.5 * (M + M.T)
    return M, clipped


@dataclass(frozen=True)
class Information:
    """An estimated information matrix with its repair diagnostics."""

    matrix: np.ndarray
    raw: np.ndarray
    clipped: bool

    @property
    def condition(self):
        vals = np.linalg.eigvalsh(self.matrix)
        return float(vals[-1] / vals[0]) if vals.size and vals[0] > 0 else float("inf")


def fisher_F(fit):
    """Information for ``(gamma, lambda)`` by moment substitution.

    ``F_kl = mean_i[-c_k c_l / 4 + (a_ik / 2) (a_il / 2)]`` where for a
    ``gamma_k`` coordinate ``c = 1/gamma_k`` and ``a = E(u_k^2|y)/gamma_k^2``,
    and for ``lambda_k`` ``c = J_i/lambda_k`` and ``a = sum_j E(v_jk^2|y)/lambda_k^2``.
    """
    P = fit.params
    if fit.posterior is None or len(fit.posterior.groups) < 3:
        raise ValueError("information estimates need at least 3 groups")
    gam, lam = np.asarray(P.gamma, float), np.asarray(P.lam, float)
    if np.any(gam <= 0) or np.any(lam <= 0):
        raise ValueError("information needs strictly positive variances")
    J = _group_sizes(fit)
    U2, V2 = _amplitude_moments(fit)
    c = np.hstack([np.tile(1.0 / gam, (len(J), 1)), J[:, None] / lam[None, :]])
    a = np.hstack([U2 / gam ** 2, V2 / lam ** 2])
    raw = (-(c.T @ c) + a.T @ a) / (4.0 * len(J))
    M, clipped = _psd_repair(raw)
    return Information(M, 0.5 * (raw + raw.T), clipped)


def fisher_G(fit):
    """Information for ``(diag Sigma, diag Omega)`` in Kronecker form."""
    P = fit.params
    r = P.r
    if r == 0:
        raise ValueError("no warping component")
    if len(fit.posterior.groups) < 3:
        raise ValueError("information estimates need at least 3 groups")
    J = _group_sizes(fit)
    I = len(J)
    Si, Oi = np.linalg.inv(P.Sigma), np.linalg.inv(P.Omega)
    E2, X2 = _warp_moments(fit)
    kS = [np.kron(Si[:, k], Si[:, k]) for k in range(r)]
    kO = [np.kron(Oi[:, k], Oi[:, k]) for k in range(r)]
    EE = E2.T @ E2 / I
    EX = E2.T @ X2 / I
    XX = X2.T @ X2 / I
    mJ, mJ2 = J.mean(), (J ** 2).mean()
    G = np.zeros((2 * r, 2 * r))
    for k in range(r):
        for l in range(r):
            G[k, l] = -0.25 * Si[k, k] * Si[l, l] + 0.25 * kS[k] @ EE @ kS[l]
            G[k, r + l] = -0.25 * mJ * Si[k, k] * Oi[l, l] + 0.25 * kS[k] @ EX @ kO[l]
            G[r + l, k] = G[k, r + l]
            G[r + k, r + l] = -0.25 * mJ2 * Oi[k, k] * Oi[l, l] + 0.25 * kO[k] @ XX @ kO[l]
    M, clipped = _psd_repair(G)
    return Information(M, 0.5 * (G + G.T), clipped)


def _grad_ratio(num, den_other, n_num, n_other):
    tot = num.sum() + den_other.sum()
    return np.concatenate([np.full(n_num, den_other.sum() / tot ** 2),
                           np.full(n_other, -num.sum() / tot ** 2)])


def _inverse(M):
    vals = np.linalg.eigvalsh(M)
    if vals.size and vals[0] > 1e-12 * max(vals[-1], 1e-300):
        return np.linalg.inv(M), False
    warnings.warn("information matrix is singular; using the pseudo-inverse",
                  InferenceWarning, stacklevel=3)
    return np.linalg.pinv(M, hermitian=True), True


def avar_from_information(grad, info):
    """``grad^T info^{-1} grad`` (pseudo-inverse with a warning when singular)."""
    grad = np.asarray(grad, dtype=float)
    Minv, singular = _inverse(info)
    if singular and np.any(grad != 0):
        proj = info @ Minv @ grad
        if np.linalg.norm(proj) <= 1e-8 * np.linalg.norm(grad):
            raise ArithmeticError("singular information orthogonal to the gradient")
    return max(float(grad @ Minv @ grad), 0.0)


def avar_h(kind, fit):
    """Delta-method asymptotic variance of ``h_z`` (``kind="z"``) or ``h_w``.

    The quadratic form is evaluated in relative units, ``D info D`` with
    ``D`` the diagonal of current variances, so the PSD repair does not
    depend on the scale of the parameters. Without repair this equals
    ``grad^T info^{-1} grad`` exactly.
    """
    P = fit.params
    if kind == "z":
        theta = np.concatenate([np.asarray(P.gamma, float), np.asarray(P.lam, float)])
        grad = _grad_ratio(np.asarray(P.gamma), np.asarray(P.lam), P.p, P.q)
        raw = fisher_F(fit).raw
    elif kind == "w":
        theta = np.concatenate([np.diag(P.Sigma), np.diag(P.Omega)])
        grad = _grad_ratio(np.diag(P.Sigma), np.diag(P.Omega), P.r, P.r)
        raw = fisher_G(fit).raw
    else:
        raise ValueError("kind must be 'z' or 'w'")
    rel, _ = _psd_repair(theta[:, None] * raw * theta[None, :])
    return avar_from_information(theta * grad, rel)


def avar_expanded(first, second, info_inv):
    """Triple-sum form of the delta-method variance of ``sum(first)/sum(first+second)``.

    Blocks of ``info_inv`` are summed and weighted by squared totals; the
    result equals the quadratic form with the ratio's gradient.
    """
    A, Bs = float(np.sum(first)), float(np.sum(second))
    k = np.size(first)
    tot4 = (A + Bs) ** 4
    return (Bs ** 2 / tot4 * info_inv[:k, :k].sum()
            - 2 * A * Bs / tot4 * info_inv[:k, k:].sum()
            + A ** 2 / tot4 * info_inv[k:, k:].sum())


def ci_arcsin(h, avar, I, level=0.95):
    """Interval for a ratio built on the ``arcsin(sqrt(h))`` scale.

    The endpoints ``sin^2(arcsin(sqrt h) -/+ z se)`` with
    ``se = sqrt(avar / (4 h (1 - h) I))`` are clamped to [0, 1].
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if I < 2 or avar < 0 or not 0 <= h <= 1:
        raise ValueError("need 0 <= h <= 1, avar >= 0 and I >= 2")
    if h in (0.0, 1.0):
        warnings.warn("ratio on the boundary; degenerate interval", InferenceWarning, stacklevel=2)
        return (float(h), float(h))
    if avar == 0:
        return (float(h), float(h))
    z = stats.norm.ppf(0.5 * (1.0 + level))
    se = math.sqrt(avar / (4.0 * h * (1.0 - h) * I))
    centre = math.asin(math.sqrt(h))
    lo = max(centre - z * se, 0.0)
    hi = min(centre + z * se, 0.5 * math.pi)
    return (math.sin(lo) ** 2, math.sin(hi) ** 2)


@dataclass(frozen=True)
class VarianceRatioReport:
    """Point estimates, asymptotic variances and intervals for both ratios."""

    h_z: float
    h_w: float
    avar_hz: float
    avar_hw: float
    I: int
    level: float
    ci_hz: tuple
    ci_hw: tuple
    F: np.ndarray
    G: np.ndarray
    cond_F: float
    cond_G: float
    flags: dict = field(default_factory=dict)


def variance_ratio_report(fit, level=0.95):
    """Collect ratios, delta-method variances and arcsin intervals of a fit."""
    P = fit.params
    I = len(fit.posterior.groups)
    flags = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        hz = variance_ratio_amplitude(P.gamma, P.lam) if P.p + P.q else float("nan")
        Finfo = fisher_F(fit) if P.p + P.q else None
        az = avar_h("z", fit) if Finfo is not None else float("nan")
        ci_z = ci_arcsin(hz, az, I, level) if Finfo is not None else (float("nan"),) * 2
        if P.r:
            hw = variance_ratio_warping(P.Sigma, P.Omega)
            Ginfo = fisher_G(fit)
            aw = avar_h("w", fit)
            ci_w = ci_arcsin(hw, aw, I, level)
        else:
            hw = aw = float("nan")
            ci_w = (float("nan"), float("nan"))
            Ginfo = None
    if caught:
        flags["warnings"] = sorted({str(w.message) for w in caught})
    if Finfo is not None and Finfo.clipped:
        flags["F_psd_clipped"] = True
    if Ginfo is not None and Ginfo.clipped:
        flags["G_psd_clipped"] = True
    return VarianceRatioReport(
        hz, hw, az, aw, I, level, ci_z, ci_w,
        Finfo.matrix if Finfo is not None else np.zeros((0, 0)),
        Ginfo.matrix if Ginfo is not None else np.zeros((0, 0)),
        Finfo.condition if Finfo is not None else float("nan"),
        Ginfo.condition if Ginfo is not None else float("nan"), flags)


# ---------------------------------------------------------------------------
# Classical one-way F-test


@dataclass(frozen=True)
class FTestResult:
    F: float
    p_value: float
    df_between: int
    df_within: int
    flag: str = ""


def anova_f_test(groups):
    """One-way ANOVA F-test of equal group means.

    Parameters
    ----------
    groups : sequence of 1-d arrays
        Values for each factor level.

    Returns
    -------
    FTestResult
        ``F = MSB / MSW`` on ``(I - 1, n - I)`` degrees of freedom. A zero
        within-group sum of squares gives ``p = 0`` with flag
        ``"zero_within_variance"`` (or ``F = nan``, ``p = 1`` and flag
        ``"degenerate"`` when all values are equal).
    """
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    groups = [g for g in groups if g.size]
    I = len(groups)
    n = sum(g.size for g in groups)
    if I < 2 or n - I < 1:
        raise ValueError("need at least 2 groups and one group with 2 or more values")
    allv = np.concatenate(groups)
    shift = allv.mean()
    means = [g.mean() for g in groups]
    ssb = sum(g.size * (m - shift) ** 2 for g, m in zip(groups, means))
    ssw = sum(float(((g - m) ** 2).sum()) for g, m in zip(groups, means))
    d1, d2 = I - 1, n - I
    scale = max(float(np.abs(allv - shift).max()), 1e-300) ** 2 * n
    if ssw <= 1e-28 * scale:
        if ssb <= 1e-28 * scale:
            return FTestResult(float("nan"), 1.0, d1, d2, "degenerate")
        return FTestResult(float("inf"), 0.0, d1, d2, "zero_within_variance")
    F = (ssb / d1) / (ssw / d2)
    return FTestResult(float(F), float(special.fdtrc(d1, d2, F)), d1, d2)


def f_test_warp_effects(fit, component=0):
    """F-test on the predicted warp coordinates ``theta_ij`` grouped by ``i``."""
    return anova_f_test([np.asarray(th)[:, component] for th in fit.theta_hat])


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass
class BootstrapResult:
    h_z: np.ndarray
    h_w: np.ndarray
    flags: list
    indices: list

    @property
    def sd_hz(self):
        return float(np.std(self.h_z, ddof=1)) if self.h_z.size > 1 else 0.0

    @property
    def sd_hw(self):
        return float(np.std(self.h_w, ddof=1)) if self.h_w.size > 1 else 0.0


def _boot_one(args):
    from .estimation import fit_warped_anova
    data, config, idx = args
    try:
        res = fit_warped_anova(data.subset(idx), config)
    except Exception as exc:
        return float("nan"), float("nan"), f"failed: {type(exc).__name__}: {exc}"
    hw = res.h_w if res.params.r else float("nan")
    return res.h_z, hw, "" if res.converged else "not_converged"


def bootstrap_ratios(data, config, B, seed, *, em_max_iter=60, identity=False, parallelism=1):
    """Group bootstrap of ``(h_z, h_w)``.

    Replicate ``b`` resamples the ``I`` groups with replacement using the
    stream ``default_rng([seed, b])`` and refits with ``em_max_iter``
    iterations. ``identity=True`` forces the identity resample.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    cfg = replace(config, em_max_iter=em_max_iter)
    idx = [np.arange(data.I) if identity else
           np.random.default_rng([int(seed), b]).integers(0, data.I, data.I) for b in range(B)]
    jobs = [(data, cfg, ix) for ix in idx]
    if parallelism and parallelism > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            out = list(ex.map(_boot_one, jobs))
    else:
        out = [_boot_one(j) for j in jobs]
    return BootstrapResult(np.array([o[0] for o in out]), np.array([o[1] for o in out]),
                           [o[2] for o in out], idx)


__all__ = [
    "BootstrapResult", "FTestResult", "Information", "InferenceWarning", "VarianceRatioReport",
    "anova_f_test", "avar_expanded", "avar_from_information", "avar_h", "bootstrap_ratios",
    "ci_arcsin", "f_test_warp_effects", "fisher_F", "fisher_G", "score_components",
    "variance_ratio_amplitude", "variance_ratio_report", "variance_ratio_warping",
]
