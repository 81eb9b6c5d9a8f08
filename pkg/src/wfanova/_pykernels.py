"""Pure-Python/NumPy implementations of the hot kernels.

This module is the reference backend. ``_ckernels`` (Cython) exposes the same
functions with the same signatures; :mod:`wfanova.kernels` picks one at import.
"""

import math

import numpy as np

BACKEND = "python"

_INV_TOL = 1e-12
_INV_MAXITER = 100
_GAP_FLOOR = 1e-9


# ---------------------------------------------------------------------------
# B-splines


def bspline_design(knots, degree, t):
    """Dense B-spline design matrix via the Cox-de Boor recursion.

    ``knots`` is the full (clamped) knot vector; the last span is closed on
    the right so that ``t == b`` is evaluated.
    """
    knots = np.asarray(knots, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    s = knots.size - degree - 1
    n = t.size
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, degree, s - 1)
    N = np.zeros((n, degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    out = np.zeros((n, s))
    rows = np.arange(n)
    for k in range(degree + 1):
        out[rows, span - degree + k] = N[:, k]
    return out


# ---------------------------------------------------------------------------
# Warping primitives


def jupp_inverse(theta, a, b):
    theta = np.asarray(theta, dtype=float)
    width = b - a
    c = np.concatenate(([0.0], np.cumsum(theta)))
    cmax = c.max()
    lse = cmax + math.log(np.exp(c - cmax).sum())
    gaps = width * np.exp(c - lse)
    floor = _GAP_FLOOR * width
    if np.any(gaps < floor):
        gaps = np.maximum(gaps, floor)
        gaps *= width / gaps.sum()
    # accumulate each landmark from its nearer endpoint to keep end gaps exact
    lo = np.cumsum(gaps)[:-1]
    hi = np.cumsum(gaps[::-1])[::-1][1:]
    return np.where(lo <= hi, a + lo, b - hi)


def fc_slopes(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    delta = np.diff(y) / np.diff(x)
    m = np.empty(n)
    m[0] = delta[0]
    m[-1] = delta[-1]
    if n > 2:
        m[1:-1] = 0.5 * (delta[:-1] + delta[1:])
    for k in range(n - 1):
        alpha = m[k] / delta[k]
        beta = m[k + 1] / delta[k]
        ss = alpha * alpha + beta * beta
        if ss > 9.0:
            tau = 3.0 / math.sqrt(ss)
            m[k] = tau * alpha * delta[k]
            m[k + 1] = tau * beta * delta[k]
    return m


def hermite_eval(x, y, m, t):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    t = np.asarray(t, dtype=float)
    k = np.clip(np.searchsorted(x, t, side="right") - 1, 0, x.size - 2)
    h = x[k + 1] - x[k]
    u = (t - x[k]) / h
    u2 = u * u
    u3 = u2 * u
    return (y[k] + (y[k + 1] - y[k]) * (3.0 * u2 - 2.0 * u3)
            + h * m[k] * (u3 - 2.0 * u2 + u) + h * m[k + 1] * (u3 - u2))


def hermite_invert(x, y, m, v):
    """Invert a monotone Hermite spline pointwise (safeguarded Newton)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    out = np.empty(v.size)
    tol = _INV_TOL * (x[-1] - x[0])
    for i in range(v.size):
        out[i] = _invert_one(x, y, m, v[i], tol)
    return out


def _invert_one(x, y, m, v, tol):
    nseg = x.size - 1
    k = int(np.searchsorted(y, v, side="right")) - 1
    k = min(max(k, 0), nseg - 1)
    h = x[k + 1] - x[k]
    dy = y[k + 1] - y[k]
    p0 = h * m[k]
    p1 = h * m[k + 1]
    lo, hi = 0.0, 1.0
    u = (v - y[k]) / dy
    u = min(max(u, 0.0), 1.0)
    for _ in range(_INV_MAXITER):
        u2 = u * u
        u3 = u2 * u
        f = (y[k] + dy * (3.0 * u2 - 2.0 * u3) + p0 * (u3 - 2.0 * u2 + u)
             + p1 * (u3 - u2) - v)
        if abs(f) <= tol:
            break
        if f > 0.0:
            hi = u
        else:
            lo = u
        df = dy * (6.0 * u - 6.0 * u2) + p0 * (3.0 * u2 - 4.0 * u + 1.0) + p1 * (3.0 * u2 - 2.0 * u)
        unew = u - f / df if df > 0.0 else -1.0
        if not (lo < unew < hi):
            unew = 0.5 * (lo + hi)
        if hi - lo <= 1e-16:
            u = unew
            break
        u = unew
    return x[k] + h * u


def warped_times(theta, a, b, tau0, t):
    """Return ``w^{-1}(t)`` for the Hermite warp with Jupp coordinates ``theta``."""
    tau = jupp_inverse(theta, a, b)
    xs = np.concatenate(([a], tau0, [b]))
    ys = np.concatenate(([a], tau, [b]))
    slopes = fc_slopes(xs, ys)
    return hermite_invert(xs, ys, slopes, t)


# ---------------------------------------------------------------------------
# Group likelihood given warps


def _subject_stats(theta, a, b, tau0, knots, degree, t, y):
    if theta.size:
        ts = warped_times(theta, a, b, tau0, t)
    else:
        ts = t
    B = bspline_design(knots, degree, ts)
    return B.T @ B, B.T @ y, float(y @ y)


class _Group:
    """Per-subject sufficient statistics and projections for one group."""

    def __init__(self, t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D):
        self.t = t
        self.y = y
        self.offsets = offsets
        self.knots = knots
        self.degree = degree
        self.a = a
        self.b = b
        self.tau0 = tau0
        self.theta0 = theta0
        self.m = m
        self.C = C
        self.D = D
        nsub = offsets.size - 1
        s = knots.size - degree - 1
        self.G = np.zeros((nsub, s, s))
        self.h = np.zeros((nsub, s))
        self.yy = np.zeros(nsub)
        p, q = C.shape[1], D.shape[1]
        self.CGC = np.zeros((nsub, p, p))
        self.CGD = np.zeros((nsub, p, q))
        self.DGD = np.zeros((nsub, q, q))
        self.Chr = np.zeros((nsub, p))
        self.Dhr = np.zeros((nsub, q))
        self.rr = np.zeros(nsub)

    def update(self, j, theta):
        lo, hi = self.offsets[j], self.offsets[j + 1]
        G, h, yy = _subject_stats(theta, self.a, self.b, self.tau0, self.knots,
                                  self.degree, self.t[lo:hi], self.y[lo:hi])
        self.G[j], self.h[j], self.yy[j] = G, h, yy
        C, D, m = self.C, self.D, self.m
        Gm = G @ m
        hr = h - Gm
        self.CGC[j] = C.T @ G @ C
        self.CGD[j] = C.T @ G @ D
        self.DGD[j] = D.T @ G @ D
        self.Chr[j] = C.T @ hr
        self.Dhr[j] = D.T @ hr
        self.rr[j] = yy - 2.0 * (m @ h) + m @ Gm


def _cholesky_jitter(P):
    scale = max(float(np.max(np.abs(np.diag(P)))), 1.0) if P.size else 1.0
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    for jit in (1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(P + jit * scale * np.eye(P.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("posterior precision not positive definite")


def _group_core(grp, gam, lam, sigma2, nobs, want_moments):
    """Marginal log-likelihood (and optionally posterior moments) of a group."""
    nsub = grp.offsets.size - 1
    p, q = gam.size, lam.size
    k = p + nsub * q
    P = np.zeros((k, k))
    bvec = np.zeros(k)
    if p:
        P[:p, :p] = np.diag(1.0 / gam) + grp.CGC.sum(axis=0) / sigma2
        bvec[:p] = grp.Chr.sum(axis=0) / sigma2
    for j in range(nsub):
        sl = slice(p + j * q, p + (j + 1) * q)
        if q:
            P[sl, sl] = np.diag(1.0 / lam) + grp.DGD[j] / sigma2
            bvec[sl] = grp.Dhr[j] / sigma2
            if p:
                P[:p, sl] = grp.CGD[j] / sigma2
                P[sl, :p] = grp.CGD[j].T / sigma2
    rr = grp.rr.sum()
    logdet_prior = np.log(gam).sum() + nsub * np.log(lam).sum()
    if k:
        L = _cholesky_jitter(P)
        w = np.linalg.solve(L, bvec)
        logdet_P = 2.0 * np.log(np.diag(L)).sum()
        quad = rr / sigma2 - w @ w
    else:
        L = None
        logdet_P = 0.0
        quad = rr / sigma2
    ll = -0.5 * (nobs * math.log(2.0 * math.pi * sigma2) + logdet_prior + logdet_P + quad)
    if not want_moments:
        return ll, None, None
    if k:
        Linv = np.linalg.inv(L)
        cov = Linv.T @ Linv
        mean = cov @ bvec
    else:
        cov = np.zeros((0, 0))
        mean = np.zeros(0)
    return ll, mean, cov


def group_logliks(t, y, offsets, knots, degree, a, b, tau0, theta0,
                  m, C, D, gam, lam, sigma2, etas, xis):
    """Group log-likelihood given warps, for each of ``K`` warp configurations."""
    offsets = np.asarray(offsets, dtype=np.int64)
    nsub = offsets.size - 1
    grp = _Group(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D)
    K = etas.shape[0]
    out = np.empty(K)
    for kk in range(K):
        for j in range(nsub):
            grp.update(j, theta0 + etas[kk] + xis[kk, j])
        out[kk], _, _ = _group_core(grp, gam, lam, sigma2, t.size, False)
    return out


def group_moments(t, y, offsets, knots, degree, a, b, tau0, theta0,
                  m, C, D, gam, lam, sigma2, eta, xi):
    """Log-likelihood, posterior mean and covariance of (u, v_1..v_J) given warps."""
    offsets = np.asarray(offsets, dtype=np.int64)
    nsub = offsets.size - 1
    grp = _Group(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D)
    for j in range(nsub):
        grp.update(j, theta0 + eta + xi[j])
    return _group_core(grp, gam, lam, sigma2, t.size, True)


def _log_prior(eta, xi, sig_inv, om_inv):
    val = -0.5 * eta @ sig_inv @ eta
    for j in range(xi.shape[0]):
        val -= 0.5 * xi[j] @ om_inv @ xi[j]
    return val


def group_chain(t, y, offsets, knots, degree, a, b, tau0, theta0,
                m, C, D, gam, lam, sigma2, sig_chol, sig_inv, om_chol, om_inv,
                eta, xi, step, normals, uniforms, n_burn, out):
    """Metropolis-within-Gibbs over the warp effects of one group.

    Blocks are ``eta`` and each ``xi[j]``; random-walk proposals scaled by the
    prior Cholesky factors times ``step``. ``eta``, ``xi`` and ``step`` are
    updated in place. Rao-Blackwellized amplitude moments and warp moments,
    averaged over the kept sweeps, are written into the arrays of ``out``.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    nsub = offsets.size - 1
    r = theta0.size
    p, q = gam.size, lam.size
    s = knots.size - degree - 1
    K = 1 + p + q
    nobs = t.size
    grp = _Group(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D)
    for j in range(nsub):
        grp.update(j, theta0 + eta + xi[j])
    ll, _, _ = _group_core(grp, gam, lam, sigma2, nobs, False)

    for key in ("H", "g", "Euu", "Eu", "Evv", "Ev", "Eee", "Ee", "Exx", "Ex", "X1", "X2", "acc"):
        out[key][...] = 0.0
    n_sweeps = normals.shape[0]
    n_keep = n_sweeps - n_burn
    acc_e = acc_x = 0
    batch_e = batch_x = 0
    for it in range(n_sweeps):
        if r:
            # eta block
            prop = eta + step[0] * (sig_chol @ normals[it, 0])
            saved = (grp.G.copy(), grp.h.copy(), grp.yy.copy(), grp.CGC.copy(), grp.CGD.copy(),
                     grp.DGD.copy(), grp.Chr.copy(), grp.Dhr.copy(), grp.rr.copy())
            for j in range(nsub):
                grp.update(j, theta0 + prop + xi[j])
            ll_new, _, _ = _group_core(grp, gam, lam, sigma2, nobs, False)
            dlp = -0.5 * (prop @ sig_inv @ prop - eta @ sig_inv @ eta)
            if math.log(uniforms[it, 0]) < ll_new - ll + dlp:
                eta[:] = prop
                ll = ll_new
                batch_e += 1
                if it >= n_burn:
                    acc_e += 1
            else:
                (grp.G, grp.h, grp.yy, grp.CGC, grp.CGD, grp.DGD, grp.Chr, grp.Dhr, grp.rr) = saved
            # xi blocks
            for j in range(nsub):
                prop = xi[j] + step[1] * (om_chol @ normals[it, j + 1])
                saved = (grp.G[j].copy(), grp.h[j].copy(), grp.yy[j], grp.CGC[j].copy(),
                         grp.CGD[j].copy(), grp.DGD[j].copy(), grp.Chr[j].copy(),
                         grp.Dhr[j].copy(), grp.rr[j])
                grp.update(j, theta0 + eta + prop)
                ll_new, _, _ = _group_core(grp, gam, lam, sigma2, nobs, False)
                dlp = -0.5 * (prop @ om_inv @ prop - xi[j] @ om_inv @ xi[j])
                if math.log(uniforms[it, j + 1]) < ll_new - ll + dlp:
                    xi[j] = prop
                    ll = ll_new
                    batch_x += 1
                    if it >= n_burn:
                        acc_x += 1
                else:
                    (grp.G[j], grp.h[j], grp.yy[j], grp.CGC[j], grp.CGD[j], grp.DGD[j],
                     grp.Chr[j], grp.Dhr[j], grp.rr[j]) = saved
            if it < n_burn and (it + 1) % 10 == 0:
                step[0] *= math.exp(2.0 * (batch_e / 10.0 - 0.3))
                step[1] *= math.exp(2.0 * (batch_x / (10.0 * nsub) - 0.3))
                batch_e = batch_x = 0
        if it < n_burn:
            continue
        _, mean, cov = _group_core(grp, gam, lam, sigma2, nobs, True)
        _accumulate(out, grp, mean, cov, eta, xi, p, q, s, K)

    inv = 1.0 / n_keep
    for key in ("H", "g", "Euu", "Eu", "Evv", "Ev", "Eee", "Ee", "Exx", "Ex", "X1", "X2"):
        out[key] *= inv
    if r:
        out["acc"][0] = acc_e * inv
        out["acc"][1] = acc_x * inv / nsub
    return ll


def _accumulate(out, grp, mean, cov, eta, xi, p, q, s, K):
    nsub = grp.offsets.size - 1
    r = eta.size
    Mz = cov + np.outer(mean, mean)
    mu_u = mean[:p]
    out["Euu"] += Mz[:p, :p]
    out["Eu"] += mu_u
    W = np.empty((K, K))
    Ew = np.empty(K)
    for j in range(nsub):
        sl = slice(p + j * q, p + (j + 1) * q)
        out["Evv"][j] += Mz[sl, sl]
        out["Ev"][j] += mean[sl]
        Ew[0] = 1.0
        Ew[1:1 + p] = mu_u
        Ew[1 + p:] = mean[sl]
        W[0, 0] = 1.0
        W[0, 1:1 + p] = mu_u
        W[0, 1 + p:] = mean[sl]
        W[1:, 0] = W[0, 1:]
        W[1:1 + p, 1:1 + p] = Mz[:p, :p]
        W[1:1 + p, 1 + p:] = Mz[:p, sl]
        W[1 + p:, 1:1 + p] = Mz[sl, :p]
        W[1 + p:, 1 + p:] = Mz[sl, sl]
        out["H"] += np.kron(W, grp.G[j])
        out["g"] += np.kron(Ew, grp.h[j])
        out["Exx"][j] += np.outer(xi[j], xi[j])
        out["Ex"][j] += xi[j]
    out["Eee"] += np.outer(eta, eta)
    out["Ee"] += eta
    x = np.concatenate((eta, xi.ravel()))
    out["X1"] += x
    out["X2"] += np.outer(x, x)
