# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``wfanova._pykernels`` function by function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, fabs, M_PI
from libc.string cimport memcpy, memset

cnp.import_array()

BACKEND = "cython"

cdef double _INV_TOL = 1e-12
cdef int _INV_MAXITER = 100
cdef double _GAP_FLOOR = 1e-9


# ---------------------------------------------------------------------------
# B-splines

cdef inline int _find_span(const double* knots, int degree, int s, double t) noexcept nogil:
    # largest i with knots[i] <= t, clipped to [degree, s-1]
    cdef int lo = degree, hi = s, mid
    if t >= knots[s]:
        return s - 1
    if t <= knots[degree]:
        return degree
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if t < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


cdef inline void _basis_funs(const double* knots, int degree, int span, double t,
                             double* N, double* left, double* right) noexcept nogil:
    cdef int j, r
    cdef double saved, temp
    N[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = t - knots[span + 1 - j]
        right[j] = knots[span + j] - t
        saved = 0.0
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        N[j] = saved


def bspline_design(knots, int degree, t):
    cdef double[::1] kn = np.ascontiguousarray(knots, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(np.atleast_1d(t), dtype=np.float64)
    cdef int s = kn.shape[0] - degree - 1
    cdef Py_ssize_t n = tv.shape[0], i
    cdef int k, span
    out = np.zeros((n, s))
    cdef double[:, ::1] o = out
    cdef double[::1] N = np.empty(degree + 1)
    cdef double[::1] left = np.empty(degree + 1)
    cdef double[::1] right = np.empty(degree + 1)
    with nogil:
        for i in range(n):
            span = _find_span(&kn[0], degree, s, tv[i])
            _basis_funs(&kn[0], degree, span, tv[i], &N[0], &left[0], &right[0])
            for k in range(degree + 1):
                o[i, span - degree + k] = N[k]
    return out


# ---------------------------------------------------------------------------
# Warping primitives

cdef void _jupp_inverse(const double* theta, int r, double a, double b, double* tau,
                        double* gaps) noexcept nogil:
    cdef double width = b - a, c = 0.0, cmax = 0.0, acc = 0.0, lse, floor, tot
    cdef int k
    cdef bint low = False
    gaps[0] = 0.0
    for k in range(r):
        c += theta[k]
        gaps[k + 1] = c
        if c > cmax:
            cmax = c
    for k in range(r + 1):
        acc += exp(gaps[k] - cmax)
    lse = cmax + log(acc)
    floor = _GAP_FLOOR * width
    for k in range(r + 1):
        gaps[k] = width * exp(gaps[k] - lse)
        if gaps[k] < floor:
            low = True
    if low:
        tot = 0.0
        for k in range(r + 1):
            if gaps[k] < floor:
                gaps[k] = floor
            tot += gaps[k]
        for k in range(r + 1):
            gaps[k] *= width / tot
    # accumulate each landmark from its nearer endpoint to keep end gaps exact
    acc = 0.0
    for k in range(r):
        acc += gaps[k]
        tau[k] = acc
    acc = 0.0
    for k in range(r - 1, -1, -1):
        acc += gaps[k + 1]
        if tau[k] <= acc:
            tau[k] = a + tau[k]
        else:
            tau[k] = b - acc


cdef void _fc_slopes(const double* x, const double* y, int n, double* m,
                     double* delta) noexcept nogil:
    cdef int k
    cdef double alpha, beta, ss, tau
    for k in range(n - 1):
        delta[k] = (y[k + 1] - y[k]) / (x[k + 1] - x[k])
    m[0] = delta[0]
    m[n - 1] = delta[n - 2]
    for k in range(1, n - 1):
        m[k] = 0.5 * (delta[k - 1] + delta[k])
    for k in range(n - 1):
        alpha = m[k] / delta[k]
        beta = m[k + 1] / delta[k]
        ss = alpha * alpha + beta * beta
        if ss > 9.0:
            tau = 3.0 / sqrt(ss)
            m[k] = tau * alpha * delta[k]
            m[k + 1] = tau * beta * delta[k]


cdef inline int _seg(const double* x, int n, double t) noexcept nogil:
    cdef int k = 0
    while k < n - 2 and t >= x[k + 1]:
        k += 1
    return k


cdef inline double _herm_eval(const double* x, const double* y, const double* m, int n,
                              double t) noexcept nogil:
    cdef int k = _seg(x, n, t)
    cdef double h = x[k + 1] - x[k]
    cdef double u = (t - x[k]) / h
    cdef double u2 = u * u, u3 = u * u * u
    return (y[k] + (y[k + 1] - y[k]) * (3.0 * u2 - 2.0 * u3)
            + h * m[k] * (u3 - 2.0 * u2 + u) + h * m[k + 1] * (u3 - u2))


cdef double _herm_invert(const double* x, const double* y, const double* m, int n,
                         double v, double tol) noexcept nogil:
    cdef int k = _seg(y, n, v), it
    cdef double h = x[k + 1] - x[k], dy = y[k + 1] - y[k]
    cdef double p0 = h * m[k], p1 = h * m[k + 1]
    cdef double lo = 0.0, hi = 1.0, u, u2, u3, f, df, unew
    u = (v - y[k]) / dy
    if u < 0.0:
        u = 0.0
    elif u > 1.0:
        u = 1.0
    for it in range(_INV_MAXITER):
        u2 = u * u
        u3 = u2 * u
        f = (y[k] + dy * (3.0 * u2 - 2.0 * u3) + p0 * (u3 - 2.0 * u2 + u)
             + p1 * (u3 - u2) - v)
        if fabs(f) <= tol:
            break
        if f > 0.0:
            hi = u
        else:
            lo = u
        df = dy * (6.0 * u - 6.0 * u2) + p0 * (3.0 * u2 - 4.0 * u + 1.0) + p1 * (3.0 * u2 - 2.0 * u)
        if df > 0.0:
            unew = u - f / df
        else:
            unew = -1.0
        if not (lo < unew < hi):
            unew = 0.5 * (lo + hi)
        if hi - lo <= 1e-16:
            u = unew
            break
        u = unew
    return x[k] + h * u


def jupp_inverse(theta, double a, double b):
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef int r = th.shape[0]
    tau = np.empty(r)
    cdef double[::1] tv = tau
    cdef double[::1] gaps = np.empty(r + 1)
    if r:
        _jupp_inverse(&th[0], r, a, b, &tv[0], &gaps[0])
    return tau


def fc_slopes(x, y):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef int n = xv.shape[0]
    m = np.empty(n)
    cdef double[::1] mv = m
    cdef double[::1] delta = np.empty(n)
    _fc_slopes(&xv[0], &yv[0], n, &mv[0], &delta[0])
    return m


def hermite_eval(x, y, m, t):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    tarr = np.asarray(t, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(tarr.ravel())
    out = np.empty(tv.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef int n = xv.shape[0]
    for i in range(tv.shape[0]):
        o[i] = _herm_eval(&xv[0], &yv[0], &mv[0], n, tv[i])
    return out.reshape(tarr.shape)


def hermite_invert(x, y, m, v):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef double[::1] vv = np.ascontiguousarray(np.atleast_1d(v), dtype=np.float64)
    out = np.empty(vv.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef int n = xv.shape[0]
    cdef double tol = _INV_TOL * (xv[n - 1] - xv[0])
    for i in range(vv.shape[0]):
        o[i] = _herm_invert(&xv[0], &yv[0], &mv[0], n, vv[i], tol)
    return out


def warped_times(theta, double a, double b, tau0, t):
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] t0 = np.ascontiguousarray(tau0, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(np.atleast_1d(t), dtype=np.float64)
    cdef int r = th.shape[0], k
    cdef Py_ssize_t i
    cdef double[::1] xs = np.empty(r + 2)
    cdef double[::1] ys = np.empty(r + 2)
    cdef double[::1] ms = np.empty(r + 2)
    cdef double[::1] work = np.empty(r + 2)
    out = np.empty(tv.shape[0])
    cdef double[::1] o = out
    xs[0] = a
    ys[0] = a
    xs[r + 1] = b
    ys[r + 1] = b
    for k in range(r):
        xs[k + 1] = t0[k]
    if r:
        _jupp_inverse(&th[0], r, a, b, &ys[1], &work[0])
    _fc_slopes(&xs[0], &ys[0], r + 2, &ms[0], &work[0])
    for i in range(tv.shape[0]):
        o[i] = _herm_invert(&xs[0], &ys[0], &ms[0], r + 2, tv[i], _INV_TOL * (b - a))
    return out


# ---------------------------------------------------------------------------
# Group likelihood machinery

cdef struct Ctx:
    const double* t
    const double* y
    const long* off
    int nsub
    int nobs
    const double* knots
    int degree
    int s
    double a
    double b
    const double* tau0
    const double* theta0
    int r
    const double* m
    const double* C      # s x p row-major
    const double* D      # s x q row-major
    int p
    int q
    const double* gam
    const double* lam
    double sigma2
    # work
    double* xs
    double* ys
    double* ms
    double* wk
    double* th
    double* N
    double* left
    double* right
    double* Gm
    double* hr
    double* GC
    double* GD
    double* P
    double* bv
    double* wv
    double* Linv


cdef struct Stats:
    double* G
    double* h
    double* yy
    double* CGC
    double* CGD
    double* DGD
    double* Chr
    double* Dhr
    double* rr


cdef void _subject_update(Ctx* c, Stats* st, int j, const double* theta) noexcept nogil:
    """Recompute the sufficient statistics of subject ``j`` under ``theta``."""
    cdef int s = c.s, p = c.p, q = c.q, r = c.r, deg = c.degree
    cdef long lo = c.off[j], hi = c.off[j + 1], i
    cdef int k, l, span, a0
    cdef double ts, yv, tol = _INV_TOL * (c.b - c.a), acc
    cdef double* G = st.G + j * s * s
    cdef double* h = st.h + j * s
    memset(G, 0, s * s * sizeof(double))
    memset(h, 0, s * sizeof(double))
    if r:
        c.xs[0] = c.a
        c.ys[0] = c.a
        c.xs[r + 1] = c.b
        c.ys[r + 1] = c.b
        for k in range(r):
            c.xs[k + 1] = c.tau0[k]
        _jupp_inverse(theta, r, c.a, c.b, c.ys + 1, c.wk)
        _fc_slopes(c.xs, c.ys, r + 2, c.ms, c.wk)
    acc = 0.0
    for i in range(lo, hi):
        if r:
            ts = _herm_invert(c.xs, c.ys, c.ms, r + 2, c.t[i], tol)
        else:
            ts = c.t[i]
        yv = c.y[i]
        acc += yv * yv
        span = _find_span(c.knots, deg, s, ts)
        _basis_funs(c.knots, deg, span, ts, c.N, c.left, c.right)
        a0 = span - deg
        for k in range(deg + 1):
            h[a0 + k] += c.N[k] * yv
            for l in range(deg + 1):
                G[(a0 + k) * s + a0 + l] += c.N[k] * c.N[l]
    st.yy[j] = acc
    _project(c, st, j)


cdef void _project(Ctx* c, Stats* st, int j) noexcept nogil:
    cdef int s = c.s, p = c.p, q = c.q, k, l, a
    cdef double* G = st.G + j * s * s
    cdef double* h = st.h + j * s
    cdef double acc, mh = 0.0, mGm = 0.0
    for k in range(s):
        acc = 0.0
        for l in range(s):
            acc += G[k * s + l] * c.m[l]
        c.Gm[k] = acc
        c.hr[k] = h[k] - acc
        mh += c.m[k] * h[k]
        mGm += c.m[k] * acc
    st.rr[j] = st.yy[j] - 2.0 * mh + mGm
    # GC = G C (s x p), GD = G D (s x q)
    for k in range(s):
        for a in range(p):
            acc = 0.0
            for l in range(s):
                acc += G[k * s + l] * c.C[l * p + a]
            c.GC[k * p + a] = acc
        for a in range(q):
            acc = 0.0
            for l in range(s):
                acc += G[k * s + l] * c.D[l * q + a]
            c.GD[k * q + a] = acc
    for k in range(p):
        acc = 0.0
        for l in range(s):
            acc += c.C[l * p + k] * c.hr[l]
        st.Chr[j * p + k] = acc
        for a in range(p):
            acc = 0.0
            for l in range(s):
                acc += c.C[l * p + k] * c.GC[l * p + a]
            st.CGC[j * p * p + k * p + a] = acc
        for a in range(q):
            acc = 0.0
            for l in range(s):
                acc += c.C[l * p + k] * c.GD[l * q + a]
            st.CGD[j * p * q + k * q + a] = acc
    for k in range(q):
        acc = 0.0
        for l in range(s):
            acc += c.D[l * q + k] * c.hr[l]
        st.Dhr[j * q + k] = acc
        for a in range(q):
            acc = 0.0
            for l in range(s):
                acc += c.D[l * q + k] * c.GD[l * q + a]
            st.DGD[j * q * q + k * q + a] = acc


cdef void _copy_subject(Ctx* c, Stats* dst, Stats* src, int j) noexcept nogil:
    cdef int s = c.s, p = c.p, q = c.q
    memcpy(dst.G + j * s * s, src.G + j * s * s, s * s * sizeof(double))
    memcpy(dst.h + j * s, src.h + j * s, s * sizeof(double))
    dst.yy[j] = src.yy[j]
    if p:
        memcpy(dst.CGC + j * p * p, src.CGC + j * p * p, p * p * sizeof(double))
        memcpy(dst.Chr + j * p, src.Chr + j * p, p * sizeof(double))
    if p and q:
        memcpy(dst.CGD + j * p * q, src.CGD + j * p * q, p * q * sizeof(double))
    if q:
        memcpy(dst.DGD + j * q * q, src.DGD + j * q * q, q * q * sizeof(double))
        memcpy(dst.Dhr + j * q, src.Dhr + j * q, q * sizeof(double))
    dst.rr[j] = src.rr[j]


cdef int _chol(double* A, int n) noexcept nogil:
    """In-place lower Cholesky of a row-major n x n matrix; 0 on success."""
    cdef int i, j, k
    cdef double acc
    for j in range(n):
        acc = A[j * n + j]
        for k in range(j):
            acc -= A[j * n + k] * A[j * n + k]
        if not (acc > 0.0):
            return -1
        A[j * n + j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = A[i * n + j]
            for k in range(j):
                acc -= A[i * n + k] * A[j * n + k]
            A[i * n + j] = acc / A[j * n + j]
    return 0


cdef int _group_core(Ctx* c, Stats* cur, Stats* alt, int jo, bint want,
                     double* ll_out, double* mean, double* cov) noexcept nogil:
    """Marginal log-likelihood of a group; subject ``jo`` read from ``alt``."""
    cdef int p = c.p, q = c.q, nsub = c.nsub, s = c.s
    cdef int k = p + nsub * q, i, j, a, bb, base, att
    cdef double rr = 0.0, logdet = 0.0, quad, acc, scale, jit
    cdef double* P = c.P
    cdef double* bv = c.bv
    cdef double* w = c.wv
    cdef Stats* st
    memset(P, 0, k * k * sizeof(double))
    memset(bv, 0, k * sizeof(double))
    for a in range(p):
        P[a * k + a] = 1.0 / c.gam[a]
        logdet += log(c.gam[a])
    for a in range(q):
        logdet += nsub * log(c.lam[a])
    for j in range(nsub):
        st = alt if j == jo else cur
        rr += st.rr[j]
        for a in range(p):
            bv[a] += st.Chr[j * p + a] / c.sigma2
            for bb in range(p):
                P[a * k + bb] += st.CGC[j * p * p + a * p + bb] / c.sigma2
        base = p + j * q
        for a in range(q):
            bv[base + a] = st.Dhr[j * q + a] / c.sigma2
            P[(base + a) * k + base + a] += 1.0 / c.lam[a]
            for bb in range(q):
                P[(base + a) * k + base + bb] += st.DGD[j * q * q + a * q + bb] / c.sigma2
            for bb in range(p):
                P[(base + a) * k + bb] = st.CGD[j * p * q + bb * q + a] / c.sigma2
                P[bb * k + base + a] = P[(base + a) * k + bb]
    if k:
        # keep a copy for jitter retries in Linv scratch
        memcpy(c.Linv, P, k * k * sizeof(double))
        if _chol(P, k) != 0:
            scale = 1.0
            for a in range(k):
                if fabs(c.Linv[a * k + a]) > scale:
                    scale = fabs(c.Linv[a * k + a])
            jit = 1e-10
            for att in range(3):
                memcpy(P, c.Linv, k * k * sizeof(double))
                for a in range(k):
                    P[a * k + a] += jit * scale
                if _chol(P, k) == 0:
                    break
                jit *= 100.0
            else:
                return -1
        # forward solve L w = b
        for i in range(k):
            acc = bv[i]
            for a in range(i):
                acc -= P[i * k + a] * w[a]
            w[i] = acc / P[i * k + i]
        quad = rr / c.sigma2
        for i in range(k):
            quad -= w[i] * w[i]
            logdet += 2.0 * log(P[i * k + i])
    else:
        quad = rr / c.sigma2
    ll_out[0] = -0.5 * (c.nobs * log(2.0 * M_PI * c.sigma2) + logdet + quad)
    if not want or k == 0:
        return 0
    # Linv = L^{-1} (lower), cov = Linv^T Linv, mean = cov b
    memset(c.Linv, 0, k * k * sizeof(double))
    for i in range(k):
        c.Linv[i * k + i] = 1.0 / P[i * k + i]
        for j in range(i):
            acc = 0.0
            for a in range(j, i):
                acc += P[i * k + a] * c.Linv[a * k + j]
            c.Linv[i * k + j] = -acc / P[i * k + i]
    for i in range(k):
        for j in range(i, k):
            acc = 0.0
            for a in range(j, k):
                acc += c.Linv[a * k + i] * c.Linv[a * k + j]
            cov[i * k + j] = acc
            cov[j * k + i] = acc
    for i in range(k):
        acc = 0.0
        for j in range(k):
            acc += cov[i * k + j] * bv[j]
        mean[i] = acc
    return 0


cdef class _Work:
    """Owns the numpy buffers behind a Ctx and two Stats sets."""
    cdef Ctx c
    cdef Stats cur
    cdef Stats alt
    cdef object keep

    def __init__(self, t, y, offsets, knots, int degree, double a, double b, tau0, theta0,
                 m, C, D, gam, lam, double sigma2):
        keep = {}

        def arr(name, x, dtype=np.float64):
            v = np.ascontiguousarray(x, dtype=dtype)
            keep[name] = v
            return v

        def buf(name, n):
            v = np.zeros(max(int(n), 1))
            keep[name] = v
            return v

        cdef double[::1] v
        cdef long[::1] lv
        t_ = arr("t", t)
        y_ = arr("y", y)
        off_ = arr("off", offsets, np.int64)
        kn_ = arr("knots", knots)
        tau0_ = arr("tau0", np.concatenate((np.asarray(tau0, float), [0.0])))
        th0_ = arr("theta0", np.concatenate((np.asarray(theta0, float), [0.0])))
        m_ = arr("m", m)
        C_ = arr("C", np.asarray(C, float).ravel() if np.size(C) else np.zeros(1))
        D_ = arr("D", np.asarray(D, float).ravel() if np.size(D) else np.zeros(1))
        gam_ = arr("gam", np.concatenate((np.asarray(gam, float), [1.0])))
        lam_ = arr("lam", np.concatenate((np.asarray(lam, float), [1.0])))
        cdef int nsub = off_.shape[0] - 1
        cdef int s = kn_.shape[0] - degree - 1
        cdef int p = np.shape(C)[1], q = np.shape(D)[1]
        cdef int r = np.size(theta0)
        cdef int k = p + nsub * q
        self.c.nsub = nsub
        self.c.nobs = t_.shape[0]
        self.c.degree = degree
        self.c.s = s
        self.c.a = a
        self.c.b = b
        self.c.r = r
        self.c.p = p
        self.c.q = q
        self.c.sigma2 = sigma2
        v = t_ if t_.shape[0] else buf("t0", 1)
        self.c.t = &v[0]
        v = y_ if y_.shape[0] else buf("y0", 1)
        self.c.y = &v[0]
        lv = off_
        self.c.off = &lv[0]
        v = kn_
        self.c.knots = &v[0]
        v = tau0_
        self.c.tau0 = &v[0]
        v = th0_
        self.c.theta0 = &v[0]
        v = m_
        self.c.m = &v[0]
        v = C_
        self.c.C = &v[0]
        v = D_
        self.c.D = &v[0]
        v = gam_
        self.c.gam = &v[0]
        v = lam_
        self.c.lam = &v[0]
        for name, n in (("xs", r + 2), ("ys", r + 2), ("ms", r + 2), ("wk", r + 2), ("th", r + 1),
                        ("N", degree + 1), ("left", degree + 1), ("right", degree + 1),
                        ("Gm", s), ("hr", s), ("GC", s * p), ("GD", s * q), ("P", k * k),
                        ("bv", k), ("wv", k), ("Linv", k * k)):
            buf(name, n)
        v = keep["xs"]; self.c.xs = &v[0]
        v = keep["ys"]; self.c.ys = &v[0]
        v = keep["ms"]; self.c.ms = &v[0]
        v = keep["wk"]; self.c.wk = &v[0]
        v = keep["th"]; self.c.th = &v[0]
        v = keep["N"]; self.c.N = &v[0]
        v = keep["left"]; self.c.left = &v[0]
        v = keep["right"]; self.c.right = &v[0]
        v = keep["Gm"]; self.c.Gm = &v[0]
        v = keep["hr"]; self.c.hr = &v[0]
        v = keep["GC"]; self.c.GC = &v[0]
        v = keep["GD"]; self.c.GD = &v[0]
        v = keep["P"]; self.c.P = &v[0]
        v = keep["bv"]; self.c.bv = &v[0]
        v = keep["wv"]; self.c.wv = &v[0]
        v = keep["Linv"]; self.c.Linv = &v[0]
        for tag in ("cur", "alt"):
            for name, n in (("G", nsub * s * s), ("h", nsub * s), ("yy", nsub),
                            ("CGC", nsub * p * p), ("CGD", nsub * p * q), ("DGD", nsub * q * q),
                            ("Chr", nsub * p), ("Dhr", nsub * q), ("rr", nsub)):
                buf(tag + name, n)
        self._bind(&self.cur, "cur", keep)
        self._bind(&self.alt, "alt", keep)
        self.keep = keep

    cdef void _bind(self, Stats* st, str tag, dict keep):
        cdef double[::1] v
        v = keep[tag + "G"]; st.G = &v[0]
        v = keep[tag + "h"]; st.h = &v[0]
        v = keep[tag + "yy"]; st.yy = &v[0]
        v = keep[tag + "CGC"]; st.CGC = &v[0]
        v = keep[tag + "CGD"]; st.CGD = &v[0]
        v = keep[tag + "DGD"]; st.DGD = &v[0]
        v = keep[tag + "Chr"]; st.Chr = &v[0]
        v = keep[tag + "Dhr"]; st.Dhr = &v[0]
        v = keep[tag + "rr"]; st.rr = &v[0]


cdef inline void _theta(Ctx* c, const double* eta, const double* xi, double* th) noexcept nogil:
    cdef int k
    for k in range(c.r):
        th[k] = c.theta0[k] + eta[k] + xi[k]


def group_logliks(t, y, offsets, knots, int degree, double a, double b, tau0, theta0,
                  m, C, D, gam, lam, double sigma2, etas, xis):
    cdef _Work W = _Work(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D, gam, lam, sigma2)
    cdef Ctx* c = &W.c
    cdef int r = c.r, nsub = c.nsub, j, status = 0
    cdef double[:, ::1] E = np.ascontiguousarray(np.reshape(etas, (-1, max(r, 1)))
                                                 if r else np.zeros((np.shape(etas)[0], 1)))
    cdef double[:, :, ::1] X = np.ascontiguousarray(np.reshape(xis, (-1, nsub, max(r, 1)))
                                                    if r else np.zeros((np.shape(etas)[0], nsub, 1)))
    cdef Py_ssize_t K = E.shape[0], kk
    out = np.empty(K)
    cdef double[::1] o = out
    cdef double ll
    with nogil:
        for kk in range(K):
            for j in range(nsub):
                _theta(c, &E[kk, 0], &X[kk, j, 0], c.th)
                _subject_update(c, &W.cur, j, c.th)
            if _group_core(c, &W.cur, &W.cur, -1, False, &ll, NULL, NULL) != 0:
                status = -1
                break
            o[kk] = ll
    if status:
        raise np.linalg.LinAlgError("posterior precision not positive definite")
    return out


def group_moments(t, y, offsets, knots, int degree, double a, double b, tau0, theta0,
                  m, C, D, gam, lam, double sigma2, eta, xi):
    cdef _Work W = _Work(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D, gam, lam, sigma2)
    cdef Ctx* c = &W.c
    cdef int r = c.r, nsub = c.nsub, j
    cdef int k = c.p + nsub * c.q
    cdef double[::1] ev = np.ascontiguousarray(np.concatenate((np.asarray(eta, float).ravel(), [0.0])))
    cdef double[:, ::1] xv = np.ascontiguousarray(
        np.concatenate((np.reshape(np.asarray(xi, float), (nsub, r)), np.zeros((nsub, 1))), axis=1))
    mean = np.zeros(max(k, 1))
    cov = np.zeros((max(k, 1), max(k, 1)))
    cdef double[::1] mv = mean
    cdef double[:, ::1] cv = cov
    cdef double ll
    cdef int status
    with nogil:
        for j in range(nsub):
            _theta(c, &ev[0], &xv[j, 0], c.th)
            _subject_update(c, &W.cur, j, c.th)
        status = _group_core(c, &W.cur, &W.cur, -1, True, &ll, &mv[0], &cv[0, 0])
    if status:
        raise np.linalg.LinAlgError("posterior precision not positive definite")
    return ll, mean[:k], cov[:k, :k]


cdef inline double _quad_prior(const double* x, const double* Ainv, int r) noexcept nogil:
    cdef int a, b
    cdef double acc = 0.0
    for a in range(r):
        for b in range(r):
            acc += x[a] * Ainv[a * r + b] * x[b]
    return acc


def group_chain(t, y, offsets, knots, int degree, double a, double b, tau0, theta0,
                m, C, D, gam, lam, double sigma2, sig_chol, sig_inv, om_chol, om_inv,
                eta, xi, step, normals, uniforms, int n_burn, dict out):
    cdef _Work W = _Work(t, y, offsets, knots, degree, a, b, tau0, theta0, m, C, D, gam, lam, sigma2)
    cdef Ctx* c = &W.c
    cdef int r = c.r, nsub = c.nsub, p = c.p, q = c.q, s = c.s
    cdef int K = 1 + p + q, k = p + nsub * q, d = r * (nsub + 1)
    cdef int j, a1, b1, i1, i2, l1, l2, it, status = 0
    cdef int n_sweeps = np.shape(normals)[0]
    cdef int n_keep = n_sweeps - n_burn
    cdef int acc_e = 0, acc_x = 0, batch_e = 0, batch_x = 0
    cdef double[::1] eta_v = eta if r else np.zeros(1)
    cdef double[:, ::1] xi_v = xi if r else np.zeros((nsub, 1))
    cdef double[::1] step_v = step
    cdef double[:, :, ::1] Z = normals if r else np.zeros((n_sweeps, nsub + 1, 1))
    cdef double[:, ::1] U = uniforms
    cdef double[:, ::1] Lsig = np.ascontiguousarray(sig_chol, dtype=np.float64) if r else np.zeros((1, 1))
    cdef double[:, ::1] Isig = np.ascontiguousarray(sig_inv, dtype=np.float64) if r else np.zeros((1, 1))
    cdef double[:, ::1] Lom = np.ascontiguousarray(om_chol, dtype=np.float64) if r else np.zeros((1, 1))
    cdef double[:, ::1] Iom = np.ascontiguousarray(om_inv, dtype=np.float64) if r else np.zeros((1, 1))
    cdef double[:, ::1] H = out["H"]
    cdef double[::1] g = out["g"]
    cdef double[:, ::1] Euu = out["Euu"] if p else np.zeros((1, 1))
    cdef double[::1] Eu = out["Eu"] if p else np.zeros(1)
    cdef double[:, :, ::1] Evv = out["Evv"] if q else np.zeros((nsub, 1, 1))
    cdef double[:, ::1] Ev = out["Ev"] if q else np.zeros((nsub, 1))
    cdef double[:, ::1] Eee = out["Eee"] if r else np.zeros((1, 1))
    cdef double[::1] Ee = out["Ee"] if r else np.zeros(1)
    cdef double[:, :, ::1] Exx = out["Exx"] if r else np.zeros((nsub, 1, 1))
    cdef double[:, ::1] Ex = out["Ex"] if r else np.zeros((nsub, 1))
    cdef double[::1] X1 = out["X1"] if r else np.zeros(1)
    cdef double[:, ::1] X2 = out["X2"] if r else np.zeros((1, 1))
    cdef double[::1] accv = out["acc"]
    for key in ("H", "g", "Euu", "Eu", "Evv", "Ev", "Eee", "Ee", "Exx", "Ex", "X1", "X2", "acc"):
        out[key][...] = 0.0
    cdef double[::1] prop = np.zeros(max(r, 1))
    cdef double[::1] th = np.zeros(max(r, 1))
    cdef double[::1] mean = np.zeros(max(k, 1))
    cdef double[:, ::1] cov = np.zeros((max(k, 1), max(k, 1)))
    cdef double[:, ::1] Wm = np.zeros((K, K))
    cdef double[::1] Ew = np.zeros(K)
    cdef double[::1] x = np.zeros(max(d, 1))
    cdef double ll, ll_new, dlp, mz, wij, inv
    cdef int sz = s * s
    with nogil:
        for j in range(nsub):
            _theta(c, &eta_v[0], &xi_v[j, 0], &th[0])
            _subject_update(c, &W.cur, j, &th[0])
        if _group_core(c, &W.cur, &W.cur, -1, False, &ll, NULL, NULL) != 0:
            status = -1
        for it in range(n_sweeps):
            if status:
                break
            if r:
                # eta block
                for a1 in range(r):
                    mz = 0.0
                    for b1 in range(a1 + 1):
                        mz += Lsig[a1, b1] * Z[it, 0, b1]
                    prop[a1] = eta_v[a1] + step_v[0] * mz
                for j in range(nsub):
                    _theta(c, &prop[0], &xi_v[j, 0], &th[0])
                    _subject_update(c, &W.alt, j, &th[0])
                if _group_core(c, &W.alt, &W.alt, -1, False, &ll_new, NULL, NULL) != 0:
                    status = -1
                    break
                dlp = -0.5 * (_quad_prior(&prop[0], &Isig[0, 0], r)
                              - _quad_prior(&eta_v[0], &Isig[0, 0], r))
                if log(U[it, 0]) < ll_new - ll + dlp:
                    for a1 in range(r):
                        eta_v[a1] = prop[a1]
                    for j in range(nsub):
                        _copy_subject(c, &W.cur, &W.alt, j)
                    ll = ll_new
                    batch_e += 1
                    if it >= n_burn:
                        acc_e += 1
                # xi blocks
                for j in range(nsub):
                    for a1 in range(r):
                        mz = 0.0
                        for b1 in range(a1 + 1):
                            mz += Lom[a1, b1] * Z[it, j + 1, b1]
                        prop[a1] = xi_v[j, a1] + step_v[1] * mz
                    _theta(c, &eta_v[0], &prop[0], &th[0])
                    _subject_update(c, &W.alt, j, &th[0])
                    if _group_core(c, &W.cur, &W.alt, j, False, &ll_new, NULL, NULL) != 0:
                        status = -1
                        break
                    dlp = -0.5 * (_quad_prior(&prop[0], &Iom[0, 0], r)
                                  - _quad_prior(&xi_v[j, 0], &Iom[0, 0], r))
                    if log(U[it, j + 1]) < ll_new - ll + dlp:
                        for a1 in range(r):
                            xi_v[j, a1] = prop[a1]
                        _copy_subject(c, &W.cur, &W.alt, j)
                        ll = ll_new
                        batch_x += 1
                        if it >= n_burn:
                            acc_x += 1
                if status:
                    break
                if it < n_burn and (it + 1) % 10 == 0:
                    step_v[0] *= exp(2.0 * (batch_e / 10.0 - 0.3))
                    step_v[1] *= exp(2.0 * (batch_x / (10.0 * nsub) - 0.3))
                    batch_e = 0
                    batch_x = 0
            if it < n_burn:
                continue
            if _group_core(c, &W.cur, &W.cur, -1, True, &ll_new, &mean[0], &cov[0, 0]) != 0:
                status = -1
                break
            # amplitude moments
            for a1 in range(p):
                Eu[a1] += mean[a1]
                for b1 in range(p):
                    Euu[a1, b1] += cov[a1, b1] + mean[a1] * mean[b1]
            for j in range(nsub):
                i1 = p + j * q
                Ew[0] = 1.0
                Wm[0, 0] = 1.0
                for a1 in range(p):
                    Ew[1 + a1] = mean[a1]
                    Wm[0, 1 + a1] = mean[a1]
                    Wm[1 + a1, 0] = mean[a1]
                    for b1 in range(p):
                        Wm[1 + a1, 1 + b1] = cov[a1, b1] + mean[a1] * mean[b1]
                    for b1 in range(q):
                        mz = cov[a1, i1 + b1] + mean[a1] * mean[i1 + b1]
                        Wm[1 + a1, 1 + p + b1] = mz
                        Wm[1 + p + b1, 1 + a1] = mz
                for a1 in range(q):
                    Ew[1 + p + a1] = mean[i1 + a1]
                    Wm[0, 1 + p + a1] = mean[i1 + a1]
                    Wm[1 + p + a1, 0] = mean[i1 + a1]
                    Ev[j, a1] += mean[i1 + a1]
                    for b1 in range(q):
                        mz = cov[i1 + a1, i1 + b1] + mean[i1 + a1] * mean[i1 + b1]
                        Wm[1 + p + a1, 1 + p + b1] = mz
                        Evv[j, a1, b1] += mz
                for a1 in range(K):
                    for l1 in range(s):
                        g[a1 * s + l1] += Ew[a1] * W.cur.h[j * s + l1]
                    for b1 in range(K):
                        wij = Wm[a1, b1]
                        for l1 in range(s):
                            for l2 in range(s):
                                H[a1 * s + l1, b1 * s + l2] += wij * W.cur.G[j * sz + l1 * s + l2]
                for a1 in range(r):
                    Ex[j, a1] += xi_v[j, a1]
                    for b1 in range(r):
                        Exx[j, a1, b1] += xi_v[j, a1] * xi_v[j, b1]
            for a1 in range(r):
                Ee[a1] += eta_v[a1]
                x[a1] = eta_v[a1]
                for b1 in range(r):
                    Eee[a1, b1] += eta_v[a1] * eta_v[b1]
            for j in range(nsub):
                for a1 in range(r):
                    x[r + j * r + a1] = xi_v[j, a1]
            for a1 in range(d):
                X1[a1] += x[a1]
                for b1 in range(d):
                    X2[a1, b1] += x[a1] * x[b1]
    if status:
        raise np.linalg.LinAlgError("posterior precision not positive definite")
    inv = 1.0 / n_keep
    for key in ("H", "g", "Euu", "Eu", "Evv", "Ev", "Eee", "Ee", "Exx", "Ex", "X1", "X2"):
        out[key] *= inv
    if r:
        accv[0] = acc_e * inv
        accv[1] = acc_x * inv / nsub
    return ll
