"""Compiled inner loops for the collapsed sampler.

The state of one side of the model (rows of ``X`` or of ``X'`` in the
co-clustering modes) lives in a ``Side`` named tuple of arrays so kernels
can mutate it in place.  Views that share one allocation vector (``X`` and
``X'`` in the shared directed mode) are stacked along the leading axis.

Scalar hyperparameters travel in two small arrays:

* ``pf`` (float): kappa0, nu0, lambda0, alpha, beta, log(1 - omega)
* ``pi`` (int): second_level, constrained, m_cap, k_max

``outer`` only maintains the lower triangle.  Right-block caches are indexed
by community when the second level is off and by second-level cluster when
it is on.
"""

from __future__ import annotations

import math
from collections import namedtuple

import numpy as np
from numba import njit

LOG_PI = math.log(math.pi)
LOG_HALF = math.log(0.5)
NO_LIMIT = 1 << 40

SIDE_FIELDS = (
    # data and hyperparameter arrays
    "X", "delta", "prior_r",
    # allocations and sufficient statistics
    "z", "dims", "cnt", "sums", "sq", "outer",
    "v", "cnt2", "nc2", "sq2",
    # predictive caches
    "Lch", "mu", "lconst", "lscale", "lexp", "invR", "rconst", "rexp",
    # scratch space
    "wD", "wL", "wy", "wlog", "wrh", "wcnt", "wmem", "wside",
    "tn", "tsum", "tsq", "tout", "tnc",
)
Side = namedtuple("Side", SIDE_FIELDS)


def make_side(X, delta, prior_r, z, K, v, H, kcap):
    """Allocate a ``Side`` for data ``X`` of shape (views, n, m)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    V, n, m = X.shape
    mc = delta.shape[1]
    f = np.float64
    side = Side(
        X=X,
        delta=np.ascontiguousarray(delta, dtype=f),
        prior_r=np.ascontiguousarray(prior_r, dtype=f),
        z=np.asarray(z, dtype=np.int64).copy(),
        dims=np.array([K, H], dtype=np.int64),
        cnt=np.zeros(kcap, np.int64),
        sums=np.zeros((V, kcap, m), f),
        sq=np.zeros((V, kcap, m), f),
        outer=np.zeros((V, kcap, mc, mc), f),
        v=np.zeros(kcap, np.int64),
        cnt2=np.zeros(kcap, np.int64),
        nc2=np.zeros(kcap, np.int64),
        sq2=np.zeros((V, kcap, m), f),
        Lch=np.zeros((V, kcap, mc, mc), f),
        mu=np.zeros((V, kcap, mc), f),
        lconst=np.zeros((V, kcap), f),
        lscale=np.zeros((V, kcap), f),
        lexp=np.zeros((V, kcap), f),
        invR=np.zeros((V, kcap, m), f),
        rconst=np.zeros((V, kcap), f),
        rexp=np.zeros((V, kcap), f),
        wD=np.zeros((mc, mc), f),
        wL=np.zeros((mc, mc), f),
        wy=np.zeros(mc, f),
        wlog=np.zeros(kcap + 2, f),
        wrh=np.zeros(kcap + 2, f),
        wcnt=np.zeros(kcap + 2, np.int64),
        wmem=np.zeros(max(n, kcap), np.int64),
        wside=np.zeros(max(n, kcap), np.int64),
        tn=np.zeros(3, np.int64),
        tsum=np.zeros((V, 3, m), f),
        tsq=np.zeros((V, 3, m), f),
        tout=np.zeros((V, 3, mc, mc), f),
        tnc=np.zeros(2, np.int64),
    )
    side.v[: len(v)] = v
    return side


# ---------------------------------------------------------------------------
# dense linear algebra and closed-form marginals
# ---------------------------------------------------------------------------

@njit(cache=True)
def _chol(A, d, L):
    for j in range(d):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.nan
        ljj = math.sqrt(s)
        L[j, j] = ljj
        for i in range(j + 1, d):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / ljj
    ld = 0.0
    for j in range(d):
        ld += 2.0 * math.log(L[j, j])
    return ld


@njit(cache=True)
def chol_logdet(A, d, L):
    """Cholesky of ``A[:d, :d]`` into ``L``; one jittered retry on failure."""
    ld = _chol(A, d, L)
    if np.isnan(ld):
        tr = 0.0
        for j in range(d):
            tr += A[j, j]
        eps = 1e-9 * abs(tr) / d
        for j in range(d):
            A[j, j] += eps
        ld = _chol(A, d, L)
        if np.isnan(ld):
            raise FloatingPointError("posterior scale matrix is not positive definite")
    return ld


@njit(cache=True)
def build_scale(n, s, o, delta, d, kappa0, D):
    """Lower triangle of ``Delta + sum x x' - S S' / kappa_n`` into ``D``."""
    kn = kappa0 + n
    for a in range(d):
        for b in range(a + 1):
            D[a, b] = o[a, b] - s[a] * s[b] / kn
        D[a, a] += delta[a]


@njit(cache=True)
def left_value(n, d, logdet, sumlogdelta, kappa0, nu0):
    kn = kappa0 + n
    nn = nu0 + n
    r = (-0.5 * n * d * LOG_PI + 0.5 * d * (math.log(kappa0) - math.log(kn))
         + 0.5 * (nu0 + d - 1) * sumlogdelta - 0.5 * (nn + d - 1) * logdet)
    for i in range(1, d + 1):
        r += math.lgamma(0.5 * (nn + d - i)) - math.lgamma(0.5 * (nu0 + d - i))
    return r


@njit(cache=True)
def left_marg(n, s, o, delta, d, kappa0, nu0, D, L):
    """Log marginal of the first ``d`` coordinates of one cluster."""
    if n == 0:
        return 0.0
    build_scale(n, s, o, delta, d, kappa0, D)
    ld = chol_logdet(D, d, L)
    sld = 0.0
    for a in range(d):
        sld += math.log(delta[a])
    return left_value(n, d, ld, sld, kappa0, nu0)


@njit(cache=True)
def left_marg_prefix(n, s, o, delta, dmax, kappa0, nu0, D, L, out):
    """``out[d] += left_marg(..., d)`` for every d in 1..dmax from one factorisation."""
    if n == 0:
        return
    build_scale(n, s, o, delta, dmax, kappa0, D)
    chol_logdet(D, dmax, L)
    ld = 0.0
    sld = 0.0
    for d in range(1, dmax + 1):
        ld += 2.0 * math.log(L[d - 1, d - 1])
        sld += math.log(delta[d - 1])
        out[d] += left_value(n, d, ld, sld, kappa0, nu0)


@njit(cache=True)
def right_cols(n, sq, pr, lam0, j0, j1):
    """Log marginal of columns ``j0..j1-1`` under the zero-mean variance prior."""
    if n == 0 or j1 <= j0:
        return 0.0
    ln = lam0 + n
    r = (j1 - j0) * (-0.5 * n * LOG_PI + math.lgamma(0.5 * ln) - math.lgamma(0.5 * lam0))
    for j in range(j0, j1):
        r += 0.5 * lam0 * math.log(pr[j]) - 0.5 * ln * math.log(pr[j] + sq[j])
    return r


@njit(cache=True)
def right_cols2(n, sqa, sqb, pr, lam0, j0, j1):
    """``right_cols`` of the union of two disjoint groups of rows."""
    if n == 0 or j1 <= j0:
        return 0.0
    ln = lam0 + n
    r = (j1 - j0) * (-0.5 * n * LOG_PI + math.lgamma(0.5 * ln) - math.lgamma(0.5 * lam0))
    for j in range(j0, j1):
        r += 0.5 * lam0 * math.log(pr[j]) - 0.5 * ln * math.log(pr[j] + sqa[j] + sqb[j])
    return r


@njit(cache=True)
def left_pred(x, n, s, o, delta, d, kappa0, nu0, D, L, y):
    """Log Student-t predictive of ``x[:d]`` given a cluster's statistics."""
    build_scale(n, s, o, delta, d, kappa0, D)
    ld = chol_logdet(D, d, L)
    kn = kappa0 + n
    nn = nu0 + n
    c = (kn + 1.0) / (kn * nn)
    q = 0.0
    for a in range(d):
        t = x[a] - s[a] / kn
        for b in range(a):
            t -= L[a, b] * y[b]
        y[a] = t / L[a, a]
        q += y[a] * y[a]
    return (math.lgamma(0.5 * (nn + d)) - math.lgamma(0.5 * nn) - 0.5 * d * math.log(nn * math.pi)
            - 0.5 * (d * math.log(c) + ld) - 0.5 * (nn + d) * math.log1p(q / (c * nn)))


@njit(cache=True)
def right_pred(x, n, sq, pr, lam0, d, m):
    """Sum over trailing columns of log Student-t predictives."""
    ln = lam0 + n
    r = (m - d) * (math.lgamma(0.5 * (ln + 1.0)) - math.lgamma(0.5 * ln) - 0.5 * LOG_PI)
    for j in range(d, m):
        R = pr[j] + sq[j]
        r -= 0.5 * math.log(R) + 0.5 * (ln + 1.0) * math.log1p(x[j] * x[j] / R)
    return r


@njit(cache=True)
def log_crp(cnt, K, alpha):
    N = 0
    aK = alpha / K
    r = 0.0
    for k in range(K):
        N += cnt[k]
        r += math.lgamma(cnt[k] + aK)
    return r - K * math.lgamma(aK) + math.lgamma(alpha) - math.lgamma(N + alpha)


@njit(cache=True)
def log_pv(nc, H, K, beta):
    bH = beta / H
    r = math.lgamma(beta) - math.lgamma(K + beta) - H * math.lgamma(bH)
    for h in range(H):
        r += math.lgamma(nc[h] + bH)
    return r


@njit(cache=True)
def sample_log(w, K, rng):
    mx = -np.inf
    for k in range(K):
        if w[k] > mx:
            mx = w[k]
    tot = 0.0
    for k in range(K):
        w[k] = math.exp(w[k] - mx)
        tot += w[k]
    u = rng.random() * tot
    acc = 0.0
    last = 0
    for k in range(K):
        if w[k] > 0.0:
            last = k
            acc += w[k]
            if u < acc:
                return k
    return last


@njit(cache=True)
def _shuffle(a, n, rng):
    for t in range(n - 1, 0, -1):
        s = rng.integers(0, t + 1)
        tmp = a[t]
        a[t] = a[s]
        a[s] = tmp


@njit(cache=True)
def count_nonempty(cnt, K):
    c = 0
    for k in range(K):
        if cnt[k] > 0:
            c += 1
    return c


@njit(cache=True)
def log_prior_d_constrained(knz, kmin_other, mcap, d):
    km = min(knz, kmin_other)
    if d > km:
        return -np.inf
    return -math.log(min(km, mcap))


# ---------------------------------------------------------------------------
# caches
# ---------------------------------------------------------------------------

@njit(cache=True)
def refresh_left(S, vw, k, d, kappa0, nu0):
    n = S.cnt[k]
    build_scale(n, S.sums[vw, k], S.outer[vw, k], S.delta[vw], d, kappa0, S.wD)
    ld = chol_logdet(S.wD, d, S.Lch[vw, k])
    kn = kappa0 + n
    nn = nu0 + n
    c = (kn + 1.0) / (kn * nn)
    for a in range(d):
        S.mu[vw, k, a] = S.sums[vw, k, a] / kn
    S.lconst[vw, k] = (math.lgamma(0.5 * (nn + d)) - math.lgamma(0.5 * nn)
                       - 0.5 * d * math.log(nn * math.pi) - 0.5 * (d * math.log(c) + ld))
    S.lscale[vw, k] = 1.0 / (c * nn)
    S.lexp[vw, k] = 0.5 * (nn + d)


@njit(cache=True)
def refresh_right(S, vw, r, d, lam0, second):
    if second:
        n = S.cnt2[r]
        sq = S.sq2[vw, r]
    else:
        n = S.cnt[r]
        sq = S.sq[vw, r]
    m = sq.shape[0]
    ln = lam0 + n
    acc = 0.0
    pr = S.prior_r[vw]
    for j in range(d, m):
        R = pr[j] + sq[j]
        S.invR[vw, r, j] = 1.0 / R
        acc += math.log(R)
    S.rconst[vw, r] = (m - d) * (math.lgamma(0.5 * (ln + 1.0)) - math.lgamma(0.5 * ln)
                                 - 0.5 * LOG_PI) - 0.5 * acc
    S.rexp[vw, r] = 0.5 * (ln + 1.0)


@njit(cache=True)
def left_pred_cached(S, vw, k, x, d):
    L = S.Lch[vw, k]
    mu = S.mu[vw, k]
    y = S.wy
    q = 0.0
    for a in range(d):
        t = x[a] - mu[a]
        for b in range(a):
            t -= L[a, b] * y[b]
        y[a] = t / L[a, a]
        q += y[a] * y[a]
    return S.lconst[vw, k] - S.lexp[vw, k] * math.log1p(S.lscale[vw, k] * q)


@njit(cache=True)
def right_pred_cached(S, vw, r, x, d):
    inv = S.invR[vw, r]
    acc = 0.0
    for j in range(d, x.shape[0]):
        acc += math.log1p(x[j] * x[j] * inv[j])
    return S.rconst[vw, r] - S.rexp[vw, r] * acc


@njit(cache=True)
def refresh_cluster(S, k, d, pf, pi):
    second = pi[0] == 1
    for vw in range(S.X.shape[0]):
        refresh_left(S, vw, k, d, pf[0], pf[1])
        if not second:
            refresh_right(S, vw, k, d, pf[2], False)


@njit(cache=True)
def refresh_group(S, h, d, pf):
    for vw in range(S.X.shape[0]):
        refresh_right(S, vw, h, d, pf[2], True)


@njit(cache=True)
def refresh_all(S, d, pf, pi):
    K = S.dims[0]
    H = S.dims[1]
    for k in range(K):
        refresh_cluster(S, k, d, pf, pi)
    if pi[0] == 1:
        for h in range(H):
            refresh_group(S, h, d, pf)


# ---------------------------------------------------------------------------
# statistics bookkeeping
# ---------------------------------------------------------------------------

@njit(cache=True)
def move_row(S, i, k, sign, second):
    """Add (sign=+1) or remove (sign=-1) row ``i`` to/from community ``k``."""
    X = S.X
    V, n, m = X.shape
    mc = S.outer.shape[2]
    S.cnt[k] += sign
    h = S.v[k]
    if second:
        S.cnt2[h] += sign
    for vw in range(V):
        x = X[vw, i]
        for j in range(m):
            S.sums[vw, k, j] += sign * x[j]
            xx = x[j] * x[j]
            S.sq[vw, k, j] += sign * xx
            if second:
                S.sq2[vw, h, j] += sign * xx
        o = S.outer[vw, k]
        for a in range(mc):
            sa = sign * x[a]
            for b in range(a + 1):
                o[a, b] += sa * x[b]


@njit(cache=True)
def recompute_stats(S):
    """Rebuild every statistic exactly from ``z``, ``v`` and the data."""
    X = S.X
    V, n, m = X.shape
    mc = S.outer.shape[2]
    K = S.dims[0]
    H = S.dims[1]
    S.cnt[:] = 0
    S.sums[:] = 0.0
    S.sq[:] = 0.0
    S.outer[:] = 0.0
    S.cnt2[:] = 0
    S.nc2[:] = 0
    S.sq2[:] = 0.0
    for i in range(n):
        k = S.z[i]
        S.cnt[k] += 1
        for vw in range(V):
            x = X[vw, i]
            for j in range(m):
                S.sums[vw, k, j] += x[j]
                S.sq[vw, k, j] += x[j] * x[j]
            o = S.outer[vw, k]
            for a in range(mc):
                for b in range(a + 1):
                    o[a, b] += x[a] * x[b]
    for k in range(K):
        h = S.v[k]
        S.nc2[h] += 1
        S.cnt2[h] += S.cnt[k]
        for vw in range(V):
            for j in range(m):
                S.sq2[vw, h, j] += S.sq[vw, k, j]
    return H


@njit(cache=True)
def recompute_cluster(S, k):
    X = S.X
    V, n, m = X.shape
    mc = S.outer.shape[2]
    S.cnt[k] = 0
    S.sums[:, k] = 0.0
    S.sq[:, k] = 0.0
    S.outer[:, k] = 0.0
    for i in range(n):
        if S.z[i] != k:
            continue
        S.cnt[k] += 1
        for vw in range(V):
            x = X[vw, i]
            for j in range(m):
                S.sums[vw, k, j] += x[j]
                S.sq[vw, k, j] += x[j] * x[j]
            o = S.outer[vw, k]
            for a in range(mc):
                for b in range(a + 1):
                    o[a, b] += x[a] * x[b]


@njit(cache=True)
def recompute_group(S, h):
    K = S.dims[0]
    S.cnt2[h] = 0
    S.nc2[h] = 0
    S.sq2[:, h] = 0.0
    for k in range(K):
        if S.v[k] == h:
            S.nc2[h] += 1
            S.cnt2[h] += S.cnt[k]
            S.sq2[:, h] += S.sq[:, k]


@njit(cache=True)
def insert_label(S, p, second):
    """Open an empty community at label ``p``, shifting labels >= p up by one."""
    K = S.dims[0]
    for k in range(K, p, -1):
        S.cnt[k] = S.cnt[k - 1]
        S.v[k] = S.v[k - 1]
        S.sums[:, k] = S.sums[:, k - 1]
        S.sq[:, k] = S.sq[:, k - 1]
        S.outer[:, k] = S.outer[:, k - 1]
        S.Lch[:, k] = S.Lch[:, k - 1]
        S.mu[:, k] = S.mu[:, k - 1]
        S.lconst[:, k] = S.lconst[:, k - 1]
        S.lscale[:, k] = S.lscale[:, k - 1]
        S.lexp[:, k] = S.lexp[:, k - 1]
        if not second:
            S.invR[:, k] = S.invR[:, k - 1]
            S.rconst[:, k] = S.rconst[:, k - 1]
            S.rexp[:, k] = S.rexp[:, k - 1]
    S.cnt[p] = 0
    S.sums[:, p] = 0.0
    S.sq[:, p] = 0.0
    S.outer[:, p] = 0.0
    for i in range(S.z.shape[0]):
        if S.z[i] >= p:
            S.z[i] += 1
    S.dims[0] = K + 1


@njit(cache=True)
def delete_label(S, b, second):
    """Remove community label ``b`` (already emptied), shifting labels above it down."""
    K = S.dims[0]
    for k in range(b, K - 1):
        S.cnt[k] = S.cnt[k + 1]
        S.v[k] = S.v[k + 1]
        S.sums[:, k] = S.sums[:, k + 1]
        S.sq[:, k] = S.sq[:, k + 1]
        S.outer[:, k] = S.outer[:, k + 1]
        S.Lch[:, k] = S.Lch[:, k + 1]
        S.mu[:, k] = S.mu[:, k + 1]
        S.lconst[:, k] = S.lconst[:, k + 1]
        S.lscale[:, k] = S.lscale[:, k + 1]
        S.lexp[:, k] = S.lexp[:, k + 1]
        if not second:
            S.invR[:, k] = S.invR[:, k + 1]
            S.rconst[:, k] = S.rconst[:, k + 1]
            S.rexp[:, k] = S.rexp[:, k + 1]
    for i in range(S.z.shape[0]):
        if S.z[i] > b:
            S.z[i] -= 1
    S.cnt[K - 1] = 0
    S.dims[0] = K - 1


@njit(cache=True)
def insert_group(S, p):
    H = S.dims[1]
    K = S.dims[0]
    for h in range(H, p, -1):
        S.cnt2[h] = S.cnt2[h - 1]
        S.nc2[h] = S.nc2[h - 1]
        S.sq2[:, h] = S.sq2[:, h - 1]
        S.invR[:, h] = S.invR[:, h - 1]
        S.rconst[:, h] = S.rconst[:, h - 1]
        S.rexp[:, h] = S.rexp[:, h - 1]
    S.cnt2[p] = 0
    S.nc2[p] = 0
    S.sq2[:, p] = 0.0
    for k in range(K):
        if S.v[k] >= p:
            S.v[k] += 1
    S.dims[1] = H + 1


@njit(cache=True)
def delete_group(S, b):
    H = S.dims[1]
    K = S.dims[0]
    for h in range(b, H - 1):
        S.cnt2[h] = S.cnt2[h + 1]
        S.nc2[h] = S.nc2[h + 1]
        S.sq2[:, h] = S.sq2[:, h + 1]
        S.invR[:, h] = S.invR[:, h + 1]
        S.rconst[:, h] = S.rconst[:, h + 1]
        S.rexp[:, h] = S.rexp[:, h + 1]
    for k in range(K):
        if S.v[k] > b:
            S.v[k] -= 1
    S.cnt2[H - 1] = 0
    S.nc2[H - 1] = 0
    S.dims[1] = H - 1


# ---------------------------------------------------------------------------
# moves on z
# ---------------------------------------------------------------------------

@njit(cache=True)
def gibbs_z(S, d, pf, pi, kmin_other, rng):
    """One systematic scan of collapsed Gibbs updates; returns the number of relabelled rows."""
    X = S.X
    V, n, m = X.shape
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    constrained = pi[1] == 1
    mcap = pi[2]
    aK = pf[3] / K
    w = S.wlog
    rh = S.wrh
    knz = count_nonempty(S.cnt, K)
    moved = 0
    for i in range(n):
        k0 = S.z[i]
        if constrained and S.cnt[k0] == 1 and min(knz - 1, kmin_other) < d:
            continue  # the only admissible label is the current one
        move_row(S, i, k0, -1, second)
        if S.cnt[k0] == 0:
            knz -= 1
        refresh_cluster(S, k0, d, pf, pi)
        if second:
            refresh_group(S, S.v[k0], d, pf)
            for h in range(H):
                acc = 0.0
                for vw in range(V):
                    acc += right_pred_cached(S, vw, h, X[vw, i], d)
                rh[h] = acc
        for k in range(K):
            lw = math.log(S.cnt[k] + aK)
            for vw in range(V):
                lw += left_pred_cached(S, vw, k, X[vw, i], d)
                if not second:
                    lw += right_pred_cached(S, vw, k, X[vw, i], d)
            if second:
                lw += rh[S.v[k]]
            if constrained:
                kz = knz + (1 if S.cnt[k] == 0 else 0)
                lw += log_prior_d_constrained(kz, kmin_other, mcap, d)
            w[k] = lw
        k1 = sample_log(w, K, rng)
        if S.cnt[k1] == 0:
            knz += 1
        move_row(S, i, k1, 1, second)
        S.z[i] = k1
        refresh_cluster(S, k1, d, pf, pi)
        if second:
            refresh_group(S, S.v[k1], d, pf)
        if k1 != k0:
            moved += 1
    return moved


@njit(cache=True)
def _tinit(S, slot, i, d):
    X = S.X
    V, n, m = X.shape
    S.tn[slot] = 1
    for vw in range(V):
        x = X[vw, i]
        for j in range(m):
            S.tsum[vw, slot, j] = x[j]
            S.tsq[vw, slot, j] = x[j] * x[j]
        for a in range(d):
            for b in range(a + 1):
                S.tout[vw, slot, a, b] = x[a] * x[b]


@njit(cache=True)
def _tadd(S, slot, i, d):
    X = S.X
    V, n, m = X.shape
    S.tn[slot] += 1
    for vw in range(V):
        x = X[vw, i]
        for j in range(m):
            S.tsum[vw, slot, j] += x[j]
            S.tsq[vw, slot, j] += x[j] * x[j]
        for a in range(d):
            for b in range(a + 1):
                S.tout[vw, slot, a, b] += x[a] * x[b]


@njit(cache=True)
def _tcombine(S, d):
    V = S.X.shape[0]
    S.tn[2] = S.tn[0] + S.tn[1]
    for vw in range(V):
        S.tsum[vw, 2] = S.tsum[vw, 0] + S.tsum[vw, 1]
        S.tsq[vw, 2] = S.tsq[vw, 0] + S.tsq[vw, 1]
        for a in range(d):
            for b in range(a + 1):
                S.tout[vw, 2, a, b] = S.tout[vw, 0, a, b] + S.tout[vw, 1, a, b]


@njit(cache=True)
def _tslot_pred(S, slot, x, vw, d, pf, second):
    lp = left_pred(x, S.tn[slot], S.tsum[vw, slot], S.tout[vw, slot], S.delta[vw], d,
                   pf[0], pf[1], S.wD, S.wL, S.wy)
    if not second:
        lp += right_pred(x, S.tn[slot], S.tsq[vw, slot], S.prior_r[vw], pf[2], d, x.shape[0])
    return lp


@njit(cache=True)
def _tslot_marg(S, slot, vw, d, pf, second):
    m = S.X.shape[2]
    r = left_marg(S.tn[slot], S.tsum[vw, slot], S.tout[vw, slot], S.delta[vw], d,
                  pf[0], pf[1], S.wD, S.wL)
    if not second:
        r += right_cols(S.tn[slot], S.tsq[vw, slot], S.prior_r[vw], pf[2], d, m)
    return r


@njit(cache=True)
def split_merge_z(S, d, pf, pi, kmin_other, rng):
    """Sequentially allocated split-merge proposal.

    Returns ``(kind, accepted, log_ratio)``; kind is 1 for a split and 2 for
    a merge.
    """
    X = S.X
    V, n, m = X.shape
    if n < 2:
        return 0, 0, 0.0
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    constrained = pi[1] == 1
    mcap = pi[2]
    kmax = pi[3]
    alpha = pf[3]
    beta = pf[4]
    i = rng.integers(0, n)
    j = rng.integers(0, n - 1)
    if j >= i:
        j += 1
    ki = S.z[i]
    kj = S.z[j]
    split = ki == kj
    knz = count_nonempty(S.cnt, K)
    if split:
        if K + 1 > kmax:
            return 1, 0, -np.inf
    else:
        if second and (S.v[ki] != S.v[kj] or H > K - 1):
            return 2, 0, -np.inf
        if constrained and d > min(knz - 1, kmin_other):
            return 2, 0, -np.inf

    mem = S.wmem
    nm = 0
    for t in range(n):
        if t != i and t != j and (S.z[t] == ki or S.z[t] == kj):
            mem[nm] = t
            nm += 1
    _shuffle(mem, nm, rng)

    _tinit(S, 0, i, d)
    _tinit(S, 1, j, d)
    logq = 0.0
    for idx in range(nm):
        t = mem[idx]
        pa = 0.0
        pb = 0.0
        for vw in range(V):
            pa += _tslot_pred(S, 0, X[vw, t], vw, d, pf, second)
            pb += _tslot_pred(S, 1, X[vw, t], vw, d, pf, second)
        mx = max(pa, pb)
        lse = mx + math.log(math.exp(pa - mx) + math.exp(pb - mx))
        if split:
            side = 0 if rng.random() < math.exp(pa - lse) else 1
        else:
            side = 0 if S.z[t] == ki else 1
        logq += (pa if side == 0 else pb) - lse
        S.wside[idx] = side
        _tadd(S, side, t, d)
    _tcombine(S, d)

    parts = 0.0
    for vw in range(V):
        parts += (_tslot_marg(S, 0, vw, d, pf, second) + _tslot_marg(S, 1, vw, d, pf, second)
                  - _tslot_marg(S, 2, vw, d, pf, second))

    wc = S.wcnt
    crp0 = log_crp(S.cnt, K, alpha)
    if split:
        for k in range(K):
            wc[k] = S.cnt[k]
        wc[ki] = S.tn[0]
        wc[K] = S.tn[1]
        logr = parts + log_crp(wc, K + 1, alpha) - crp0 + pf[5]
        if constrained:
            logr += (log_prior_d_constrained(knz + 1, kmin_other, mcap, d)
                     - log_prior_d_constrained(knz, kmin_other, mcap, d))
        if second:
            h = S.v[ki]
            pv0 = log_pv(S.nc2, H, K, beta)
            S.nc2[h] += 1
            pv1 = log_pv(S.nc2, H, K + 1, beta)
            S.nc2[h] -= 1
            logr += pv1 - pv0 + math.log(K) - math.log(K + 1)
        logr += -logq + math.log(K + 1)
    else:
        nk = 0
        for k in range(K):
            if k != kj:
                wc[nk] = S.cnt[k]
                if k == ki:
                    wc[nk] = S.tn[2]
                nk += 1
        logr = -parts + log_crp(wc, K - 1, alpha) - crp0 - pf[5]
        if constrained:
            logr += (log_prior_d_constrained(knz - 1, kmin_other, mcap, d)
                     - log_prior_d_constrained(knz, kmin_other, mcap, d))
        if second:
            h = S.v[ki]
            pv0 = log_pv(S.nc2, H, K, beta)
            S.nc2[h] -= 1
            pv1 = log_pv(S.nc2, H, K - 1, beta)
            S.nc2[h] += 1
            logr += pv1 - pv0 + math.log(K) - math.log(K - 1)
        logr += logq - math.log(K)

    if not math.log(rng.random()) < logr:
        return 1 if split else 2, 0, logr

    if split:
        p = rng.integers(0, K + 1)
        insert_label(S, p, second)
        kk = ki + 1 if ki >= p else ki
        S.v[p] = S.v[kk]
        if second:
            S.nc2[S.v[p]] += 1
        S.z[j] = p
        for idx in range(nm):
            if S.wside[idx] == 1:
                S.z[mem[idx]] = p
        recompute_cluster(S, kk)
        recompute_cluster(S, p)
        refresh_cluster(S, kk, d, pf, pi)
        refresh_cluster(S, p, d, pf, pi)
    else:
        for t in range(n):
            if S.z[t] == kj:
                S.z[t] = ki
        S.cnt[ki] += S.cnt[kj]
        S.cnt[kj] = 0
        S.sums[:, ki] += S.sums[:, kj]
        S.sq[:, ki] += S.sq[:, kj]
        S.outer[:, ki] += S.outer[:, kj]
        if second:
            S.nc2[S.v[ki]] -= 1
        delete_label(S, kj, second)
        kk = ki - 1 if ki > kj else ki
        refresh_cluster(S, kk, d, pf, pi)
    return 1 if split else 2, 1, logr


@njit(cache=True)
def empty_z(S, d, pf, pi, rng):
    """Birth or death of an empty community with ``z`` held fixed."""
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    kmax = pi[3]
    alpha = pf[3]
    beta = pf[4]
    knz = count_nonempty(S.cnt, K)
    E = K - knz
    add = True if E == 0 else rng.random() < 0.5
    wc = S.wcnt
    crp0 = log_crp(S.cnt, K, alpha)
    if add:
        if K + 1 > kmax:
            return 1, 0, -np.inf
        h = rng.integers(0, H) if second else 0
        for k in range(K):
            wc[k] = S.cnt[k]
        wc[K] = 0
        logr = log_crp(wc, K + 1, alpha) - crp0 + pf[5]
        if second:
            pv0 = log_pv(S.nc2, H, K, beta)
            S.nc2[h] += 1
            pv1 = log_pv(S.nc2, H, K + 1, beta)
            S.nc2[h] -= 1
            logr += pv1 - pv0 + math.log(K) - math.log(K + 1)
        q_fwd = (0.0 if E == 0 else LOG_HALF) - math.log(K + 1)
        if second:
            q_fwd -= math.log(H)
        q_rev = LOG_HALF - math.log(E + 1)
        logr += q_rev - q_fwd
        if math.log(rng.random()) < logr:
            p = rng.integers(0, K + 1)
            insert_label(S, p, second)
            S.v[p] = h
            if second:
                S.nc2[h] += 1
            refresh_cluster(S, p, d, pf, pi)
            return 1, 1, logr
        return 1, 0, logr

    r = rng.integers(0, E)
    b = -1
    for k in range(K):
        if S.cnt[k] == 0:
            if r == 0:
                b = k
                break
            r -= 1
    if second and H > K - 1:
        return 2, 0, -np.inf
    nk = 0
    for k in range(K):
        if k != b:
            wc[nk] = S.cnt[k]
            nk += 1
    logr = log_crp(wc, K - 1, alpha) - crp0 - pf[5]
    if second:
        h = S.v[b]
        pv0 = log_pv(S.nc2, H, K, beta)
        S.nc2[h] -= 1
        pv1 = log_pv(S.nc2, H, K - 1, beta)
        S.nc2[h] += 1
        logr += pv1 - pv0 + math.log(K) - math.log(K - 1)
    q_fwd = LOG_HALF - math.log(E)
    q_rev = (0.0 if E == 1 else LOG_HALF) - math.log(K)
    if second:
        q_rev -= math.log(H)
    logr += q_rev - q_fwd
    if math.log(rng.random()) < logr:
        if second:
            S.nc2[S.v[b]] -= 1
        delete_label(S, b, second)
        return 2, 1, logr
    return 2, 0, logr


# ---------------------------------------------------------------------------
# moves on v
# ---------------------------------------------------------------------------

@njit(cache=True)
def gibbs_v(S, d, pf, rng):
    """Collapsed Gibbs scan over second-level labels of every community."""
    K = S.dims[0]
    H = S.dims[1]
    if H == 1:
        return 0
    V, n, m = S.X.shape
    lam0 = pf[2]
    bH = pf[4] / H
    w = S.wlog
    moved = 0
    for k in range(K):
        h0 = S.v[k]
        S.nc2[h0] -= 1
        S.cnt2[h0] -= S.cnt[k]
        S.sq2[:, h0] -= S.sq[:, k]
        for h in range(H):
            lw = math.log(S.nc2[h] + bH)
            if S.cnt[k] > 0:
                for vw in range(V):
                    pr = S.prior_r[vw]
                    lw += (right_cols2(S.cnt2[h] + S.cnt[k], S.sq2[vw, h], S.sq[vw, k], pr, lam0, d, m)
                           - right_cols(S.cnt2[h], S.sq2[vw, h], pr, lam0, d, m))
            w[h] = lw
        h1 = sample_log(w, H, rng)
        S.v[k] = h1
        S.nc2[h1] += 1
        S.cnt2[h1] += S.cnt[k]
        S.sq2[:, h1] += S.sq[:, k]
        if h1 != h0:
            moved += 1
            refresh_group(S, h0, d, pf)
            refresh_group(S, h1, d, pf)
    return moved


@njit(cache=True)
def _vslot_marg(S, slot, d, lam0):
    V, n, m = S.X.shape
    r = 0.0
    for vw in range(V):
        r += right_cols(S.tn[slot], S.tsq[vw, slot], S.prior_r[vw], lam0, d, m)
    return r


@njit(cache=True)
def _vslot_gain(S, slot, c, d, lam0):
    V, n, m = S.X.shape
    r = 0.0
    for vw in range(V):
        pr = S.prior_r[vw]
        r += (right_cols2(S.tn[slot] + S.cnt[c], S.tsq[vw, slot], S.sq[vw, c], pr, lam0, d, m)
              - right_cols(S.tn[slot], S.tsq[vw, slot], pr, lam0, d, m))
    return r


@njit(cache=True)
def _vslot_set(S, slot, c):
    S.tn[slot] = S.cnt[c]
    S.tnc[slot] = 1
    S.tsq[:, slot] = S.sq[:, c]


@njit(cache=True)
def _vslot_add(S, slot, c):
    S.tn[slot] += S.cnt[c]
    S.tnc[slot] += 1
    S.tsq[:, slot] += S.sq[:, c]


@njit(cache=True)
def split_merge_v(S, d, pf, rng):
    """Split-merge of second-level clusters with communities as the units."""
    K = S.dims[0]
    H = S.dims[1]
    if K < 2:
        return 0, 0, 0.0
    lam0 = pf[2]
    beta = pf[4]
    k1 = rng.integers(0, K)
    k2 = rng.integers(0, K - 1)
    if k2 >= k1:
        k2 += 1
    h1 = S.v[k1]
    h2 = S.v[k2]
    split = h1 == h2
    if split and H + 1 > K:
        return 1, 0, -np.inf

    mem = S.wmem
    nm = 0
    for c in range(K):
        if c != k1 and c != k2 and (S.v[c] == h1 or S.v[c] == h2):
            mem[nm] = c
            nm += 1
    _shuffle(mem, nm, rng)
    _vslot_set(S, 0, k1)
    _vslot_set(S, 1, k2)
    logq = 0.0
    for idx in range(nm):
        c = mem[idx]
        if S.cnt[c] == 0:
            pa = LOG_HALF
            pb = LOG_HALF
        else:
            ga = _vslot_gain(S, 0, c, d, lam0)
            gb = _vslot_gain(S, 1, c, d, lam0)
            mx = max(ga, gb)
            lse = mx + math.log(math.exp(ga - mx) + math.exp(gb - mx))
            pa = ga - lse
            pb = gb - lse
        if split:
            side = 0 if rng.random() < math.exp(pa) else 1
        else:
            side = 0 if S.v[c] == h1 else 1
        logq += pa if side == 0 else pb
        S.wside[idx] = side
        _vslot_add(S, side, c)
    parts = _vslot_marg(S, 0, d, lam0) + _vslot_marg(S, 1, d, lam0)
    # union of the two slots
    S.tn[2] = S.tn[0] + S.tn[1]
    S.tsq[:, 2] = S.tsq[:, 0] + S.tsq[:, 1]
    parts -= _vslot_marg(S, 2, d, lam0)

    pv0 = log_pv(S.nc2, H, K, beta)
    wc = S.wcnt
    if split:
        for h in range(H):
            wc[h] = S.nc2[h]
        wc[h1] = S.tnc[0]
        wc[H] = S.tnc[1]
        logr = parts + log_pv(wc, H + 1, K, beta) - pv0 - logq + math.log(H + 1)
    else:
        nh = 0
        for h in range(H):
            if h != h2:
                wc[nh] = S.nc2[h]
                if h == h1:
                    wc[nh] = S.tnc[0] + S.tnc[1]
                nh += 1
        logr = -parts + log_pv(wc, H - 1, K, beta) - pv0 + logq - math.log(H)

    if not math.log(rng.random()) < logr:
        return 1 if split else 2, 0, logr
    if split:
        p = rng.integers(0, H + 1)
        insert_group(S, p)
        hh = h1 + 1 if h1 >= p else h1
        S.v[k2] = p
        for idx in range(nm):
            if S.wside[idx] == 1:
                S.v[mem[idx]] = p
        recompute_group(S, hh)
        recompute_group(S, p)
        refresh_group(S, hh, d, pf)
        refresh_group(S, p, d, pf)
    else:
        for c in range(K):
            if S.v[c] == h2:
                S.v[c] = h1
        recompute_group(S, h1)
        S.cnt2[h2] = 0
        S.nc2[h2] = 0
        S.sq2[:, h2] = 0.0
        delete_group(S, h2)
        hh = h1 - 1 if h1 > h2 else h1
        refresh_group(S, hh, d, pf)
    return 1 if split else 2, 1, logr


@njit(cache=True)
def empty_v(S, d, pf, rng):
    """Birth or death of a second-level cluster holding no community."""
    K = S.dims[0]
    H = S.dims[1]
    beta = pf[4]
    hnz = count_nonempty(S.nc2, H)
    E = H - hnz
    add = True if E == 0 else rng.random() < 0.5
    wc = S.wcnt
    pv0 = log_pv(S.nc2, H, K, beta)
    if add:
        if H + 1 > K:
            return 1, 0, -np.inf
        for h in range(H):
            wc[h] = S.nc2[h]
        wc[H] = 0
        logr = log_pv(wc, H + 1, K, beta) - pv0
        q_fwd = (0.0 if E == 0 else LOG_HALF) - math.log(H + 1)
        q_rev = LOG_HALF - math.log(E + 1)
        logr += q_rev - q_fwd
        if math.log(rng.random()) < logr:
            p = rng.integers(0, H + 1)
            insert_group(S, p)
            refresh_group(S, p, d, pf)
            return 1, 1, logr
        return 1, 0, logr
    r = rng.integers(0, E)
    b = -1
    for h in range(H):
        if S.nc2[h] == 0:
            if r == 0:
                b = h
                break
            r -= 1
    nh = 0
    for h in range(H):
        if h != b:
            wc[nh] = S.nc2[h]
            nh += 1
    logr = log_pv(wc, H - 1, K, beta) - pv0
    q_fwd = LOG_HALF - math.log(E)
    q_rev = (0.0 if E == 1 else LOG_HALF) - math.log(H)
    logr += q_rev - q_fwd
    if math.log(rng.random()) < logr:
        delete_group(S, b)
        return 2, 1, logr
    return 2, 0, logr


# ---------------------------------------------------------------------------
# dimension and whole-state quantities
# ---------------------------------------------------------------------------

@njit(cache=True)
def side_dim_delta(S, d, ds, pf, pi):
    """Data log-likelihood change of this side when moving from ``d`` to ``ds``.

    Only columns below ``max(d, ds)`` enter the computation.
    """
    V, n, m = S.X.shape
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    kappa0 = pf[0]
    nu0 = pf[1]
    lam0 = pf[2]
    dm = max(d, ds)
    lo = min(d, ds)
    total = 0.0
    for vw in range(V):
        delta = S.delta[vw]
        for k in range(K):
            n_k = S.cnt[k]
            if n_k == 0:
                continue
            build_scale(n_k, S.sums[vw, k], S.outer[vw, k], delta, dm, kappa0, S.wD)
            chol_logdet(S.wD, dm, S.wL)
            ld = 0.0
            sld = 0.0
            v_lo = 0.0
            for a in range(dm):
                ld += 2.0 * math.log(S.wL[a, a])
                sld += math.log(delta[a])
                if a + 1 == lo:
                    v_lo = left_value(n_k, lo, ld, sld, kappa0, nu0)
            v_hi = left_value(n_k, dm, ld, sld, kappa0, nu0)
            total += (v_hi - v_lo) if ds > d else (v_lo - v_hi)
        pr = S.prior_r[vw]
        R = H if second else K
        for r in range(R):
            if second:
                rv = right_cols(S.cnt2[r], S.sq2[vw, r], pr, lam0, lo, dm)
            else:
                rv = right_cols(S.cnt[r], S.sq[vw, r], pr, lam0, lo, dm)
            total += -rv if ds > d else rv
    return total


@njit(cache=True)
def side_dim_profile(S, dmax, pf, pi, out):
    """``out[d] += log p(data of this side | z, d)`` for d in 1..dmax."""
    V, n, m = S.X.shape
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    lam0 = pf[2]
    for vw in range(V):
        for k in range(K):
            left_marg_prefix(S.cnt[k], S.sums[vw, k], S.outer[vw, k], S.delta[vw], dmax,
                             pf[0], pf[1], S.wD, S.wL, out)
        pr = S.prior_r[vw]
        R = H if second else K
        for r in range(R):
            n_r = S.cnt2[r] if second else S.cnt[r]
            sq = S.sq2[vw, r] if second else S.sq[vw, r]
            tail = right_cols(n_r, sq, pr, lam0, dmax, m)
            out[dmax] += tail
            for d in range(dmax - 1, 0, -1):
                tail += right_cols(n_r, sq, pr, lam0, d, d + 1)
                out[d] += tail
    return out


@njit(cache=True)
def side_loglik(S, d, pf, pi):
    """Data marginal plus allocation priors for this side (no K or d prior)."""
    V, n, m = S.X.shape
    K = S.dims[0]
    H = S.dims[1]
    second = pi[0] == 1
    total = 0.0
    for vw in range(V):
        pr = S.prior_r[vw]
        for k in range(K):
            total += left_marg(S.cnt[k], S.sums[vw, k], S.outer[vw, k], S.delta[vw], d,
                               pf[0], pf[1], S.wD, S.wL)
            if not second:
                total += right_cols(S.cnt[k], S.sq[vw, k], pr, pf[2], d, m)
        if second:
            for h in range(H):
                total += right_cols(S.cnt2[h], S.sq2[vw, h], pr, pf[2], d, m)
    total += log_crp(S.cnt, K, pf[3])
    if second:
        total += log_pv(S.nc2, H, K, pf[4]) - math.log(K)
    return total
