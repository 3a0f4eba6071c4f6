"""Reference implementations written directly from the model definition.

These use plain numpy/scipy and share no code with the compiled kernels, so
agreement between the two is meaningful.
"""

from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
from scipy.special import gammaln, multigammaln


def niw_log_marginal(rows, d, kappa0, nu0, delta):
    """log p(rows[:, :d]) under N(mu, Sigma), mu|Sigma ~ N(0, Sigma/kappa0), Sigma ~ IW(nu0+d-1, diag(delta))."""
    rows = np.atleast_2d(np.asarray(rows, float))[:, :d]
    n = len(rows)
    if n == 0:
        return 0.0
    df0 = nu0 + d - 1
    dfn = df0 + n
    kn = kappa0 + n
    L0 = np.diag(np.asarray(delta, float)[:d])
    s = rows.sum(axis=0)
    Ln = L0 + rows.T @ rows - np.outer(s, s) / kn
    return float(
        -0.5 * n * d * math.log(math.pi)
        + multigammaln(0.5 * dfn, d) - multigammaln(0.5 * df0, d)
        + 0.5 * df0 * np.linalg.slogdet(L0)[1] - 0.5 * dfn * np.linalg.slogdet(Ln)[1]
        + 0.5 * d * (math.log(kappa0) - math.log(kn))
    )


def invchi2_log_marginal(col, lam0, sigma0_sq):
    """log p(col) for iid N(0, s2) with s2 ~ scaled-Inv-chi2(lam0, sigma0_sq)."""
    col = np.asarray(col, float)
    n = len(col)
    if n == 0:
        return 0.0
    a0 = lam0 * sigma0_sq
    return float(
        -0.5 * n * math.log(math.pi) + gammaln(0.5 * (lam0 + n)) - gammaln(0.5 * lam0)
        + 0.5 * lam0 * math.log(a0) - 0.5 * (lam0 + n) * math.log(a0 + np.sum(col ** 2))
    )


def dm_log_prob(counts, alpha):
    """Labelled Dirichlet-multinomial probability with symmetric alpha/K weights."""
    c = np.asarray(counts, float)
    K = len(c)
    return float(gammaln(alpha) - gammaln(c.sum() + alpha) + np.sum(gammaln(c + alpha / K))
                 - K * gammaln(alpha / K))


def geom_log_pmf(x, p):
    return (x - 1) * math.log(1 - p) + math.log(p)


def data_log_lik(X, z, d, hp, v=None):
    """Sum of leading-block and trailing-block marginals; ``v`` pools trailing variances."""
    X = np.asarray(X, float)
    m = X.shape[1]
    z = np.asarray(z)
    total = 0.0
    for k in np.unique(z):
        total += niw_log_marginal(X[z == k], d, hp["kappa0"], hp["nu0"], hp["delta"])
    groups = [z == k for k in np.unique(z)] if v is None else \
        [np.isin(z, np.flatnonzero(np.asarray(v) == h)) for h in np.unique(v)]
    for g in groups:
        for j in range(d, m):
            total += invchi2_log_marginal(X[g, j], hp["lambda0"], hp["sigma0_sq"][j])
    return total


def enumerate_posterior(X, hp, k_max, m_cap, constrained=True, second_level=False, Xp=None):
    """Exact joint over labelled allocations, K (<= k_max), d (and v, H).

    Returns a dict mapping (K_nonempty, d[, H_nonempty]) to probability, and
    the full list of (state, logp) for further checks.  With ``Xp`` given the
    rows of ``Xp`` are a second view sharing the allocation.
    """
    n = len(X)
    out = {}
    states = []
    for K in range(1, k_max + 1):
        lpK = geom_log_pmf(K, hp["omega"])
        for z in itertools.product(range(K), repeat=n):
            z = np.array(z)
            counts = np.bincount(z, minlength=K)
            knz = int(np.count_nonzero(counts))
            lpz = dm_log_prob(counts, hp["alpha"])
            dmax = min(knz, m_cap) if constrained else m_cap
            vs = [(None, 1, 0.0)]
            if second_level:
                vs = []
                for H in range(1, K + 1):
                    for v in itertools.product(range(H), repeat=K):
                        lpv = dm_log_prob(np.bincount(v, minlength=H), hp["beta"]) - math.log(K)
                        vs.append((np.array(v), H, lpv))
            for d in range(1, dmax + 1):
                lpd = -math.log(dmax) if constrained else geom_log_pmf(d, hp["delta_geom"])
                for v, H, lpv in vs:
                    vv = None if v is None else v
                    ll = data_log_lik(X, z, d, hp, vv)
                    if Xp is not None:
                        ll += data_log_lik(Xp, z, d, hp, vv)
                    lp = lpK + lpz + lpd + lpv + ll
                    hnz = 1 if v is None else len(np.unique(v))
                    key = (knz, d) if not second_level else (knz, d, hnz)
                    states.append(((K, tuple(z), d, None if v is None else tuple(v)), lp))
                    out[key] = np.logaddexp(out.get(key, -np.inf), lp)
    lz = np.logaddexp.reduce(np.array(list(out.values())))
    return {k: float(np.exp(v - lz)) for k, v in out.items()}, states, lz


def enumerate_cocluster(X, Xp, hp, k_max, m_cap, constrained=True):
    """Exact joint over (z, K) for rows, (z', K') for columns and the shared d.

    Returns a dict mapping (K_nonempty, K'_nonempty, d) to probability.
    """
    def side_terms(Y):
        terms = []
        for K in range(1, k_max + 1):
            for z in itertools.product(range(K), repeat=len(Y)):
                z = np.array(z)
                counts = np.bincount(z, minlength=K)
                lp = geom_log_pmf(K, hp["omega"]) + dm_log_prob(counts, hp["alpha"])
                lik = [data_log_lik(Y, z, d, hp) for d in range(1, m_cap + 1)]
                terms.append((int(np.count_nonzero(counts)), lp, lik))
        return terms

    rows, cols = side_terms(X), side_terms(Xp)
    out = {}
    for k1, lp1, l1 in rows:
        for k2, lp2, l2 in cols:
            dmax = min(k1, k2, m_cap) if constrained else m_cap
            for d in range(1, dmax + 1):
                lpd = -math.log(dmax) if constrained else geom_log_pmf(d, hp["delta_geom"])
                lp = lp1 + lp2 + lpd + l1[d - 1] + l2[d - 1]
                key = (k1, k2, d)
                out[key] = np.logaddexp(out.get(key, -np.inf), lp)
    lz = np.logaddexp.reduce(np.array(list(out.values())))
    return {k: float(np.exp(v - lz)) for k, v in out.items()}



LOG_2PI = math.log(2 * math.pi)


def _norm_logpdf(x, mu, var):
    return -0.5 * (LOG_2PI + math.log(var) + (x - mu) ** 2 / var)


def _invgamma_logpdf(s2, shape, scale):
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1) * math.log(s2) - scale / s2


def _log_integral(logf, lo, hi, ref, points=None):
    """log of the integral of exp(logf) over [lo, hi], rescaled by ``ref``."""
    from scipy import integrate

    with warnings.catch_warnings():
        # roundoff warnings in the far tails; accuracy is asserted by the callers
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(lambda t: math.exp(logf(t) - ref), lo, hi, points=points,
                                epsabs=0.0, epsrel=1e-10, limit=200)
    # far-tail grid points (|ref| ~ 1e16) lose all digits; they carry no mass
    return ref + math.log(val) if val > 0 else -math.inf


def _outer_range(logf, lo, hi, drop=80.0):
    """Peak value, peak location and the sub-interval where logf is within ``drop`` of it."""
    # heavy upper tails (small shape parameters) decay slowly in log s2
    while logf(hi) > max(logf(lo), logf(0.5 * (lo + hi))) - drop:
        hi += 50.0
    grid = np.linspace(lo, hi, 261)
    vals = np.array([logf(t) for t in grid])
    k = int(np.argmax(vals))
    keep = np.flatnonzero(vals > vals[k] - drop)
    a = grid[max(keep[0] - 1, 0)]
    b = grid[min(keep[-1] + 1, len(grid) - 1)]
    return float(vals[k]), float(grid[k]), float(a), float(b)


def quad_left_d1(x, kappa0, nu0, delta):
    """Integrate mu and s2 numerically: x_i ~ N(mu, s2), mu ~ N(0, s2/kappa0), s2 ~ IG(nu0/2, delta/2)."""
    x = [float(v) for v in np.asarray(x, float)]
    n = len(x)
    centre = sum(x) / (n + kappa0)

    def joint(mu, s2):
        return (sum(_norm_logpdf(v, mu, s2) for v in x) + _norm_logpdf(mu, 0.0, s2 / kappa0)
                + _invgamma_logpdf(s2, 0.5 * nu0, 0.5 * delta))

    def inner(log_s2):
        s2 = math.exp(log_s2)
        width = math.sqrt(s2 / (n + kappa0))
        # the mu integrand peaks at ``centre`` for every s2
        return _log_integral(lambda mu: joint(mu, s2), centre - 14 * width, centre + 14 * width,
                             joint(centre, s2), points=[centre]) + log_s2

    ref, peak, a, b = _outer_range(inner, -40.0, 25.0)
    return _log_integral(inner, a, b, ref, points=[peak])


def quad_right_col(x, lam0, sigma0_sq):
    """Integrate s2 numerically: x_i ~ N(0, s2), s2 ~ scaled-Inv-chi2(lam0, sigma0_sq)."""
    x = [float(v) for v in np.asarray(x, float)]

    def f(log_s2):
        s2 = math.exp(log_s2)
        return (sum(_norm_logpdf(v, 0.0, s2) for v in x)
                + _invgamma_logpdf(s2, 0.5 * lam0, 0.5 * lam0 * sigma0_sq) + log_s2)

    ref, peak, a, b = _outer_range(f, -40.0, 25.0)
    return _log_integral(f, a, b, ref, points=[peak])
