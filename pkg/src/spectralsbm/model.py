"""Collapsed blockmodel on spectral embeddings.

The first ``d`` embedding coordinates of each community follow a Gaussian
with a normal inverse-Wishart prior; each trailing coordinate is zero-mean
Gaussian with a per-community (or, with the second level switched on, per
variance-cluster) scaled inverse chi-squared variance.  Everything here is
in log space and integrates out all location and scale parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from . import _kernels as kn

D_PRIORS = ("constrained", "unconstrained")
MCAP_DEFAULT = 30


@dataclass(frozen=True)
class HyperParams:
    """Fixed prior constants.

    ``delta_diag`` and ``sigma0_sq`` are per-column vectors; when left as
    ``None`` they are filled in from the K-means initialisation by the
    sampler.  The ``_prime`` variants apply to the destination-side
    embedding in directed and bipartite modes and default to the unprimed
    values when those are given explicitly.
    """

    kappa0: float = 1.0
    nu0: float = 1.0
    lambda0: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    omega: float = 0.1
    delta_geom: float = 0.1
    xi: float = 0.8
    l_max: int = 5
    d_prior: str = "constrained"
    second_level: bool = False
    m_cap: int | None = None
    delta_diag: np.ndarray | None = None
    sigma0_sq: np.ndarray | None = None
    delta_diag_prime: np.ndarray | None = None
    sigma0_sq_prime: np.ndarray | None = None

    def __post_init__(self):
        for name in ("kappa0", "nu0", "lambda0", "alpha", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("omega", "delta_geom", "xi"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if int(self.l_max) < 1:
            raise ValueError("l_max must be at least 1")
        if self.d_prior not in D_PRIORS:
            raise ValueError(f"d_prior must be one of {D_PRIORS}")
        if self.m_cap is not None and self.m_cap < 1:
            raise ValueError("m_cap must be positive")
        for name in ("delta_diag", "sigma0_sq", "delta_diag_prime", "sigma0_sq_prime"):
            val = getattr(self, name)
            if val is not None:
                arr = np.atleast_1d(np.asarray(val, dtype=float))
                if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name} entries must be positive and finite")
                object.__setattr__(self, name, arr)

    @property
    def constrained(self) -> bool:
        return self.d_prior == "constrained"

    def cap(self, m: int) -> int:
        return min(m, self.m_cap or MCAP_DEFAULT)

    def with_scales(self, **kw) -> HyperParams:
        return replace(self, **kw)

    def view_arrays(self, m: int, view: int = 0):
        """``(delta, sigma0_sq)`` broadcast to length ``m`` for one view."""
        delta = self.delta_diag_prime if view and self.delta_diag_prime is not None else self.delta_diag
        sig = self.sigma0_sq_prime if view and self.sigma0_sq_prime is not None else self.sigma0_sq
        if delta is None or sig is None:
            raise ValueError("delta_diag and sigma0_sq are not set")
        return _broadcast(delta, m, "delta_diag"), _broadcast(sig, m, "sigma0_sq")

    def float_params(self) -> np.ndarray:
        return np.array([self.kappa0, self.nu0, self.lambda0, self.alpha, self.beta,
                         math.log1p(-self.omega)])

    def int_params(self, m: int, k_max: int) -> np.ndarray:
        return np.array([int(self.second_level), int(self.constrained), self.cap(m), k_max],
                        dtype=np.int64)


def _broadcast(a, m, name):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.size == 1:
        return np.full(m, float(a[0]))
    if a.size < m:
        raise ValueError(f"{name} has {a.size} entries, need {m}")
    return a[:m]


@dataclass
class ClusterStats:
    """Running sufficient statistics of one community.

    ``outer`` covers the first ``m_cap`` coordinates so the leading block can
    be re-sized without revisiting data rows.
    """

    m: int
    m_cap: int
    n: int = 0
    sum_x: np.ndarray = field(default=None)
    sum_sq: np.ndarray = field(default=None)
    outer: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sum_x is None:
            self.sum_x = np.zeros(self.m)
            self.sum_sq = np.zeros(self.m)
            self.outer = np.zeros((self.m_cap, self.m_cap))

    @classmethod
    def from_rows(cls, rows, m_cap=None) -> ClusterStats:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        m = rows.shape[1]
        st = cls(m, m_cap or min(m, MCAP_DEFAULT))
        for r in rows:
            st.add_row(r)
        return st

    def add_row(self, x):
        x = np.asarray(x, dtype=float)
        self.n += 1
        self.sum_x += x
        self.sum_sq += x * x
        head = x[: self.m_cap]
        self.outer += np.outer(head, head)

    def remove_row(self, x):
        if self.n == 0:
            raise ValueError("cannot remove a row from an empty cluster")
        x = np.asarray(x, dtype=float)
        self.n -= 1
        self.sum_x -= x
        self.sum_sq -= x * x
        head = x[: self.m_cap]
        self.outer -= np.outer(head, head)

    def __add__(self, other: ClusterStats) -> ClusterStats:
        return ClusterStats(self.m, self.m_cap, self.n + other.n, self.sum_x + other.sum_x,
                            self.sum_sq + other.sum_sq, self.outer + other.outer)

    def copy(self) -> ClusterStats:
        return ClusterStats(self.m, self.m_cap, self.n, self.sum_x.copy(),
                            self.sum_sq.copy(), self.outer.copy())


def _work(d):
    return np.zeros((d, d)), np.zeros((d, d)), np.zeros(d)


def log_marg_left(stats: ClusterStats, d: int, hp: HyperParams, view: int = 0) -> float:
    """Log marginal likelihood of a community's first ``d`` coordinates."""
    if not 1 <= d <= stats.m_cap:
        raise ValueError(f"d={d} outside 1..{stats.m_cap}")
    delta, _ = hp.view_arrays(stats.m, view)
    D, L, _ = _work(d)
    return kn.left_marg(stats.n, stats.sum_x, stats.outer, delta, d, hp.kappa0, hp.nu0, D, L)


def log_marg_right(stats: ClusterStats, d: int, hp: HyperParams, view: int = 0) -> float:
    """Log marginal likelihood of columns ``d..m-1``; pass aggregated stats for a variance cluster."""
    _, sig = hp.view_arrays(stats.m, view)
    return kn.right_cols(stats.n, stats.sum_sq, hp.lambda0 * sig, hp.lambda0, d, stats.m)


def log_pred_left(x, stats_minus: ClusterStats, d: int, hp: HyperParams, view: int = 0) -> float:
    """Multivariate Student-t predictive for ``x[:d]``."""
    delta, _ = hp.view_arrays(stats_minus.m, view)
    D, L, y = _work(d)
    return kn.left_pred(np.asarray(x, dtype=float), stats_minus.n, stats_minus.sum_x,
                        stats_minus.outer, delta, d, hp.kappa0, hp.nu0, D, L, y)


def log_pred_right(x, stats_minus: ClusterStats, d: int, hp: HyperParams, view: int = 0) -> float:
    """Sum of univariate Student-t predictives over the trailing columns."""
    _, sig = hp.view_arrays(stats_minus.m, view)
    return kn.right_pred(np.asarray(x, dtype=float), stats_minus.n, stats_minus.sum_sq,
                         hp.lambda0 * sig, hp.lambda0, d, stats_minus.m)


def counts_of(z, K: int) -> np.ndarray:
    return np.bincount(np.asarray(z, dtype=np.int64), minlength=K)[:K]


def log_crp_z(counts, K: int, alpha: float) -> float:
    """Dirichlet-multinomial probability of labelled allocations with counts ``counts``."""
    c = np.asarray(counts, dtype=float)
    if len(c) != K:
        raise ValueError("counts must have length K")
    a = alpha / K
    return float(gammaln(alpha) - gammaln(c.sum() + alpha) + np.sum(gammaln(c + a)) - K * gammaln(a))


def log_prior_v(v, K: int, H: int, beta: float) -> float:
    """Same Dirichlet-multinomial form as ``log_crp_z`` with communities as the units."""
    v = np.asarray(v, dtype=np.int64)
    if len(v) != K:
        raise ValueError("v must have length K")
    if len(v) and (v.min() < 0 or v.max() >= H):
        raise ValueError("v entries must lie in 0..H-1")
    return log_crp_z(np.bincount(v, minlength=H), H, beta)


def log_prior_K(K: int, omega: float) -> float:
    if K < 1:
        return -math.inf
    return (K - 1) * math.log1p(-omega) + math.log(omega)


def log_prior_H(H: int, K: int) -> float:
    return -math.log(K) if 1 <= H <= K else -math.inf


def log_prior_d(d: int, k_nonempty: int, hp: HyperParams, m: int) -> float:
    """Constrained: uniform on 1..min(K_nonempty, m_cap).  Otherwise geometric."""
    mcap = hp.cap(m)
    if d < 1 or d > mcap:
        return -math.inf
    if hp.constrained:
        if d > k_nonempty:
            return -math.inf
        return -math.log(min(k_nonempty, mcap))
    return (d - 1) * math.log1p(-hp.delta_geom) + math.log(hp.delta_geom)


@dataclass
class ChainState:
    """Current (d, K, H, z, v) for every side plus compiled statistics.

    One side for undirected and shared directed modes, two for
    co-clustering; ``sides[s]`` is a ``_kernels.Side``.
    """

    d: int
    sides: list
    m: int

    def K(self, s: int = 0) -> int:
        return int(self.sides[s].dims[0])

    def H(self, s: int = 0) -> int:
        return int(self.sides[s].dims[1])

    def z(self, s: int = 0) -> np.ndarray:
        return self.sides[s].z

    def v(self, s: int = 0) -> np.ndarray:
        return self.sides[s].v[: self.K(s)]

    def k_nonempty(self, s: int = 0) -> int:
        return int(np.count_nonzero(self.sides[s].cnt[: self.K(s)]))

    def h_nonempty(self, s: int = 0) -> int:
        return int(np.count_nonzero(self.sides[s].nc2[: self.H(s)]))

    def k_min(self) -> int:
        return min(self.k_nonempty(s) for s in range(len(self.sides)))


def build_state(views_per_side, z_list, K_list, d, hp: HyperParams, v_list=None, H_list=None,
                k_max: int = 200) -> ChainState:
    """Assemble a ``ChainState`` from explicit allocations.

    ``views_per_side[s]`` is a list of (n_s, m) arrays that share side s's
    allocation.  Hyperparameter scale vectors must already be set.
    """
    m = views_per_side[0][0].shape[1]
    mc = hp.cap(m)
    sides = []
    view_idx = 0
    for s, views in enumerate(views_per_side):
        X = np.stack([np.asarray(x, dtype=float) for x in views])
        deltas, prs = [], []
        for _ in views:
            delta, sig = hp.view_arrays(m, view_idx)
            deltas.append(delta[:mc])
            prs.append(hp.lambda0 * sig)
            view_idx += 1
        K = int(K_list[s])
        if v_list is None or not hp.second_level:
            v, H = np.zeros(K, np.int64), 1
        else:
            v, H = np.asarray(v_list[s], np.int64), int(H_list[s])
        kcap = max(k_max, K) + 1
        side = kn.make_side(X, np.array(deltas), np.array(prs), z_list[s], K, v, H, kcap)
        sides.append(side)
    state = ChainState(int(d), sides, m)
    refresh(state, hp, k_max)
    return state


def refresh(state: ChainState, hp: HyperParams, k_max: int):
    pf, pi = hp.float_params(), hp.int_params(state.m, k_max)
    for side in state.sides:
        kn.recompute_stats(side)
        kn.refresh_all(side, state.d, pf, pi)


def log_joint(state: ChainState, hp: HyperParams, k_max: int = 200) -> float:
    """Collapsed log posterior up to a constant, summed over all sides."""
    pf, pi = hp.float_params(), hp.int_params(state.m, k_max)
    total = 0.0
    for s, side in enumerate(state.sides):
        total += kn.side_loglik(side, state.d, pf, pi)
        total += log_prior_K(state.K(s), hp.omega)
    return total + log_prior_d(state.d, state.k_min(), hp, state.m)
