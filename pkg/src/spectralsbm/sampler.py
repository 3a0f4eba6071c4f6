"""Chain driver: initialisation, move schedule, recording and multi-chain runs."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from . import _kernels as kn
from .embed import Embedding, elbow
from .model import ChainState, HyperParams, build_state, log_joint, log_prior_d, refresh
from .summary import Trace

log = logging.getLogger(__name__)

MODES = ("undirected", "directed_shared", "directed_cocluster", "bipartite")
MOVES = ("gibbs_z", "split", "merge", "add_empty", "remove_empty", "dim",
         "gibbs_v", "split_v", "merge_v", "add_empty_v", "remove_empty_v")
THREADS_ENV = "SBM_SPEC_THREADS"


class SamplerError(RuntimeError):
    pass


@dataclass
class MoveSchedule:
    """Moves per sweep plus chain length.  ``iters`` counts every sweep, burn-in included."""

    gibbs_scan: int = 1
    split_merge: int = 1
    empty_community: int = 1
    dim_change: int = 3
    gibbs_v: int = 1
    split_merge_v: int = 1
    empty_v: int = 1
    iters: int = 500_000
    burn_in: int = 25_000
    thin: int = 10
    refresh_every: int = 50

    def __post_init__(self):
        counts = (self.gibbs_scan, self.split_merge, self.empty_community, self.dim_change,
                  self.gibbs_v, self.split_merge_v, self.empty_v)
        if min(counts) < 0:
            raise ValueError("move counts must be non-negative")
        if self.iters < 1 or self.burn_in < 0 or self.burn_in >= self.iters:
            raise ValueError("need iters >= 1 and 0 <= burn_in < iters")
        if self.thin < 1 or self.refresh_every < 1:
            raise ValueError("thin and refresh_every must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    n_chains: int = 1
    mode: str = "undirected"
    init_K: int = 10
    init_K_prime: int | None = None
    marginalize_d: bool = False
    k_max: int = 200
    debug: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.init_K < 1 or (self.init_K_prime is not None and self.init_K_prime < 1):
            raise ValueError("init_K must be at least 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if self.k_max < max(self.init_K, self.init_K_prime or 1):
            raise ValueError("k_max must be at least init_K")


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Counter-based stream for one chain, independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def side_views(emb: Embedding, mode: str) -> list[list[np.ndarray]]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    X = np.asarray(emb.X, dtype=float)
    if mode == "undirected":
        return [[X]]
    if emb.X_prime is None:
        raise ValueError(f"mode {mode} needs the destination-side embedding")
    Xp = np.asarray(emb.X_prime, dtype=float)
    if Xp.shape[1] != X.shape[1]:
        raise ValueError("embeddings disagree on m")
    if mode == "directed_shared":
        if Xp.shape[0] != X.shape[0]:
            raise ValueError("directed_shared needs equally many source and destination rows")
        return [[X, Xp]]
    if mode == "directed_cocluster" and Xp.shape[0] != X.shape[0]:
        raise ValueError("directed graphs have as many destination rows as source rows")
    return [[X], [Xp]]


def kmeans_init(views, K: int, m_cap: int, rng: np.random.Generator) -> np.ndarray:
    n = views[0].shape[0]
    K = min(K, n)
    cols = min(K, m_cap)
    data = np.hstack([x[:, :cols] for x in views])
    if K == 1:
        return np.zeros(n, np.int64)
    km = KMeans(n_clusters=K, n_init=10, random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(data)
    _, z = np.unique(labels, return_inverse=True)
    return z.astype(np.int64)


def prior_scales(x: np.ndarray, z: np.ndarray, m_cap: int):
    """Average within-cluster variance (leading block) and total column variance."""
    total = x.var(axis=0)
    floor = max(float(total.max()), 1.0) * 1e-12
    total = np.maximum(total, floor)
    within = []
    for k in np.unique(z):
        rows = x[z == k, :m_cap]
        if len(rows) > 1:
            within.append(rows.var(axis=0))
    delta = np.mean(within, axis=0) if within else total[:m_cap].copy()
    delta = np.where(delta > floor, delta, total[:m_cap])
    return delta, total


def resolve_hyperparams(hp: HyperParams, views_per_side, z_list, m: int) -> HyperParams:
    """Fill missing per-column prior scales from the initial allocation.

    Explicit unprimed scales also serve the destination-side view.
    """
    mc = hp.cap(m)
    flat = [(x, z_list[s]) for s, views in enumerate(views_per_side) for x in views]
    explicit = hp.delta_diag is not None and hp.sigma0_sq is not None
    names = [("delta_diag", "sigma0_sq"), ("delta_diag_prime", "sigma0_sq_prime")]
    fill = {}
    for idx, (x, z) in enumerate(flat[:2]):
        dname, sname = names[idx]
        if idx == 1 and explicit:
            continue
        if getattr(hp, dname) is None or getattr(hp, sname) is None:
            delta, total = prior_scales(x, z, mc)
            if getattr(hp, dname) is None:
                fill[dname] = np.concatenate([delta, total[mc:]])
            if getattr(hp, sname) is None:
                fill[sname] = total
    return hp.with_scales(**fill) if fill else hp


def initial_d(emb: Embedding, views_per_side, upper: int) -> int:
    spec = np.asarray(emb.spectrum, dtype=float)
    if spec.size == 0 or not np.all(np.isfinite(spec)):
        spec = np.sum(views_per_side[0][0] ** 2, axis=0)
    return int(np.clip(elbow(spec[:upper] if upper < len(spec) else spec), 1, upper))


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

class Chain:
    """One Markov chain over (d, K, H, z, v) for every side."""

    def __init__(self, emb: Embedding, hp: HyperParams, cfg: RunConfig, chain: int = 0,
                 z_init=None, d_init=None, v_init=None):
        self.cfg = cfg
        self.chain = chain
        self.rng = chain_rng(cfg.seed, chain)
        views = side_views(emb, cfg.mode)
        for vs in views:
            for x in vs:
                if not np.all(np.isfinite(x)):
                    raise ValueError("embedding contains non-finite entries")
        m = views[0][0].shape[1]
        mc = hp.cap(m)
        if z_init is None:
            ks = [cfg.init_K, cfg.init_K_prime or cfg.init_K]
            z_init = [kmeans_init(vs, ks[s], mc, self.rng) for s, vs in enumerate(views)]
        z_init = [np.asarray(z, np.int64) for z in z_init]
        K_list = [int(z.max()) + 1 for z in z_init]
        if max(K_list) > cfg.k_max:
            raise ValueError("initial allocation exceeds k_max")
        self.hp = hp = resolve_hyperparams(hp, views, z_init, m)
        kmin = min(len(np.unique(z)) for z in z_init)
        upper = min(mc, kmin) if hp.constrained else mc
        if d_init is None:
            d_init = initial_d(emb, views, upper)
        if not 1 <= d_init <= upper:
            raise ValueError(f"initial d={d_init} outside 1..{upper}")
        if hp.second_level:
            v_list = v_init or [np.arange(K) for K in K_list]
            H_list = [int(np.max(v)) + 1 for v in v_list]
        else:
            v_list, H_list = None, None
        self.state = build_state(views, z_init, K_list, d_init, hp, v_list, H_list, cfg.k_max)
        self.m = m
        self.mc = mc
        self.pf = hp.float_params()
        self.pi = hp.int_params(m, cfg.k_max)
        self.counts = {k: [0, 0] for k in MOVES}
        self.sweeps = 0

    # -- helpers ----------------------------------------------------------
    def _kmin_other(self, s: int) -> int:
        if len(self.state.sides) == 1:
            return kn.NO_LIMIT
        return self.state.k_nonempty(1 - s)

    def _record(self, name, kind_accept):
        kind, acc = kind_accept[0], kind_accept[1]
        if kind == 0:
            return
        names = {"z": ("split", "merge"), "e": ("add_empty", "remove_empty"),
                 "v": ("split_v", "merge_v"), "ev": ("add_empty_v", "remove_empty_v")}[name]
        c = self.counts[names[kind - 1]]
        c[0] += 1
        c[1] += int(acc)

    def d_upper(self) -> int:
        if self.hp.constrained:
            return min(self.mc, self.state.k_min())
        return self.mc

    def _log_prior_d(self, d: int) -> float:
        return log_prior_d(d, self.state.k_min(), self.hp, self.m)

    def _window(self, d: int, upper: int):
        lo, hi = max(1, d - self.hp.l_max), min(d + self.hp.l_max, upper)
        return [c for c in range(lo, hi + 1) if c != d]

    def dim_move(self):
        st, hp = self.state, self.hp
        d = st.d
        upper = self.d_upper()
        win = self._window(d, upper)
        if not win:
            return
        w = np.array([hp.xi ** abs(c - d) for c in win])
        ds = win[int(np.searchsorted(np.cumsum(w), self.rng.random() * w.sum(), side="right"))]
        z_d = w.sum()
        z_ds = sum(hp.xi ** abs(c - ds) for c in self._window(ds, upper))
        logr = sum(kn.side_dim_delta(S, d, ds, self.pf, self.pi) for S in st.sides)
        logr += self._log_prior_d(ds) - self._log_prior_d(d) + math.log(z_d) - math.log(z_ds)
        self.counts["dim"][0] += 1
        if math.log(self.rng.random()) < logr:
            self.counts["dim"][1] += 1
            self.set_d(ds)

    def set_d(self, d: int):
        self.state.d = int(d)
        for S in self.state.sides:
            kn.refresh_all(S, self.state.d, self.pf, self.pi)

    def d_conditional(self) -> np.ndarray:
        """Exact ``p(d | z, v, X)`` over 1..m_cap (zero outside the support)."""
        upper = self.d_upper()
        out = np.zeros(upper + 1)
        for S in self.state.sides:
            kn.side_dim_profile(S, upper, self.pf, self.pi, out)
        lp = np.array([out[d] + self._log_prior_d(d) for d in range(1, upper + 1)])
        p = np.exp(lp - lp.max())
        full = np.zeros(self.mc)
        full[:upper] = p / p.sum()
        return full

    def sweep(self):
        st, sch = self.state, self.sched
        d = st.d
        for s, S in enumerate(st.sides):
            for _ in range(sch.gibbs_scan):
                moved = kn.gibbs_z(S, d, self.pf, self.pi, self._kmin_other(s), self.rng)
                self.counts["gibbs_z"][0] += len(S.z)
                self.counts["gibbs_z"][1] += moved
            for _ in range(sch.split_merge):
                self._record("z", kn.split_merge_z(S, d, self.pf, self.pi,
                                                   self._kmin_other(s), self.rng))
            for _ in range(sch.empty_community):
                self._record("e", kn.empty_z(S, d, self.pf, self.pi, self.rng))
            if self.hp.second_level:
                for _ in range(sch.gibbs_v):
                    moved = kn.gibbs_v(S, d, self.pf, self.rng)
                    self.counts["gibbs_v"][0] += int(S.dims[0])
                    self.counts["gibbs_v"][1] += moved
                for _ in range(sch.split_merge_v):
                    self._record("v", kn.split_merge_v(S, d, self.pf, self.rng))
                for _ in range(sch.empty_v):
                    self._record("ev", kn.empty_v(S, d, self.pf, self.rng))
        if self.cfg.marginalize_d:
            self.d_probs = self.d_conditional()
            new = 1 + int(np.searchsorted(np.cumsum(self.d_probs), self.rng.random(), side="right"))
            new = min(new, self.d_upper())
            if new != st.d:
                self.set_d(new)
        else:
            for _ in range(sch.dim_change):
                self.dim_move()
        self.sweeps += 1
        if self.sweeps % sch.refresh_every == 0:
            refresh(st, self.hp, self.cfg.k_max)
        if self.cfg.debug:
            self.check()

    def check(self):
        """Assert internal consistency; used in debug mode and tests."""
        st = self.state
        if self.hp.constrained and st.d > st.k_min():
            raise SamplerError(f"d={st.d} exceeds the number of non-empty communities")
        for S in st.sides:
            K, H = int(S.dims[0]), int(S.dims[1])
            if S.z.min() < 0 or S.z.max() >= K:
                raise SamplerError("allocation out of range")
            cnt = np.bincount(S.z, minlength=K)[:K]
            if not np.array_equal(cnt, S.cnt[:K]):
                raise SamplerError("community counts out of sync")
            if self.hp.second_level:
                v = S.v[:K]
                if v.min() < 0 or v.max() >= H or H > K:
                    raise SamplerError("second-level labels out of range")
                if not np.array_equal(np.bincount(v, minlength=H)[:H], S.nc2[:H]):
                    raise SamplerError("second-level counts out of sync")
            for vw in range(S.X.shape[0]):
                for k in range(K):
                    rows = S.X[vw, S.z == k]
                    if not np.allclose(S.sums[vw, k], rows.sum(axis=0), atol=1e-8):
                        raise SamplerError("cluster sums out of sync")

    def log_joint(self) -> float:
        return log_joint(self.state, self.hp, self.cfg.k_max)

    def run(self, sched: MoveSchedule, progress=None) -> Trace:
        self.sched = sched
        self.d_probs = None
        nsides = len(self.state.sides)
        rows, allocs, dprobs = [], [[] for _ in range(nsides)], []
        t0 = time.perf_counter()
        for it in range(sched.iters):
            self.sweep()
            if it >= sched.burn_in and (it - sched.burn_in) % sched.thin == 0:
                st = self.state
                row = [it, st.d]
                for s in range(nsides):
                    row += [st.K(s), st.k_nonempty(s), st.H(s), st.h_nonempty(s)]
                    allocs[s].append(st.z(s).astype(np.int32))
                row.append(self.log_joint())
                rows.append(row)
                if self.cfg.marginalize_d:
                    dprobs.append(self.d_probs)
            if progress is not None and (it + 1) % 1000 == 0:
                progress(self.chain, it + 1)
        elapsed = time.perf_counter() - t0
        rows = np.array(rows, dtype=float)
        acc = {k: {"proposed": int(p), "accepted": int(a),
                   "rate": (a / p) if p else None} for k, (p, a) in self.counts.items()}
        return Trace.from_rows(
            rows, [np.array(a) for a in allocs], nsides,
            d_probs=np.array(dprobs) if dprobs else None,
            meta={"seed": self.cfg.seed, "chain": self.chain, "mode": self.cfg.mode,
                  "schedule": asdict(sched), "acceptance": acc, "seconds": elapsed,
                  "m_cap": self.mc},
        )


def run_chain(emb: Embedding, hp: HyperParams, cfg: RunConfig, sched: MoveSchedule,
              chain: int = 0, **init) -> Trace:
    """Run a single chain; deterministic given ``cfg.seed`` and ``chain``."""
    return Chain(emb, hp, cfg, chain, **init).run(sched)


def _run_one(args):
    emb, hp, cfg, sched, chain = args
    return run_chain(emb, hp, cfg, sched, chain)


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def run_chains(emb: Embedding, hp: HyperParams, cfg: RunConfig, sched: MoveSchedule) -> list[Trace]:
    """Run ``cfg.n_chains`` chains, in parallel processes up to the thread cap."""
    jobs = [(emb, hp, cfg, sched, c) for c in range(cfg.n_chains)]
    workers = min(cfg.n_chains, thread_cap())
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))
