"""Posterior summaries: similarity matrices, point clusterings and marginal tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import adjusted_rand_score, silhouette_score

PSM_DENSE_MAX = 10_000
PSM_SPARSE_CUTOFF = 0.01


@dataclass
class Trace:
    """Thinned post-burn-in samples of one chain.

    Per-side arrays carry a leading side axis (length 2 in co-clustering
    modes).  ``d_probs`` holds the exact conditional of d at each sample when
    d is summed out.
    """

    iters: np.ndarray
    d: np.ndarray
    K: np.ndarray
    k_nonempty: np.ndarray
    H: np.ndarray
    h_nonempty: np.ndarray
    log_joint: np.ndarray
    z: list
    d_probs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows, allocs, nsides, d_probs=None, meta=None) -> Trace:
        rows = np.asarray(rows, dtype=float).reshape(-1, 3 + 4 * nsides)
        per = rows[:, 2:2 + 4 * nsides].reshape(len(rows), nsides, 4).astype(np.int64)
        return cls(rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64),
                   per[:, :, 0].T, per[:, :, 1].T, per[:, :, 2].T, per[:, :, 3].T,
                   rows[:, -1], [np.asarray(a, dtype=np.int64) for a in allocs], d_probs,
                   meta or {})

    @property
    def n_samples(self) -> int:
        return len(self.iters)

    @property
    def n_sides(self) -> int:
        return len(self.z)


# ---------------------------------------------------------------------------
# similarity and point estimates
# ---------------------------------------------------------------------------

@njit(cache=True)
def _co_counts(Z, out):
    S, n = Z.shape
    for s in range(S):
        row = Z[s]
        for i in range(n):
            zi = row[i]
            for j in range(i):
                if row[j] == zi:
                    out[i, j] += 1


def similarity(traces, side: int = 0) -> np.ndarray:
    """Pooled frequency with which each pair of nodes shares a community."""
    if isinstance(traces, Trace):
        traces = [traces]
    Z = np.concatenate([np.atleast_2d(t.z[side]) for t in traces]).astype(np.int64)
    if len(Z) == 0:
        raise ValueError("no samples to summarise")
    n = Z.shape[1]
    counts = np.zeros((n, n), dtype=np.int64)
    _co_counts(np.ascontiguousarray(Z), counts)
    counts = counts + counts.T
    psm = counts / len(Z)
    np.fill_diagonal(psm, 1.0)
    return psm


def _dendrogram(psm):
    psm = np.asarray(psm, dtype=float)
    if not np.allclose(psm, psm.T) or not np.allclose(np.diag(psm), 1.0):
        raise ValueError("similarity matrix must be symmetric with unit diagonal")
    dist = np.clip(1.0 - psm, 0.0, None)
    np.fill_diagonal(dist, 0.0)
    return linkage(squareform(dist, checks=False), method="average"), dist


def _cut(Z, n, K):
    if K <= 1 or n == 1:
        return np.zeros(n, np.int64)
    labels = fcluster(Z, t=min(K, n), criterion="maxclust")
    return _canonical(labels)


def _canonical(labels):
    """Relabel in order of first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


def pear(psm, z) -> float:
    """Posterior expected adjusted Rand index of allocation ``z``."""
    psm = np.asarray(psm, dtype=float)
    iu = np.triu_indices(len(z), 1)
    ind = (np.asarray(z)[:, None] == np.asarray(z)[None, :])[iu].astype(float)
    p = psm[iu]
    npairs = len(p)
    si, sp, sip = ind.sum(), p.sum(), (ind * p).sum()
    expected = si * sp / npairs
    denom = 0.5 * (si + sp) - expected
    return float((sip - expected) / denom) if denom > 0 else 0.0


def map_clustering(psm, K: int | None = None, select: str = "silhouette", K_max: int = 20):
    """Average-linkage clustering on ``1 - psm``.

    With ``K`` given the dendrogram is cut into K groups; otherwise the cut in
    1..K_max maximising ``select`` (``silhouette`` or ``pear``) is used.
    """
    psm = np.asarray(psm, dtype=float)
    n = len(psm)
    if n == 1:
        return np.zeros(1, np.int64)
    Z, dist = _dendrogram(psm)
    if K is not None:
        return _cut(Z, n, int(K))
    if select not in ("silhouette", "pear"):
        raise ValueError("select must be 'silhouette' or 'pear'")
    best, best_score = np.zeros(n, np.int64), -np.inf
    for k in range(1, min(K_max, n) + 1):
        z = _cut(Z, n, k)
        nk = len(np.unique(z))
        if select == "pear":
            score = pear(psm, z)
        elif 2 <= nk < n:
            score = silhouette_score(dist, z, metric="precomputed")
        else:
            score = 0.0 if nk == 1 else -np.inf
        if score > best_score + 1e-12:
            best, best_score = z, score
    return best


def ari(z_a, z_b) -> float:
    return float(adjusted_rand_score(np.asarray(z_a), np.asarray(z_b)))


def _pmf(values, weights=None):
    values = np.asarray(values)
    if weights is None:
        u, c = np.unique(values, return_counts=True)
        return {int(a): float(b) / len(values) for a, b in zip(u, c)}
    return {int(v): float(w) for v, w in zip(values, weights) if w > 0}


def posterior_tables(traces, side: int = 0) -> dict:
    """Pooled posterior pmfs of d, non-empty K and non-empty H, with MAP values.

    When every trace carries exact conditionals of d, the d table averages
    them instead of counting sampled values.
    """
    if isinstance(traces, Trace):
        traces = [traces]
    d = np.concatenate([t.d for t in traces])
    if all(t.d_probs is not None for t in traces):
        avg = np.concatenate([t.d_probs for t in traces]).mean(axis=0)
        pd = _pmf(np.arange(1, len(avg) + 1), avg)
    else:
        pd = _pmf(d)
    pk = _pmf(np.concatenate([t.k_nonempty[side] for t in traces]))
    ph = _pmf(np.concatenate([t.h_nonempty[side] for t in traces]))
    mode = lambda p: max(sorted(p), key=lambda k: p[k])  # noqa: E731
    return {"d": pd, "K": pk, "H": ph, "map_d": mode(pd), "map_K": mode(pk), "map_H": mode(ph),
            "n_samples": int(len(d))}


def summarise(traces, side=0, K=None, pear_select=False, truth=None) -> dict:
    """PSM, tables and point clustering for one side."""
    tables = posterior_tables(traces, side)
    psm = similarity(traces, side)
    if pear_select:
        z = map_clustering(psm, select="pear", K_max=max(20, tables["map_K"] + 5))
    else:
        z = map_clustering(psm, K if K is not None else tables["map_K"])
    out = {"tables": tables, "psm": psm, "clusters": z}
    if truth is not None:
        out["ari"] = ari(z, truth)
    return out


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _trace_header(nsides):
    head = ["iter", "d", "K", "K_empty_excl", "H", "H_empty_excl"]
    if nsides == 2:
        head += ["K_prime", "K_prime_empty_excl", "H_prime", "H_prime_empty_excl"]
    return head + ["log_joint"]


def write_trace(trace: Trace, outdir, stem: str = "chain0") -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"trace": outdir / f"{stem}_trace.csv", "alloc": outdir / f"{stem}_alloc.csv",
             "acceptance": outdir / f"{stem}_acceptance.json"}
    ns = trace.n_sides
    with open(paths["trace"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_trace_header(ns))
        for s in range(trace.n_samples):
            row = [int(trace.iters[s]), int(trace.d[s])]
            for side in range(ns):
                row += [int(trace.K[side, s]), int(trace.k_nonempty[side, s]),
                        int(trace.H[side, s]), int(trace.h_nonempty[side, s])]
            w.writerow(row + [repr(float(trace.log_joint[s]))])
    for side in range(ns):
        key = "alloc" if side == 0 else "alloc_prime"
        path = paths["alloc"] if side == 0 else outdir / f"{stem}_alloc_prime.csv"
        paths[key] = path
        z = trace.z[side]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter"] + [f"z_{i}" for i in range(z.shape[1] if z.size else 0)])
            for s in range(trace.n_samples):
                w.writerow([int(trace.iters[s])] + z[s].tolist())
    if trace.d_probs is not None:
        paths["d_probs"] = outdir / f"{stem}_d_conditional.csv"
        with open(paths["d_probs"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter"] + [f"p_d{j + 1}" for j in range(trace.d_probs.shape[1])])
            for s in range(trace.n_samples):
                w.writerow([int(trace.iters[s])] + [repr(float(p)) for p in trace.d_probs[s]])
    with open(paths["acceptance"], "w") as fh:
        json.dump(trace.meta, fh, indent=2, sort_keys=True, default=str)
    return paths


def _read_alloc(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)


def read_trace(trace_path) -> Trace:
    """Load a trace written by ``write_trace`` (allocation files found by name)."""
    trace_path = Path(trace_path)
    stem = trace_path.name[: -len("_trace.csv")] if trace_path.name.endswith("_trace.csv") \
        else trace_path.stem
    with open(trace_path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    if head[:2] != ["iter", "d"] or head[-1] != "log_joint":
        raise ValueError(f"{trace_path}: not a trace file")
    nsides = 2 if "K_prime" in head else 1
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(head))
    allocs = [_read_alloc(trace_path.with_name(f"{stem}_alloc.csv"))]
    if nsides == 2:
        allocs.append(_read_alloc(trace_path.with_name(f"{stem}_alloc_prime.csv")))
    dp_path = trace_path.with_name(f"{stem}_d_conditional.csv")
    d_probs = None
    if dp_path.exists():
        with open(dp_path, newline="") as fh:
            d_probs = np.array([[float(v) for v in r[1:]] for r in list(csv.reader(fh))[1:]])
    meta_path = trace_path.with_name(f"{stem}_acceptance.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Trace.from_rows(data, allocs, nsides, d_probs=d_probs, meta=meta)


def write_table(path, pmf: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "probability"])
        for k in sorted(pmf):
            w.writerow([k, repr(float(pmf[k]))])


def write_psm(path, psm):
    """Dense lower triangle (diagonal included), or ``i,j,value`` above the dense cap."""
    n = len(psm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if n <= PSM_DENSE_MAX:
            for i in range(n):
                w.writerow([f"{v:.6g}" for v in psm[i, : i + 1]])
        else:
            w.writerow(["i", "j", "value"])
            for i in range(n):
                for j in np.flatnonzero(psm[i, : i + 1] >= PSM_SPARSE_CUTOFF):
                    w.writerow([i, j, f"{psm[i, j]:.6g}"])


def read_psm(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh)]
    n = len(rows)
    psm = np.zeros((n, n))
    for i, r in enumerate(rows):
        psm[i, : len(r)] = [float(v) for v in r]
    return psm + np.tril(psm, -1).T


def write_clusters(path, z, nodes=None):
    nodes = nodes if nodes is not None else [str(i) for i in range(len(z))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "cluster"])
        for name, c in zip(nodes, z):
            w.writerow([name, int(c)])
