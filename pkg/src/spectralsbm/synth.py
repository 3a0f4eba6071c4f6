"""Synthetic blockmodel graphs with a low-rank block probability matrix."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, write_edgelist

log = logging.getLogger(__name__)

ROW_BLOCK = 1024

#: Community means of the five-community, two-dimensional benchmark.
FIG2_MEANS = np.array([[0.7, 0.4], [0.1, 0.1], [0.4, 0.8], [-0.1, 0.5], [0.3, 0.5]])


class TruncationError(RuntimeError):
    """Every resampled B produced a low-rank approximation outside [0, 1]."""


@dataclass
class SbmSpec:
    """Parameters of a simulated (co-)blockmodel.

    ``cocluster`` only matters for directed graphs: when false the destination
    side shares the source communities and B is symmetric.
    """

    n: int
    K: int
    d_target: int
    kind: str = "undirected"
    n_prime: int | None = None
    K_prime: int | None = None
    cocluster: bool = False
    theta: tuple | None = None
    theta_prime: tuple | None = None
    beta_a: float = 1.2
    beta_b: float = 1.2
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.kind not in ("undirected", "directed", "bipartite"):
            raise ValueError(f"unknown graph kind {self.kind!r}")
        if self.n < 1 or self.K < 1 or self.d_target < 1:
            raise ValueError("n, K and d must be positive")
        if self.kind == "bipartite" and self.n_prime is None:
            raise ValueError("bipartite graphs need n_prime")
        if self.kind != "bipartite":
            self.n_prime = self.n
        if not self.two_sided:
            self.K_prime = self.K
        elif self.K_prime is None:
            self.K_prime = self.K
        if self.d_target > min(self.K, self.K_prime):
            raise ValueError(f"d={self.d_target} exceeds min(K, K')={min(self.K, self.K_prime)}")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta shapes must be positive")
        self.theta = self._check_theta(self.theta, self.K, "theta")
        self.theta_prime = self._check_theta(self.theta_prime, self.K_prime, "theta_prime")

    @staticmethod
    def _check_theta(theta, K, name):
        if theta is None:
            return tuple([1.0 / K] * K)
        t = np.asarray(theta, dtype=float)
        if len(t) != K or np.any(t < 0) or abs(t.sum() - 1) > 1e-9:
            raise ValueError(f"{name} must be a length-{K} probability vector")
        return tuple(float(x) for x in t)

    @property
    def two_sided(self) -> bool:
        return self.kind == "bipartite" or (self.kind == "directed" and self.cocluster)

    @property
    def symmetric(self) -> bool:
        return not self.two_sided


def sample_B(spec: SbmSpec, rng: np.random.Generator) -> np.ndarray:
    """Independent Beta entries, mirrored from the upper triangle when symmetric."""
    B = rng.beta(spec.beta_a, spec.beta_b, size=(spec.K, spec.K_prime))
    if spec.symmetric:
        B = np.triu(B) + np.triu(B, 1).T
    return B


def truncate_B(B, d_target: int, symmetric: bool | None = None):
    """Rank-``d_target`` approximation, or ``None`` if an entry leaves [0, 1]."""
    B = np.asarray(B, dtype=float)
    if symmetric is None:
        symmetric = B.shape[0] == B.shape[1] and np.array_equal(B, B.T)
    if symmetric:
        vals, vecs = np.linalg.eigh(B)
        top = np.argsort(-np.abs(vals), kind="stable")[:d_target]
        Bt = (vecs[:, top] * vals[top]) @ vecs[:, top].T
        Bt = 0.5 * (Bt + Bt.T)
    else:
        U, s, Vt = np.linalg.svd(B, full_matrices=False)
        Bt = (U[:, :d_target] * s[:d_target]) @ Vt[:d_target]
    if np.any(Bt < 0.0) or np.any(Bt > 1.0):
        return None
    return Bt


def sample_B_tilde(spec: SbmSpec):
    """Draw B and truncate it, resampling on violations.  Returns ``(B_tilde, rejections)``."""
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, attempt]))
        Bt = truncate_B(sample_B(spec, rng), spec.d_target, spec.symmetric)
        if Bt is not None:
            if attempt:
                log.info("B truncation rejected %d draw(s)", attempt)
            return Bt, attempt
    raise TruncationError(
        f"no rank-{spec.d_target} truncation within [0,1] after {spec.max_retries} draws; "
        "try different Beta shapes or a larger d")


def fig2_B() -> np.ndarray:
    """Block matrix ``M M'`` of the five fixed two-dimensional means."""
    return FIG2_MEANS @ FIG2_MEANS.T


def sample_graph(spec: SbmSpec, B_tilde, rng: np.random.Generator):
    """Bernoulli edges given community draws.  Returns ``(graph, z, z_prime)``."""
    B_tilde = np.asarray(B_tilde, dtype=float)
    if B_tilde.shape != (spec.K, spec.K_prime):
        raise ValueError(f"B has shape {B_tilde.shape}, expected {(spec.K, spec.K_prime)}")
    z = rng.choice(spec.K, size=spec.n, p=spec.theta).astype(np.int64)
    if spec.two_sided:
        zp = rng.choice(spec.K_prime, size=spec.n_prime, p=spec.theta_prime).astype(np.int64)
    else:
        zp = z
    pairs = []
    for start in range(0, spec.n, ROW_BLOCK):
        stop = min(start + ROW_BLOCK, spec.n)
        P = B_tilde[z[start:stop]][:, zp]
        hit = rng.random(P.shape) < P
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(spec.n_prime)[None, :]
        if spec.kind == "undirected":
            hit &= cols > rows
        elif spec.kind == "directed":
            hit &= cols != rows
        i, j = np.nonzero(hit)
        pairs.append(np.column_stack([i + start, j]))
    e = np.vstack(pairs) if pairs else np.zeros((0, 2), np.int64)
    if spec.kind == "undirected":
        e = np.vstack([e, e[:, ::-1]])
    labels = [str(i) for i in range(spec.n)]
    col_labels = [f"c{j}" for j in range(spec.n_prime)] if spec.kind == "bipartite" else None
    g = Graph(spec.n, spec.n_prime, spec.kind, e, labels, col_labels)
    return g, z, (zp if spec.two_sided else None)


def simulate(spec: SbmSpec, B_tilde=None):
    """Full protocol: B_tilde (drawn unless given), then the graph."""
    rejections = 0
    if B_tilde is None:
        B_tilde, rejections = sample_B_tilde(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    g, z, zp = sample_graph(spec, B_tilde, rng)
    return g, z, zp, np.asarray(B_tilde), rejections


def write_truth(path, labels, z):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "z"])
        for name, k in zip(labels, z):
            w.writerow([name, int(k)])


def read_truth(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["node", "z"]:
        raise ValueError(f"{path}: expected a 'node,z' header")
    return {r[0]: int(r[1]) for r in rows[1:]}


def write_outputs(outdir, spec: SbmSpec, g: Graph, z, zp, B_tilde, rejections, preset=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"edges": outdir / "edges.txt", "truth": outdir / "truth.csv",
             "B_tilde": outdir / "B_tilde.csv", "manifest": outdir / "simulation.json"}
    write_edgelist(g, paths["edges"])
    write_truth(paths["truth"], g.row_labels(), z)
    if zp is not None:
        paths["truth_prime"] = outdir / "truth_prime.csv"
        write_truth(paths["truth_prime"], g.column_labels(), zp)
    with open(paths["B_tilde"], "w", newline="") as fh:
        w = csv.writer(fh)
        for row in B_tilde:
            w.writerow([f"{v:.17g}" for v in row])
    manifest = {"spec": asdict(spec), "preset": preset, "rejections": int(rejections),
                "n_edges": int(g.n_edges if g.kind != "undirected" else g.n_edges // 2),
                "files": {k: str(p.name) for k, p in paths.items()}}
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return paths
