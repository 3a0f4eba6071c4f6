"""Adjacency, Laplacian and singular-value embeddings of graphs."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as sla

from .graph import Graph, GraphError, laplacian

log = logging.getLogger(__name__)

#: Above this size the truncated decompositions use ARPACK instead of LAPACK.
DENSE_SOLVER_MAX = 2000
SOLVER_TOL = 1e-10


class EmbeddingError(RuntimeError):
    pass


@dataclass
class Embedding:
    """Spectral embedding of a graph.

    ``X`` holds one row per (retained) node.  For directed and bipartite
    graphs ``X_prime`` holds the destination-side coordinates.  Columns are
    ordered by decreasing ``abs(spectrum)``.
    """

    X: np.ndarray
    spectrum: np.ndarray
    source: str
    X_prime: np.ndarray | None = None
    nodes: list[str] | None = None
    nodes_prime: list[str] | None = None
    retained: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _fix_signs(U: np.ndarray, V: np.ndarray | None = None):
    """Flip columns so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(U), axis=0)  # first occurrence wins ties
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    U = U * s
    if V is not None:
        V = V * s
    return U, V


def _check_m(m: int, limit: int):
    if not 1 <= m <= limit:
        raise EmbeddingError(f"embedding dimension m={m} must lie in [1, {limit}]")


def _magnitude_order(vals):
    """Decreasing |value|; equal magnitudes put the positive value first."""
    mag = np.abs(vals)
    scale = mag.max() if mag.size and mag.max() > 0 else 1.0
    key = np.round(mag / scale, 10)
    return np.lexsort((-np.sign(vals), -key))


def _top_eigenpairs(M, m: int):
    n = M.shape[0]
    if n <= DENSE_SOLVER_MAX:
        A = M.toarray() if hasattr(M, "toarray") else np.asarray(M, dtype=float)
        vals, vecs = la.eigh(A)
    else:
        try:
            vals, vecs = sla.eigsh(M.astype(float), k=m, which="LM", tol=SOLVER_TOL,
                                   maxiter=10 * m * n)
        except sla.ArpackNoConvergence as err:
            res = np.linalg.norm(M @ err.eigenvectors - err.eigenvectors * err.eigenvalues, axis=0)
            raise EmbeddingError(f"eigensolver did not converge; residuals {res}") from err
    order = _magnitude_order(vals)[:m]
    return vals[order], vecs[:, order]


def _top_singular(M, m: int):
    if max(M.shape) <= DENSE_SOLVER_MAX:
        A = M.toarray() if hasattr(M, "toarray") else np.asarray(M, dtype=float)
        U, s, Vt = la.svd(A, full_matrices=False)
    else:
        try:
            U, s, Vt = sla.svds(M.astype(float), k=m, tol=SOLVER_TOL,
                                maxiter=10 * m * max(M.shape))
        except sla.ArpackNoConvergence as err:
            raise EmbeddingError("singular value solver did not converge") from err
    order = np.argsort(-s, kind="stable")[:m]
    return U[:, order], s[order], Vt[order].T


def ase(g: Graph, m: int) -> Embedding:
    """Adjacency spectral embedding ``Gamma |Lambda|^{1/2}`` of an undirected graph."""
    if g.kind != "undirected":
        raise GraphError("ase needs an undirected graph; use svd_embed")
    _check_m(m, g.n)
    vals, vecs = _top_eigenpairs(g.adjacency(), m)
    vecs, _ = _fix_signs(vecs)
    X = vecs * np.sqrt(np.abs(vals))
    return Embedding(X, vals, "ase", nodes=g.row_labels())


def lse(g: Graph, m: int, isolated: str = "error") -> Embedding:
    """Laplacian spectral embedding using ``D^{-1/2} A D^{-1/2}``."""
    L, retained = laplacian(g, isolated)
    _check_m(m, L.shape[0])
    vals, vecs = _top_eigenpairs(L, m)
    vecs, _ = _fix_signs(vecs)
    X = vecs * np.sqrt(np.abs(vals))
    labels = g.row_labels()
    return Embedding(X, vals, "lse", nodes=[labels[i] for i in retained], retained=retained)


def svd_embed(g: Graph, m: int) -> Embedding:
    """Pair ``(U D^{1/2}, V D^{1/2})`` from the top-m singular triplets."""
    if g.kind == "undirected":
        warnings.warn("svd embedding of an undirected graph: treating it as directed")
    _check_m(m, min(g.n_rows, g.n_cols))
    U, s, V = _top_singular(g.adjacency(), m)
    U, V = _fix_signs(U, V)
    root = np.sqrt(s)
    return Embedding(U * root, s, "svd", X_prime=V * root,
                     nodes=g.row_labels(), nodes_prime=g.column_labels())


def scree(e: Embedding) -> list[tuple[int, float]]:
    """``(1-based index, |value|)`` pairs in non-increasing order."""
    mag = np.abs(np.asarray(e.spectrum, dtype=float))
    order = np.argsort(-mag, kind="stable")
    return [(int(i) + 1, float(mag[i])) for i in order]


def elbow(spectrum) -> int:
    """Position of the largest drop between consecutive magnitudes (1-based)."""
    mag = np.sort(np.abs(np.asarray(spectrum, dtype=float)))[::-1]
    if len(mag) < 2:
        return 1
    return int(np.argmax(mag[:-1] - mag[1:])) + 1


# -- files ------------------------------------------------------------------

def write_matrix(path, X: np.ndarray, nodes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"ev_{j + 1}" for j in range(X.shape[1])])
        for name, row in zip(nodes, X):
            w.writerow([name] + [f"{v:.17g}" for v in row])


def read_matrix(path, m: int | None = None):
    """Read an embedding CSV; returns ``(X, node_labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "node":
        raise EmbeddingError(f"{path}: missing 'node,ev_1..' header")
    width = len(rows[0]) - 1
    if m is not None and width != m:
        raise EmbeddingError(f"{path}: expected {m} columns, found {width}")
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != width + 1:
            raise EmbeddingError(f"{path}:{k}: expected {width + 1} fields, got {len(r)}")
    X = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(-1, width)
    return X, [r[0] for r in rows[1:]]


def write_embedding(e: Embedding, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"embedding": outdir / "embedding.csv", "spectrum": outdir / "spectrum.csv"}
    write_matrix(paths["embedding"], e.X, e.nodes or range(e.n))
    if e.X_prime is not None:
        paths["embedding_prime"] = outdir / "embedding_prime.csv"
        write_matrix(paths["embedding_prime"], e.X_prime, e.nodes_prime or range(len(e.X_prime)))
    with open(paths["spectrum"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "value"])
        for j, v in enumerate(e.spectrum, start=1):
            w.writerow([j, f"{v:.17g}"])
    return paths


def read_embedding(path, spectrum_path=None, prime_path=None, source: str = "ase") -> Embedding:
    X, nodes = read_matrix(path)
    spectrum = np.full(X.shape[1], np.nan)
    if spectrum_path is not None and Path(spectrum_path).exists():
        with open(spectrum_path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        spectrum = np.array([float(r[1]) for r in rows])
        if len(spectrum) != X.shape[1]:
            raise EmbeddingError(f"{spectrum_path}: spectrum length does not match embedding")
    Xp, nodes_p = (None, None)
    if prime_path is not None:
        Xp, nodes_p = read_matrix(prime_path, m=X.shape[1])
    return Embedding(X, spectrum, source, X_prime=Xp, nodes=nodes, nodes_prime=nodes_p)
