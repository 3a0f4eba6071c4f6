"""Graph container, edge-list I/O, degrees and the normalised Laplacian."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

KINDS = ("undirected", "directed", "bipartite")

#: Largest node count for which dense adjacency matrices are materialised.
DENSE_CAP = 5000


class GraphError(ValueError):
    """Raised for malformed edge lists or invalid graph operations."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Binary graph stored as sorted index pairs.

    For undirected graphs both orientations of every edge are stored, so
    ``edges`` is closed under ``(i, j) -> (j, i)``.  Bipartite graphs keep
    separate row (source) and column (destination) label spaces.
    """

    n_rows: int
    n_cols: int
    kind: str
    edges: np.ndarray  # (E, 2) int64, lexicographically sorted, unique
    labels: list[str] | None = None
    col_labels: list[str] | None = None
    dropped_self_loops: int = 0
    _rows: list[np.ndarray] | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown graph kind {self.kind!r}")
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise GraphError("graph must have at least one node")
        if self.kind != "bipartite" and self.n_rows != self.n_cols:
            raise GraphError(f"{self.kind} graph must be square")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e[:, 0].max() >= self.n_rows or e[:, 1].max() >= self.n_cols:
                raise GraphError("edge index out of range")
            if self.kind != "bipartite" and np.any(e[:, 0] == e[:, 1]):
                raise GraphError("self-loops are not allowed")
        e = np.unique(e, axis=0)
        if self.kind == "undirected" and e.size:
            rev = e[:, ::-1]
            if not np.array_equal(e, np.unique(np.vstack([e, rev]), axis=0)):
                raise GraphError("undirected edge set is not symmetric")
        object.__setattr__(self, "edges", e)
        # per-row neighbour lists
        starts = np.searchsorted(e[:, 0], np.arange(self.n_rows + 1))
        object.__setattr__(
            self, "_rows", [e[starts[i]:starts[i + 1], 1] for i in range(self.n_rows)]
        )

    @property
    def n(self) -> int:
        return self.n_rows

    @property
    def n_edges(self) -> int:
        """Number of stored (ordered) index pairs."""
        return len(self.edges)

    def neighbours(self, i: int) -> np.ndarray:
        return self._rows[i]

    def row_labels(self) -> list[str]:
        return self.labels if self.labels is not None else [str(i) for i in range(self.n_rows)]

    def column_labels(self) -> list[str]:
        if self.kind != "bipartite":
            return self.row_labels()
        return self.col_labels if self.col_labels is not None else [str(i) for i in range(self.n_cols)]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.edges))
        return sp.csr_matrix(
            (data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.n_rows, self.n_cols)
        )

    def dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        if max(self.n_rows, self.n_cols) > cap:
            raise GraphError(f"refusing to materialise a dense matrix above {cap} nodes")
        A = np.zeros((self.n_rows, self.n_cols))
        A[self.edges[:, 0], self.edges[:, 1]] = 1.0
        return A

    @classmethod
    def from_dense(cls, A, kind: str = "undirected", labels=None, col_labels=None) -> Graph:
        A = np.asarray(A)
        i, j = np.nonzero(A)
        if kind != "bipartite":
            keep = i != j
            i, j = i[keep], j[keep]
        return cls(A.shape[0], A.shape[1], kind, np.column_stack([i, j]), labels, col_labels)


def _parse_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 2:
                raise GraphError(f"{path}:{lineno}: expected two node tokens, got {len(tok)}")
            yield tok[0], tok[1]


def load_edgelist(path, kind: str = "undirected", dedupe: bool = True) -> Graph:
    """Read a whitespace separated edge list.

    Nodes are indexed by order of first appearance (left and right label
    spaces are indexed independently for bipartite graphs).  Self-loops are
    dropped with a warning; undirected input is symmetrised.  With
    ``dedupe=False`` a repeated edge raises instead of being collapsed.
    """
    path = Path(path)
    if kind not in KINDS:
        raise GraphError(f"unknown graph kind {kind!r}")
    if not path.exists():
        raise FileNotFoundError(path)
    rows: dict[str, int] = {}
    cols: dict[str, int] = rows if kind != "bipartite" else {}
    pairs = []
    loops = 0
    for a, b in _parse_lines(path):
        i = rows.setdefault(a, len(rows))
        j = cols.setdefault(b, len(cols))
        if kind != "bipartite" and i == j:
            loops += 1
            continue
        pairs.append((i, j))
    if not rows:
        raise GraphError(f"{path}: empty graph")
    e = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if kind == "undirected":
        e = np.vstack([e, e[:, ::-1]])
    uniq = np.unique(e, axis=0)
    if not dedupe:
        expected = 2 * len(pairs) if kind == "undirected" else len(pairs)
        if len(uniq) != expected:
            raise GraphError(f"{path}: duplicate edges present")
    if loops:
        log.warning("%s: dropped %d self-loop(s)", path, loops)
    row_labels = list(rows)
    col_labels = list(cols) if kind == "bipartite" else None
    n_cols = len(cols) if kind == "bipartite" else len(rows)
    return Graph(len(rows), n_cols, kind, uniq, row_labels, col_labels, dropped_self_loops=loops)


def write_edgelist(g: Graph, path) -> None:
    """Write sorted pairs using node labels; undirected edges once with i < j."""
    e = g.edges
    if g.kind == "undirected":
        e = e[e[:, 0] < e[:, 1]]
    rl, cl = g.row_labels(), g.column_labels()
    with open(path, "w") as fh:
        for i, j in e:
            fh.write(f"{rl[i]} {cl[j]}\n")


def degrees(g: Graph) -> np.ndarray:
    """Row sums of the adjacency matrix (out-degree for directed graphs)."""
    return np.bincount(g.edges[:, 0], minlength=g.n_rows).astype(np.int64)


def laplacian(g: Graph, isolated: str = "error"):
    """Return ``(D^{-1/2} A D^{-1/2}, retained)`` as a sparse matrix.

    ``retained`` maps rows of the operator back to original node indices.
    Zero-degree nodes either raise (``isolated="error"``) or are removed.
    """
    if g.kind != "undirected":
        raise GraphError("the Laplacian embedding needs an undirected graph")
    if isolated not in ("error", "drop"):
        raise GraphError(f"isolated must be 'error' or 'drop', got {isolated!r}")
    deg = degrees(g)
    retained = np.flatnonzero(deg > 0)
    if len(retained) < g.n_rows:
        if isolated == "error":
            bad = int(np.flatnonzero(deg == 0)[0])
            raise GraphError(f"node {g.row_labels()[bad]!r} (index {bad}) has zero degree")
        if len(retained) == 0:
            raise GraphError("graph has no edges")
    A = g.adjacency()[retained][:, retained]
    s = 1.0 / np.sqrt(deg[retained].astype(float))
    L = sp.diags(s) @ A @ sp.diags(s)
    return sp.csr_matrix(L), retained
