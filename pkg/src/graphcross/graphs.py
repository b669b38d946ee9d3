"""Immutable graph container, normalized propagation operators, and
structural feature encoding.

Adjacency matrices are symmetric, nonnegative, zero-diagonal, and stored
as CSR. Binary on ingest; coarsening can introduce real-valued weights,
which reuse the same normalization with weighted degrees.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

SYMMETRY_TOL = 1e-9

# Below this size dense operator algebra beats sparse bookkeeping.
DENSE_OPERATOR_CUTOFF = 64


class GraphError(ValueError):
    """Raised when a graph or an index set violates a structural contract."""


def _as_csr(adjacency) -> sp.csr_matrix:
    if sp.issparse(adjacency):
        mat = adjacency.tocsr().astype(np.float64)
    else:
        mat = sp.csr_matrix(np.asarray(adjacency, dtype=np.float64))
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


class Graph:
    """Undirected weighted graph with dense per-vertex features.

    Parameters
    ----------
    adjacency : (n, n) array or sparse matrix
        Symmetric, nonnegative, zero diagonal.
    features : (n, d) array, optional
        Dense real vertex features; defaults to an empty (n, 0) matrix.
    """

    __slots__ = ("adjacency", "features", "n")

    def __init__(self, adjacency, features=None):
        mat = _as_csr(adjacency)
        if mat.shape[0] != mat.shape[1]:
            raise GraphError(f"adjacency must be square, got {mat.shape}")
        n = mat.shape[0]
        asym = abs(mat - mat.T)
        if asym.count_nonzero() and asym.max() > SYMMETRY_TOL:
            raise GraphError("adjacency is not symmetric within 1e-9")
        if mat.nnz and mat.data.min() < 0:
            raise GraphError("adjacency weights must be nonnegative")
        if mat.diagonal().any():
            raise GraphError("adjacency diagonal must be zero on ingest")
        if features is None:
            feats = np.zeros((n, 0), dtype=np.float64)
        else:
            feats = np.asarray(features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != n:
                raise GraphError(
                    f"features must be ({n}, d), got {feats.shape}"
                )
        self.adjacency = mat
        self.features = feats
        self.n = n

    def __repr__(self):
        return (f"Graph(n={self.n}, edges={self.adjacency.nnz // 2}, "
                f"d={self.features.shape[1]})")

    def degrees(self) -> np.ndarray:
        """Unweighted support degrees (neighbor counts)."""
        return np.diff(self.adjacency.indptr)

    def with_features(self, features) -> "Graph":
        return Graph(self.adjacency, features)


class PropagationOperator:
    """Symmetrically normalized self-looped adjacency of one graph.

    ``matrix`` is dense below DENSE_OPERATOR_CUTOFF vertices, CSR above.
    """

    __slots__ = ("matrix", "n")

    def __init__(self, matrix, n):
        self.matrix = matrix
        self.n = n

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Left-multiply dense features: matrix @ x."""
        return np.asarray(self.matrix @ x)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return self.matrix.toarray()
        return self.matrix


@dataclass(frozen=True)
class Neighborhood:
    """Geodesic ball: all vertices within ``radius`` hops of ``center``."""

    center: int
    members: tuple
    radius: int


def normalized_operator(g: Graph) -> PropagationOperator:
    """Degree-normalized propagation operator with self-loops.

    Adds unit self-loops to the (possibly weighted) adjacency and
    normalizes symmetrically by the resulting degrees. Isolated vertices
    come out as a lone diagonal 1.
    """
    tilde = g.adjacency + sp.eye(g.n, format="csr")
    deg = np.asarray(tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    mat = scale @ tilde @ scale
    if g.n < DENSE_OPERATOR_CUTOFF:
        return PropagationOperator(mat.toarray(), g.n)
    return PropagationOperator(mat.tocsr(), g.n)


def operator_power(p: PropagationOperator, r: int):
    """r-th matrix power of the operator; r = 0 is the identity."""
    if r < 0:
        raise ValueError(f"hop count must be >= 0, got {r}")
    if r == 0:
        return sp.eye(p.n, format="csr") if p.is_sparse else np.eye(p.n)
    if p.is_sparse:
        out = p.matrix
        for _ in range(r - 1):
            out = out @ p.matrix
        return out
    return np.linalg.matrix_power(p.matrix, r)


def neighborhood(g: Graph, v: int, radius: int) -> Neighborhood:
    """BFS ball of the given hop radius around ``v`` over the edge support."""
    if not 0 <= v < g.n:
        raise IndexError(f"vertex {v} out of range for n={g.n}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    indptr, indices = g.adjacency.indptr, g.adjacency.indices
    dist = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if dist[u] == radius:
            continue
        for w in indices[indptr[u]:indptr[u + 1]]:
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return Neighborhood(v, tuple(sorted(dist)), radius)


def degree_one_hot(g: Graph, max_degree: int) -> np.ndarray:
    """One-hot degree encoding, n x (max_degree + 1).

    Degrees above ``max_degree`` clamp into the last bin.
    """
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    deg = np.minimum(g.degrees(), max_degree)
    out = np.zeros((g.n, max_degree + 1), dtype=np.float64)
    out[np.arange(g.n), deg] = 1.0
    return out


def induced_adjacency(g: Graph, ids) -> np.ndarray:
    """Dense adjacency submatrix over the given vertex indices."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size != np.unique(ids).size:
        raise GraphError("induced_adjacency requires unique indices")
    if ids.size and (ids.min() < 0 or ids.max() >= g.n):
        raise IndexError(f"indices out of range for n={g.n}")
    return g.adjacency[ids][:, ids].toarray()


def load_graph_text(path) -> Graph:
    """Read the plain-text graph format.

    Header ``n d``, then n lines of d reals, then one line per undirected
    edge: ``u v`` or ``u v w`` (0-indexed; weight defaults to 1).
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise GraphError(f"{path}: empty graph file")
    head = lines[0].split()
    if len(head) != 2:
        raise GraphError(f"{path}: header must be 'n d', got {lines[0]!r}")
    n, d = int(head[0]), int(head[1])
    if len(lines) < 1 + n:
        raise GraphError(f"{path}: expected {n} feature lines")
    feats = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        parts = lines[1 + i].split()
        if len(parts) != d:
            raise GraphError(
                f"{path}: feature line {i} has {len(parts)} values, expected {d}"
            )
        feats[i] = [float(tok) for tok in parts]
    rows, cols, vals = [], [], []
    for line in lines[1 + n:]:
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (2, 3):
            raise GraphError(f"{path}: bad edge line {line!r}")
        u, v = int(parts[0]), int(parts[1])
        w = float(parts[2]) if len(parts) == 3 else 1.0
        rows += [u, v]
        cols += [v, u]
        vals += [w, w]
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return Graph(adj, feats)


def save_graph_text(g: Graph, path) -> None:
    """Write the canonical form of the plain-text graph format.

    Edges are emitted once each with u < v, sorted; unit weights are
    omitted so canonical files round-trip byte-exactly.
    """
    coo = sp.triu(g.adjacency, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{g.n} {g.features.shape[1]}\n")
        for row in g.features:
            fh.write(" ".join(repr(x) for x in row) + "\n")
        for k in order:
            u, v, w = int(coo.row[k]), int(coo.col[k]), float(coo.data[k])
            if w == 1.0:
                fh.write(f"{u} {v}\n")
            else:
                fh.write(f"{u} {v} {w!r}\n")
