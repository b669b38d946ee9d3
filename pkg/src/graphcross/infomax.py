"""Information-driven vertex selection and graph pooling.

A trainable estimator scores how well each vertex's feature predicts its
own hop-neighborhood. The binary-cross-entropy bound on that dependency
is both the training loss of the estimator and, frozen, the criterion
used to pick which vertices survive pooling. Structure pooling offers
edge removal, Laplacian Schur-complement reduction, and soft cluster
connection; unpooling scatters coarse features back and interpolates by
one propagation layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse import csgraph

from . import autodiff as ad
from .graphs import Graph, PropagationOperator, induced_adjacency, normalized_operator

PIVOT_TOL = 1e-10
DUST_TOL = 1e-10


class PoolingError(ValueError):
    """Raised for invalid selections or non-reducible structures."""


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable log of the logistic function."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(np.abs(x))))


class AffinityEstimator:
    """Trainable vertex/neighborhood embeddings plus a pair scorer.

    Three parameter groups, deliberately not weight-shared:

    - a 2-layer ReLU perceptron embedding each vertex feature (d -> h -> h),
    - one h x h weight matrix per hop 0..R, mixing propagated embeddings
      into a neighborhood embedding,
    - a linear map from the concatenated pair embedding (2h) to one logit.
    """

    def __init__(self, in_dim: int, hidden: int = 48, hops: int = 1,
                 rng: np.random.Generator | None = None, name: str = "affinity"):
        if hops < 1:
            raise ValueError(f"hops must be >= 1, got {hops}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden
        self.hops = hops
        self.name = name
        P = ad.Parameter
        xav = ad.xavier_uniform
        self.v_w1 = P(xav(rng, in_dim, hidden), f"{name}.vertex.w1")
        self.v_b1 = P(np.zeros((1, hidden)), f"{name}.vertex.b1")
        self.v_w2 = P(xav(rng, hidden, hidden), f"{name}.vertex.w2")
        self.v_b2 = P(np.zeros((1, hidden)), f"{name}.vertex.b2")
        self.hop_w = [
            P(xav(rng, hidden, hidden), f"{name}.hop.{r}")
            for r in range(hops + 1)
        ]
        self.score_w = P(xav(rng, 2 * hidden, 1), f"{name}.score.w")
        self.score_b = P(np.zeros((1, 1)), f"{name}.score.b")

    def parameters(self) -> list:
        return [self.v_w1, self.v_b1, self.v_w2, self.v_b2,
                *self.hop_w, self.score_w, self.score_b]

    # -- recorded (differentiable) forward --------------------------------

    def embed_vertices(self, X) -> ad.Tensor:
        h = ad.relu(ad.add_row(ad.matmul(X, self.v_w1), self.v_b1))
        return ad.add_row(ad.matmul(h, self.v_w2), self.v_b2)

    def embed_neighborhoods(self, op: PropagationOperator, E) -> ad.Tensor:
        """Hop-wise propagated embeddings, mixed per hop and averaged.

        Row u aggregates every vertex within R hops of u, weighted by the
        r-step propagation mass, through the hop-r mixing matrix.
        """
        total = ad.matmul(E, self.hop_w[0])
        propagated = E
        for r in range(1, self.hops + 1):
            propagated = ad.matmul(op.matrix, propagated)
            total = ad.add(total, ad.matmul(propagated, self.hop_w[r]))
        return ad.smul(total, 1.0 / self.hops)

    def pair_logits(self, E, N, v_ids, u_ids) -> ad.Tensor:
        """Affinity logits for vertex rows v_ids against neighborhood rows u_ids."""
        pairs = ad.concat_cols([ad.gather_rows(E, v_ids),
                                ad.gather_rows(N, u_ids)])
        return ad.add_row(ad.matmul(pairs, self.score_w), self.score_b)

    # -- frozen (numpy) forward -------------------------------------------

    def embed_vertices_frozen(self, X: np.ndarray) -> np.ndarray:
        h = np.maximum(X @ self.v_w1.values + self.v_b1.values, 0.0)
        return h @ self.v_w2.values + self.v_b2.values

    def embed_neighborhoods_frozen(self, op: PropagationOperator,
                                   E: np.ndarray) -> np.ndarray:
        total = E @ self.hop_w[0].values
        propagated = E
        for r in range(1, self.hops + 1):
            propagated = op.apply(propagated)
            total = total + propagated @ self.hop_w[r].values
        return total / self.hops

    def logit_matrix(self, g: Graph, X: np.ndarray) -> np.ndarray:
        """All pair logits as an n x n matrix (frozen parameters).

        The scorer is linear in the concatenated pair, so the matrix
        splits into a vertex part plus a neighborhood part.
        """
        op = normalized_operator(g)
        E = self.embed_vertices_frozen(np.asarray(X, dtype=np.float64))
        N = self.embed_neighborhoods_frozen(op, E)
        w = self.score_w.values
        v_part = E @ w[:self.hidden]
        n_part = N @ w[self.hidden:]
        return v_part + n_part.T + self.score_b.values


# ---------------------------------------------------------------------------
# spec operations (thin functional surface over the estimator)


def embed_vertices(est: AffinityEstimator, X) -> ad.Tensor:
    X = ad._wrap(X)
    if X.shape[1] != est.in_dim:
        raise ad.ShapeError(
            f"embed_vertices: feature width {X.shape[1]} != estimator "
            f"input width {est.in_dim}"
        )
    return est.embed_vertices(X)


def embed_neighborhoods(est: AffinityEstimator, g: Graph, E) -> ad.Tensor:
    return est.embed_neighborhoods(normalized_operator(g), E)


def affinity_logit(est: AffinityEstimator, e_v, p_u) -> ad.Tensor:
    pair = ad.concat_cols([ad._wrap(e_v), ad._wrap(p_u)])
    return ad.add_row(ad.matmul(pair, est.score_w), est.score_b)


def mi_bound_loss(est: AffinityEstimator, g: Graph, X, neg_per_pos: int = 1,
                  rng: np.random.Generator | None = None) -> ad.Tensor:
    """Negative binary-cross-entropy bound over all vertices.

    Positives pair each vertex with its own neighborhood; negatives pair
    it with the neighborhood of a uniformly drawn other vertex,
    ``neg_per_pos`` draws per vertex.
    """
    n = g.n
    if n < 2:
        raise PoolingError("bound needs at least 2 vertices for negatives")
    if neg_per_pos < 1:
        raise ValueError(f"neg_per_pos must be >= 1, got {neg_per_pos}")
    rng = rng if rng is not None else np.random.default_rng(0)
    E = embed_vertices(est, X)
    N = est.embed_neighborhoods(normalized_operator(g), E)
    all_ids = np.arange(n)
    pos = est.pair_logits(E, N, all_ids, all_ids)
    v_ids = np.tile(all_ids, neg_per_pos)
    draws = rng.integers(0, n - 1, size=v_ids.size)
    u_ids = draws + (draws >= v_ids)
    neg = est.pair_logits(E, N, v_ids, u_ids)
    pos_term = ad.mean_all(ad.log(ad.sigmoid(pos)))
    neg_term = ad.mean_all(ad.log(ad.sigmoid(ad.smul(neg, -1.0))))
    return ad.smul(ad.add(pos_term, neg_term), -1.0)


def _validate_subset(ids, n: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.intp).ravel()
    if ids.size == 0:
        raise PoolingError(f"{what}: empty vertex subset")
    if ids.size != np.unique(ids).size:
        raise PoolingError(f"{what}: duplicate vertex indices")
    if ids.min() < 0 or ids.max() >= n:
        raise IndexError(f"{what}: vertex index out of range for n={n}")
    return ids


def criterion_full(est: AffinityEstimator, g: Graph, X, omega) -> float:
    """Frozen subset score: mean self-affinity plus mean pair repulsion.

    First term averages log-sigmoid self logits over the subset; second
    averages log(1 - sigmoid) over all ordered pairs, (v, v) included.
    """
    omega = _validate_subset(omega, g.n, "criterion_full")
    T = est.logit_matrix(g, X)
    pos = log_sigmoid(np.diag(T)[omega]).mean()
    neg = log_sigmoid(-T[np.ix_(omega, omega)]).mean()
    return float(pos + neg)


def _selection_tables(est, g, X):
    T = est.logit_matrix(g, X)
    return log_sigmoid(np.diag(T)), log_sigmoid(-T)


def _check_k(k: int, n: int):
    if not 1 <= k <= n:
        raise PoolingError(f"K={k} out of range for n={n}")


def select_greedy(est: AffinityEstimator, g: Graph, X, k: int) -> np.ndarray:
    """Greedy subset growth under the full criterion.

    Each step adds the vertex maximizing the criterion of the enlarged
    set; exact ties resolve to the lowest vertex index. Returns indices
    in selection order.
    """
    _check_k(k, g.n)
    pos, neg = _selection_tables(est, g, X)
    n = g.n
    chosen = []
    pos_sum = 0.0
    neg_sum = 0.0
    row_to = np.zeros(n)
    col_from = np.zeros(n)
    available = np.ones(n, dtype=bool)
    for step in range(k):
        m = step + 1.0
        scores = (pos_sum + pos) / m
        scores += (neg_sum + row_to + col_from + np.diag(neg)) / (m * m)
        scores[~available] = -np.inf
        j = int(np.argmax(scores))
        chosen.append(j)
        available[j] = False
        pos_sum += pos[j]
        neg_sum += row_to[j] + col_from[j] + neg[j, j]
        row_to += neg[:, j]
        col_from += neg[j, :]
    return np.asarray(chosen, dtype=np.intp)


def select_topk(est: AffinityEstimator, g: Graph, X, k: int) -> np.ndarray:
    """Top-K vertices by self-affinity (exact maximizer of the positive
    term); ties resolve to the lowest vertex index."""
    _check_k(k, g.n)
    pos, _ = _selection_tables(est, g, X)
    order = np.argsort(-pos, kind="stable")
    return np.asarray(order[:k], dtype=np.intp)


def affinity_scores(est: AffinityEstimator, g: Graph, X, ids) -> ad.Tensor:
    """Differentiable per-vertex self-affinities in (0, 1), shape (K, 1)."""
    ids = _validate_subset(ids, g.n, "affinity_scores")
    E = embed_vertices(est, X)
    N = est.embed_neighborhoods(normalized_operator(g), E)
    return ad.sigmoid(est.pair_logits(E, N, ids, ids))


def pool_features(X, ids, a) -> ad.Tensor:
    """Gather selected rows and scale each by its affinity."""
    X = ad._wrap(X)
    a = ad._wrap(a)
    ids = np.asarray(ids, dtype=np.intp).ravel()
    if a.shape != (ids.size, 1):
        raise ad.ShapeError(
            f"pool_features: affinity shape {a.shape} != ({ids.size}, 1)"
        )
    return ad.scale_rows(ad.gather_rows(X, ids), a)


# ---------------------------------------------------------------------------
# structure pooling


def _kron_reduce(g: Graph, keep: np.ndarray) -> np.ndarray:
    A = g.adjacency.toarray()
    n = g.n
    removed = np.setdiff1d(np.arange(n), keep)
    if removed.size == 0:
        return A[np.ix_(keep, keep)]
    sub = g.adjacency[removed][:, removed]
    n_comp, labels = csgraph.connected_components(sub, directed=False)
    link = np.asarray(g.adjacency[removed][:, keep].sum(axis=1)).ravel()
    for c in range(n_comp):
        members = removed[labels == c]
        if link[labels == c].sum() == 0:
            raise PoolingError(
                "kron reduction: removed component "
                f"{members.tolist()} has no edge to the kept set"
            )
    L = np.diag(A.sum(axis=1)) - A
    L_kk = L[np.ix_(keep, keep)]
    L_kr = L[np.ix_(keep, removed)]
    L_rr = L[np.ix_(removed, removed)]
    lu, piv = scipy.linalg.lu_factor(L_rr, check_finite=False)
    if np.abs(np.diag(lu)).min() < PIVOT_TOL:
        raise PoolingError("kron reduction: singular interior block")
    inv_rr = scipy.linalg.lu_solve((lu, piv), np.eye(removed.size),
                                   check_finite=False)
    schur = L_kk - L_kr @ inv_rr @ L_kr.T
    out = -schur
    np.fill_diagonal(out, 0.0)
    out[(out < 0) & (out > -DUST_TOL)] = 0.0
    return 0.5 * (out + out.T)


def _cluster_connect(g: Graph, ids: np.ndarray):
    rows = g.adjacency[ids].toarray()
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    S = e / e.sum(axis=1, keepdims=True)
    mid = np.asarray((g.adjacency @ S.T).T)
    out = mid @ S.T
    return 0.5 * (out + out.T), S


def pool_structure(g: Graph, ids, method: str = "cluster"):
    """Coarsen the adjacency onto the selected vertices.

    Returns (K x K adjacency, assignment-or-None). ``edge-remove`` is the
    plain submatrix; ``kron`` the Laplacian Schur complement with the
    diagonal discarded; ``cluster`` softmax-normalizes the kept rows into
    a soft assignment S and returns S A S^T along with S.
    """
    ids = _validate_subset(ids, g.n, "pool_structure")
    if method == "edge-remove":
        return induced_adjacency(g, ids), None
    if method == "kron":
        return _kron_reduce(g, ids), None
    if method == "cluster":
        return _cluster_connect(g, ids)
    raise ValueError(f"unknown structure pooling method {method!r}")


def unpool(x_pooled, ids, n: int, op: PropagationOperator, weight) -> ad.Tensor:
    """Scatter coarse rows to their fine indices and interpolate.

    Zero-fills the unselected rows, then applies one propagation layer
    on the finer structure: relu(op @ scattered @ weight).
    """
    scattered = ad.scatter_rows(x_pooled, ids, n)
    return ad.relu(ad.matmul(op.matrix, ad.matmul(scattered, weight)))


@dataclass
class PoolingResult:
    """One pooling step: kept indices (ascending), their affinities, the
    scaled features, the coarsened adjacency, and the soft assignment
    when cluster-connection produced one."""

    ids: np.ndarray
    affinities: np.ndarray
    pooled_features: np.ndarray
    pooled_adjacency: np.ndarray
    assignment: np.ndarray | None = None


def pool_graph(est: AffinityEstimator, g: Graph, X, k: int,
               selector: str = "topk", structure: str = "cluster") -> PoolingResult:
    """Select K vertices with the frozen estimator and pool data+structure."""
    if selector == "greedy":
        picked = select_greedy(est, g, X, k)
    elif selector == "topk":
        picked = select_topk(est, g, X, k)
    else:
        raise ValueError(f"unknown selector {selector!r}")
    ids = np.sort(picked)
    T = est.logit_matrix(g, X)
    a = 1.0 / (1.0 + np.exp(-np.diag(T)[ids]))
    X = np.asarray(X, dtype=np.float64)
    pooled = X[ids] * a[:, None]
    adj, assignment = pool_structure(g, ids, structure)
    return PoolingResult(ids, a, pooled, adj, assignment)
