"""Hypergraph construction over target samples.

Each sample anchors one hyperedge consisting of itself plus its k-1
nearest neighbors by cosine similarity of adapter features. Neighbor
affinities come from a nonnegative least-squares reconstruction of the
anchor feature; per-node self-loops weight uncertain neighborhoods by the
exponential of the normalized entropy of the mean neighbor prediction.
The merged affinities populate a sparse node-by-edge relation matrix
whose rows, compressed by PCA, define each node's high-order cluster.

All operations here are pure functions of immutable inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import ConfigError

SOLVER_MAX_ITER = 10_000
SOLVER_STEP_TOL = 1e-8
SOLVER_KKT_TOL = 1e-6
PCA_TOL = 1e-8
PCA_MAX_ITER = 5000
ACTIVE_TOL = 1e-10


@dataclass(frozen=True)
class Hyperedge:
    """Anchor node, its ordered neighbors, and the length-k affinity vector.

    affinity[0] belongs to the anchor (exactly 1 before self-loop merge),
    affinity[1 + j] to neighbors[j]. `converged` reports whether the
    affinity solve met its tolerance.
    """

    anchor: int
    neighbors: np.ndarray
    affinity: np.ndarray
    converged: bool = True

    def __post_init__(self) -> None:
        neighbors = np.ascontiguousarray(np.asarray(self.neighbors, dtype=np.int64))
        affinity = np.ascontiguousarray(np.asarray(self.affinity, dtype=np.float64))
        object.__setattr__(self, "neighbors", neighbors)
        object.__setattr__(self, "affinity", affinity)
        k = 1 + neighbors.size
        if k <= 2:
            raise ConfigError(f"hyperedge must have more than 2 members, got {k}")
        if affinity.shape != (k,):
            raise ConfigError(
                f"affinity length {affinity.shape} does not match degree {k}"
            )
        if self.anchor in neighbors:
            raise ConfigError(f"anchor {self.anchor} appears in its own neighbor list")
        if len(set(neighbors.tolist())) != neighbors.size:
            raise ConfigError(f"duplicate neighbors in edge anchored at {self.anchor}")
        if not np.isfinite(affinity).all() or (affinity < 0).any():
            raise ConfigError(f"affinity of edge {self.anchor} must be finite and >= 0")
        neighbors.flags.writeable = False
        affinity.flags.writeable = False

    @property
    def degree(self) -> int:
        return 1 + self.neighbors.size

    def members(self) -> np.ndarray:
        return np.concatenate([[self.anchor], self.neighbors])


@dataclass(frozen=True)
class SelfLoopSet:
    """Per-node self-loop affinity values, each in [1, e]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise ConfigError("self-loop values must be a 1-D vector")
        if (values < 1.0 - 1e-12).any() or (values > np.e + 1e-12).any():
            raise ConfigError("self-loop values must lie in [1, e]")
        values.flags.writeable = False


def cosine_knn(features: np.ndarray, k_minus_1: int) -> np.ndarray:
    """Indices of each row's k-1 most cosine-similar other rows.

    Brute force over all pairs; ties broken by lower index. Returns an
    (n, k-1) integer matrix ordered by decreasing similarity.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= k_minus_1 < n:
        raise ConfigError(f"need 1 <= k_minus_1 < n, got k_minus_1={k_minus_1}, n={n}")
    norms = np.linalg.norm(features, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise ConfigError(f"zero-norm feature row at index {zero_rows[0]}")
    unit = features / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    # stable sort keeps equal similarities in ascending index order
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :k_minus_1].astype(np.int64)


def affinity_objective(a: np.ndarray, anchor: np.ndarray, neighbors: np.ndarray,
                       alpha: float) -> float:
    """Reconstruction objective ||a . neighbors - anchor||^2 + alpha*||a||_2."""
    a = np.asarray(a, dtype=np.float64)
    resid = a @ neighbors - anchor
    return float(resid @ resid + alpha * np.linalg.norm(a))


def _batch_kkt_residual(a: np.ndarray, grad_smooth: np.ndarray,
                        alpha: float) -> np.ndarray:
    """First-order optimality residual per instance.

    For a nonzero iterate the norm term is differentiable and the residual
    is the worst violation over coordinates (stationarity on the support,
    nonnegativity of the gradient off it). At a = 0 optimality is the ball
    condition ||max(0, c)||_2 <= alpha where c = -grad_smooth(0).
    """
    norms = np.linalg.norm(a, axis=1)
    pos = norms > 0
    safe = np.where(pos, norms, 1.0)
    g = grad_smooth + alpha * a / safe[:, None]
    free = a > ACTIVE_TOL
    per_coord = np.where(free, np.abs(g), np.maximum(0.0, -g))
    res_pos = per_coord.max(axis=1)
    res_zero = np.maximum(
        0.0, np.linalg.norm(np.maximum(0.0, -grad_smooth), axis=1) - alpha
    )
    return np.where(pos, res_pos, res_zero)


def solve_affinity_batch(
    anchors: np.ndarray,
    neighbor_feats: np.ndarray,
    alpha: float,
    max_iter: int = SOLVER_MAX_ITER,
    step_tol: float = SOLVER_STEP_TOL,
    kkt_tol: float = SOLVER_KKT_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve every anchor's constrained reconstruction problem at once.

    minimize ||sum_j a_j z_{i_j} - z_i||^2 + alpha*||a||_2  s.t. a >= 0

    Accelerated proximal gradient (FISTA) with per-instance gradient
    restart: a step on the smooth quadratic from the extrapolated point,
    then the exact proximal map of alpha*||.||_2 + nonnegativity (clip at
    zero, then shrink the norm by step*alpha, collapsing to exactly 0 when
    that is optimal). Acceleration keeps singular Gram matrices (k-1 >
    d_z) converging to the KKT tolerance. Step size 1/L with L just above
    twice the largest eigenvalue of the neighbor Gram matrix. Returns
    (coefficients (n, k-1), converged flags (n,)); never raises on
    non-convergence.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    neighbor_feats = np.asarray(neighbor_feats, dtype=np.float64)
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    n, k1, _ = neighbor_feats.shape

    gram = np.einsum("nij,nkj->nik", neighbor_feats, neighbor_feats)
    c = 2.0 * np.einsum("nij,nj->ni", neighbor_feats, anchors)

    # largest Gram eigenvalue per instance by power iteration
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([9, 17])))
    b = rng.standard_normal((n, k1))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    for _ in range(128):
        b = np.einsum("nij,nj->ni", gram, b)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        b /= np.maximum(nb, 1e-300)
    lam = np.einsum("ni,nij,nj->n", b, gram, b)
    step = 1.0 / (2.0 * lam * 1.02 + 1e-12)

    a = np.zeros((n, k1))
    a_prev = a
    t = np.ones(n)
    converged = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        beta = (t - 1.0) / t_next
        y = a + beta[:, None] * (a - a_prev)
        grad_y = np.einsum("nij,nj->ni", gram, y) * 2.0 - c
        u = np.maximum(0.0, y - step[:, None] * grad_y)
        unorm = np.linalg.norm(u, axis=1)
        scale = np.where(
            unorm > 0, np.maximum(0.0, 1.0 - step * alpha / np.maximum(unorm, 1e-300)), 0.0
        )
        a_next = scale[:, None] * u
        # gradient restart: momentum pointing against the step kills it
        restart = np.einsum("ni,ni->n", y - a_next, a_next - a) > 0.0
        t_next = np.where(restart, 1.0, t_next)
        change = np.abs(a_next - a).max(axis=1)
        grad = np.einsum("nij,nj->ni", gram, a_next) * 2.0 - c
        res = _batch_kkt_residual(a_next, grad, alpha)
        converged = (change < step_tol) & (res <= kkt_tol)
        a_prev = a
        a = a_next
        t = t_next
        if converged.all():
            break
    return a, converged


def solve_affinity(anchor_feature: np.ndarray, neighbor_features: np.ndarray,
                   alpha: float, **kwargs) -> tuple[np.ndarray, bool]:
    """Single-anchor wrapper around solve_affinity_batch."""
    anchor = np.asarray(anchor_feature, dtype=np.float64)
    neighbors = np.asarray(neighbor_features, dtype=np.float64)
    if anchor.ndim != 1 or neighbors.ndim != 2 or neighbors.shape[1] != anchor.size:
        raise ConfigError(
            f"anchor shape {anchor.shape} and neighbors shape {neighbors.shape} disagree"
        )
    if not (np.isfinite(anchor).all() and np.isfinite(neighbors).all()):
        raise ConfigError("affinity solve requires finite inputs")
    a, flags = solve_affinity_batch(anchor[None, :], neighbors[None, :, :], alpha, **kwargs)
    return a[0], bool(flags[0])


def affinity_kkt_residual(a: np.ndarray, anchor: np.ndarray, neighbors: np.ndarray,
                          alpha: float) -> float:
    """Optimality residual of a candidate solution (0 at the true optimum)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    neighbors = np.asarray(neighbors, dtype=np.float64)
    grad = 2.0 * (a @ neighbors - anchor) @ neighbors.T
    return float(_batch_kkt_residual(a, grad, alpha)[0])


def build_hyperedges(features: np.ndarray, k: int, alpha: float) -> list[Hyperedge]:
    """One hyperedge per node: itself plus k-1 cosine neighbors with affinities."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if k <= 2:
        raise ConfigError(f"k must be greater than 2, got {k}")
    if n <= k - 1:
        raise ConfigError(f"need more than k-1={k - 1} samples, got {n}")
    knn = cosine_knn(features, k - 1)
    coeffs, flags = solve_affinity_batch(features, features[knn], alpha)
    edges = []
    for i in range(n):
        affinity = np.concatenate([[1.0], coeffs[i]])
        edges.append(Hyperedge(i, knn[i], affinity, converged=bool(flags[i])))
    return edges


def neighbor_mean_prediction(edge: Hyperedge, predictions: np.ndarray) -> np.ndarray:
    """Mean prediction over the edge's neighbors; the anchor is excluded."""
    predictions = np.asarray(predictions, dtype=np.float64)
    return predictions[edge.neighbors].mean(axis=0)


def normalized_entropy(p: np.ndarray) -> float:
    """Shannon entropy of p divided by log(|C|), in [0, 1]; 0*log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (p < -1e-9).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"not a probability vector: {p}")
    if p.size < 2:
        return 0.0
    q = np.clip(p, 0.0, None)
    nz = q[q > 0]
    h = float(-(nz * np.log(nz)).sum() / np.log(p.size))
    return min(max(h, 0.0), 1.0)


def self_loop_affinities(hyperedges: list[Hyperedge],
                         predictions: np.ndarray) -> SelfLoopSet:
    """W_s(v_i) = exp of the normalized entropy of edge i's mean neighbor prediction."""
    if [e.anchor for e in hyperedges] != list(range(len(hyperedges))):
        raise ConfigError("expected one hyperedge per node, anchored in index order")
    values = np.array([
        np.exp(normalized_entropy(neighbor_mean_prediction(e, predictions)))
        for e in hyperedges
    ])
    return SelfLoopSet(values)


def merge_self_loops(hyperedges: list[Hyperedge],
                     selfloops: SelfLoopSet) -> list[Hyperedge]:
    """Add each member's own self-loop value to its affinity entry."""
    merged = []
    for edge in hyperedges:
        bump = np.concatenate([
            [selfloops.values[edge.anchor]], selfloops.values[edge.neighbors]
        ])
        merged.append(
            Hyperedge(edge.anchor, edge.neighbors, edge.affinity + bump,
                      converged=edge.converged)
        )
    return merged


def build_relation_matrix(hyperedges: list[Hyperedge]) -> sp.csc_array:
    """Sparse n x n matrix: column j holds edge j's affinities at its members."""
    n = len(hyperedges)
    rows, cols, data = [], [], []
    for j, edge in enumerate(hyperedges):
        members = edge.members()
        rows.extend(members.tolist())
        cols.extend([j] * members.size)
        data.extend(edge.affinity.tolist())
    return sp.csc_array((data, (rows, cols)), shape=(n, n))


def _center_matvec(H, mu: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(Xc^T Xc) v for a block of columns v, covariance never materialized."""
    n = H.shape[0]
    return H.T @ (H @ v) - n * mu[:, None] * (mu @ v)[None, :]


def pca_rows(H, m_prime: int, seed: int, tol: float = PCA_TOL,
             max_iter: int = PCA_MAX_ITER) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-m' principal components of the rows of H by orthogonal iteration.

    Deterministic: seeded random start, iterate V <- qr(C @ V) until the
    spanned subspace moves less than tol per sweep (or stops shrinking),
    then a Rayleigh-Ritz rotation orders components by decreasing
    eigenvalue. Sign convention: each component's largest-magnitude
    coordinate is positive. Returns (compressed rows (n, m'), components
    (n, m'), eigenvalues).
    """
    n = H.shape[0]
    if not 1 <= m_prime < n:
        raise ConfigError(f"need 1 <= m_prime < n, got m_prime={m_prime}, n={n}")
    if sp.issparse(H):
        mu = np.asarray(H.mean(axis=0)).ravel()
    else:
        H = np.asarray(H, dtype=np.float64)
        mu = H.mean(axis=0)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 41])))
    v, _ = np.linalg.qr(rng.standard_normal((n, m_prime)))
    prev_err = np.inf
    stalled = 0
    # several covariance applications per orthogonalization: same fixed
    # point, fewer of the QR factorizations that dominate the cost
    chain = 5
    for _ in range(max_iter):
        y = _center_matvec(H, mu, v)
        for _ in range(chain - 1):
            y = _center_matvec(H, mu, y)
        v_new, _ = np.linalg.qr(y)
        err = np.linalg.norm(v_new - v @ (v.T @ v_new))
        v = v_new
        if err < tol:
            break
        # secondary stop: subspace error has stopped shrinking, which
        # happens when trailing eigenvalues are nearly tied and the split
        # between kept and dropped directions cannot settle
        stalled = stalled + 1 if err >= 0.9 * prev_err else 0
        if stalled >= 3:
            break
        prev_err = err

    small = v.T @ _center_matvec(H, mu, v)
    small = (small + small.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(small)
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    components = v @ eigvecs[:, order]
    for col in range(m_prime):
        peak = np.argmax(np.abs(components[:, col]))
        if components[peak, col] < 0:
            components[:, col] = -components[:, col]
    compressed = (H @ components) - mu @ components
    return compressed, components, eigvals


def compress_rows(H, m_prime: int, seed: int) -> np.ndarray:
    """Rows of H projected onto their top-m' mean-centered principal axes."""
    compressed, _, _ = pca_rows(H, m_prime, seed)
    return compressed


def default_m_prime(n: int) -> int:
    return min(64, n - 1)


def cluster_high_order(compressed: np.ndarray, h: int) -> np.ndarray:
    """Each row's h nearest rows by Euclidean distance, self excluded.

    Distances use explicit row differences so exact duplicates tie exactly;
    ties resolve to the lower index. Returns an (n, h) index matrix ordered
    by increasing distance.
    """
    compressed = np.asarray(compressed, dtype=np.float64)
    n = compressed.shape[0]
    if not 1 <= h < n:
        raise ConfigError(f"need 1 <= h < n, got h={h}, n={n}")
    out = np.empty((n, h), dtype=np.int64)
    chunk = max(1, min(64, n))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = compressed[None, :, :] - compressed[start:stop, None, :]
        d2 = np.einsum("cnd,cnd->cn", diff, diff)
        for local, i in enumerate(range(start, stop)):
            d2[local, i] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :h]
    return out


@dataclass(frozen=True)
class HypergraphArtifacts:
    """Everything one hypergraph refresh produces."""

    edges: list[Hyperedge]
    selfloops: SelfLoopSet | None
    relation: sp.csc_array
    compressed: np.ndarray
    clusters: np.ndarray  # (n, h) close-set indices


def build_artifacts(features: np.ndarray, predictions: np.ndarray, *, k: int,
                    alpha: float, h: int, m_prime: int | None, seed: int,
                    use_self_loops: bool = True) -> HypergraphArtifacts:
    """Full pipeline: hyperedges, self-loops, relation matrix, PCA, clusters."""
    n = np.asarray(features).shape[0]
    edges = build_hyperedges(features, k, alpha)
    selfloops = None
    if use_self_loops:
        selfloops = self_loop_affinities(edges, predictions)
        edges = merge_self_loops(edges, selfloops)
    relation = build_relation_matrix(edges)
    m_prime = default_m_prime(n) if m_prime is None else m_prime
    compressed = compress_rows(relation, m_prime, seed)
    clusters = cluster_high_order(compressed, h)
    return HypergraphArtifacts(edges, selfloops, relation, compressed, clusters)


def debug_dict(artifacts: HypergraphArtifacts) -> dict:
    """JSON-serializable dump of the hypergraph for inspection."""
    return {
        "nodes": len(artifacts.edges),
        "edges": [
            {
                "anchor": int(e.anchor),
                "neighbors": e.neighbors.tolist(),
                "affinity": e.affinity.tolist(),
                "converged": bool(e.converged),
            }
            for e in artifacts.edges
        ],
        "selfloops": (
            artifacts.selfloops.values.tolist() if artifacts.selfloops is not None else None
        ),
    }
