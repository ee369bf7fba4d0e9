"""Per-epoch pseudo-label production.

Embeddings are PCA-reduced, whitened, and row l2-normalized, then grouped
either by Lloyd's K-means (k-means++ seeding, empty clusters repaired by
splitting the largest cluster) or by power iteration clustering on a cosine
top-m affinity graph. Normalized mutual information between two assignments
drives the trainer's early stopping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ClusteringError(ValueError):
    """Raised for degenerate or invalid clustering inputs."""


class DegenerateEmbeddingsError(ClusteringError):
    """Raised when the fit data has no variance in any direction."""


@dataclass
class ReducedEmbeddings:
    values: np.ndarray      # (N, d): whitened then row l2-normalized
    projection: np.ndarray  # (n_in, d) principal directions
    mean: np.ndarray        # (n_in,) column means of the fit data
    whitener: np.ndarray    # (d,) inverse singular-value scales

    def transform(self, Z: np.ndarray) -> np.ndarray:
        """Apply the fitted reduce/whiten/l2 transform to new rows."""
        white = (np.asarray(Z, dtype=np.float64) - self.mean) @ self.projection
        white *= self.whitener
        return _l2_rows(white)


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (c, d)
    algorithm: str         # "kmeans" | "pic"
    num_clusters: int
    inertia: float         # mean squared distance to the assigned centroid
    seed: int
    objective_history: list[float] = field(default_factory=list)


@dataclass
class PseudoLabelAssignment:
    labels: np.ndarray  # (N,) ints in [0, c)
    epoch: int
    cluster_sizes: np.ndarray  # (c,) all >= 1 after repair


@dataclass(frozen=True)
class PicParams:
    # epsilon trades iterations for collapse of the iterate within graph
    # components; 1e-11 leaves disconnected components separated by orders
    # of magnitude more than their internal spread
    top_m: int = 10
    epsilon: float = 1e-11
    max_iter: int = 5000
    epsilon_loop: float = 1e-8


def _l2_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return X / safe


def _as_matrix(X) -> np.ndarray:
    values = X.values if isinstance(X, ReducedEmbeddings) else X
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ClusteringError("expected a 2-D matrix of row vectors")
    if not np.all(np.isfinite(values)):
        raise ClusteringError("non-finite values in clustering input")
    return values


def preprocess(Z: np.ndarray, d: int) -> ReducedEmbeddings:
    """Center, project onto the top-d principal components, whiten each
    component to unit variance (ddof=1), and l2-normalize the rows.

    d is clamped to min(d, N - 1, n_in, numerical rank). Component signs
    follow a deterministic convention: the largest-magnitude entry of each
    principal direction is made positive.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ClusteringError("preprocess requires at least 2 row vectors")
    N, n_in = Z.shape
    mean = Z.mean(axis=0)
    Xc = Z - mean
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = max(N, n_in) * np.finfo(np.float64).eps * (S[0] if S.size else 0.0)
    rank = int(np.sum(S > tol))
    if rank == 0:
        raise DegenerateEmbeddingsError(
            "degenerate embeddings: zero variance in every direction"
        )
    d_eff = min(d, N - 1, n_in, rank)
    Vt = Vt[:d_eff].copy()
    S = S[:d_eff]
    # sign convention: flip each component so its largest |entry| is positive
    peaks = np.argmax(np.abs(Vt), axis=1)
    signs = np.sign(Vt[np.arange(d_eff), peaks])
    signs[signs == 0] = 1.0
    Vt *= signs[:, None]
    projection = Vt.T  # (n_in, d_eff)
    whitener = math.sqrt(N - 1) / S
    white = (Xc @ projection) * whitener
    return ReducedEmbeddings(
        values=_l2_rows(white), projection=projection, mean=mean, whitener=whitener
    )


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(X**2, axis=1)[:, None]
        - 2.0 * (X @ C.T)
        + np.sum(C**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    centroids = np.empty((c, X.shape[1]))
    centroids[0] = X[rng.integers(N)]
    closest = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, c):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(N))
        else:
            idx = int(rng.choice(N, p=closest / total))
        centroids[j] = X[idx]
        closest = np.minimum(closest, np.sum((X - centroids[j]) ** 2, axis=1))
    return centroids


def _repair_empty(labels: np.ndarray, X: np.ndarray, c: int) -> np.ndarray:
    """Fill each empty cluster by splitting the currently largest cluster.

    The two farthest members of the largest cluster seed the split: the
    second one is forced into the empty cluster (so it is never left empty
    even when every point coincides) and the remaining members go to the
    nearer of the two seeds. Any split of one cluster into two groups whose
    centroids are recomputed afterwards cannot raise the K-means objective,
    so repair preserves the per-iteration monotonicity.
    """
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=c)
    while np.any(sizes == 0):
        empty = int(np.argmin(sizes))
        largest = int(np.argmax(sizes))
        members = np.flatnonzero(labels == largest)
        pts = X[members]
        d2 = _sq_dists(pts, pts)
        i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
        if i == j:  # every member coincides; any two distinct members will do
            i, j = 0, 1
        seed_a, seed_b = pts[i], pts[j]
        to_b = np.sum((pts - seed_b) ** 2, axis=1) < np.sum((pts - seed_a) ** 2, axis=1)
        to_b[j] = True
        to_b[i] = False
        labels[members[to_b]] = empty
        sizes = np.bincount(labels, minlength=c)
    return labels


def kmeans_fit(
    X, c: int, seed: int, max_iter: int = 100, epoch: int = 0
) -> tuple[ClusterModel, PseudoLabelAssignment]:
    """Lloyd's algorithm with k-means++ seeding.

    Each iteration assigns, repairs empty clusters, then updates the means;
    the recorded objective (mean squared distance, kept in
    ``objective_history``) is non-increasing across iterations. Terminates
    on an assignment fixpoint or after max_iter iterations.
    """
    Xm = _as_matrix(X)
    N = Xm.shape[0]
    if not 2 <= c <= N:
        raise ClusteringError(f"need 2 <= c <= N, got c={c}, N={N}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(Xm, c, rng)
    prev_labels: Optional[np.ndarray] = None
    history: list[float] = []
    labels = np.zeros(N, dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(Xm, centroids), axis=1)
        labels = _repair_empty(labels, Xm, c)
        for j in range(c):
            centroids[j] = Xm[labels == j].mean(axis=0)
        diffs = Xm - centroids[labels]
        history.append(float(np.mean(np.sum(diffs**2, axis=1))))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
    model = ClusterModel(
        centroids=centroids,
        algorithm="kmeans",
        num_clusters=c,
        inertia=history[-1],
        seed=seed,
        objective_history=history,
    )
    assignment = PseudoLabelAssignment(
        labels=labels, epoch=epoch, cluster_sizes=np.bincount(labels, minlength=c)
    )
    return model, assignment


def cosine_affinity(X: np.ndarray, top_m: int) -> np.ndarray:
    """Cosine-similarity graph: negatives clipped to zero, self-loops
    excluded, top-m neighbors kept per row, symmetrized by max."""
    Xn = _l2_rows(np.asarray(X, dtype=np.float64))
    sims = np.clip(Xn @ Xn.T, 0.0, None)
    np.fill_diagonal(sims, 0.0)
    N = sims.shape[0]
    m = min(top_m, N - 1)
    if m < N - 1:
        kept = np.zeros_like(sims)
        idx = np.argpartition(sims, N - 1 - m, axis=1)[:, N - m - 1 :]
        rows = np.repeat(np.arange(N), idx.shape[1])
        kept[rows, idx.ravel()] = sims[rows, idx.ravel()]
        sims = kept
    return np.maximum(sims, sims.T)


def power_iteration(
    affinity: np.ndarray, params: PicParams
) -> tuple[np.ndarray, int]:
    """Iterate v <- Wv / |Wv|_1 on the row-normalized affinity from the
    normalized degree vector; stop when the acceleration max|d_t - d_{t-1}|
    drops to epsilon or at max_iter. Returns (iterate, iterations_run).

    Isolated vertices (zero row sum) are repaired with a small self-loop.
    """
    A = np.asarray(affinity, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise ClusteringError("affinity matrix must be square")
    if np.any(A < 0):
        raise ClusteringError("affinity weights must be non-negative")
    A = A.copy()
    degrees = A.sum(axis=1)
    isolated = degrees == 0
    if np.any(isolated):
        A[isolated, isolated] = params.epsilon_loop
        degrees = A.sum(axis=1)
    W = A / degrees[:, None]
    v = degrees / degrees.sum()
    prev_delta: Optional[np.ndarray] = None
    iterations = 0
    for t in range(params.max_iter):
        v_new = W @ v
        v_new = v_new / np.abs(v_new).sum()
        delta = np.abs(v_new - v)
        v = v_new
        iterations = t + 1
        if prev_delta is not None and np.max(np.abs(delta - prev_delta)) <= params.epsilon:
            break
        prev_delta = delta
    return v, iterations


def _kmeans_1d(values: np.ndarray, c: int, seed: int, restarts: int = 8) -> np.ndarray:
    """1-D k-means on the power iterate, best of a few seeded restarts."""
    X = values[:, None]
    best_labels: Optional[np.ndarray] = None
    best_inertia = np.inf
    for r in range(restarts):
        model, assignment = kmeans_fit(X, c, seed=seed + r)
        if model.inertia < best_inertia:
            best_inertia = model.inertia
            best_labels = assignment.labels
    assert best_labels is not None
    return best_labels


def pic_fit_affinity(
    affinity: np.ndarray,
    c: int,
    params: PicParams = PicParams(),
    X: Optional[np.ndarray] = None,
    seed: int = 0,
    epoch: int = 0,
) -> tuple[ClusterModel, PseudoLabelAssignment]:
    """Cluster directly from an affinity matrix (see :func:`pic_fit`)."""
    N = affinity.shape[0]
    if not 2 <= c <= N:
        raise ClusteringError(f"need 2 <= c <= N, got c={c}, N={N}")
    v, _ = power_iteration(affinity, params)
    labels = _kmeans_1d(v, c, seed=seed)
    space = _as_matrix(X) if X is not None else v[:, None]
    centroids = np.stack([space[labels == j].mean(axis=0) for j in range(c)])
    diffs = space - centroids[labels]
    inertia = float(np.mean(np.sum(diffs**2, axis=1)))
    model = ClusterModel(
        centroids=centroids,
        algorithm="pic",
        num_clusters=c,
        inertia=inertia,
        seed=seed,
    )
    assignment = PseudoLabelAssignment(
        labels=labels, epoch=epoch, cluster_sizes=np.bincount(labels, minlength=c)
    )
    return model, assignment


def pic_fit(
    X, c: int, params: PicParams = PicParams(), seed: int = 0, epoch: int = 0
) -> tuple[ClusterModel, PseudoLabelAssignment]:
    """Power iteration clustering on the cosine top-m graph of the rows.

    The power iterate embeds points on a line; labels come from a seeded
    1-D k-means on that line, and the reported centroids are the
    input-space means of each label group.
    """
    Xm = _as_matrix(X)
    A = cosine_affinity(Xm, params.top_m)
    return pic_fit_affinity(A, c, params=params, X=Xm, seed=seed, epoch=epoch)


def nmi(A, B) -> float:
    """Normalized mutual information I(A;B) / sqrt(H(A) H(B)) with natural
    logs, computed from the joint contingency table.

    Degenerate entropies: both zero -> 1.0, exactly one zero -> 0.0. Sums
    use math.fsum so the result is exactly symmetric in its arguments.
    """
    A = np.asarray(A, dtype=np.int64)
    B = np.asarray(B, dtype=np.int64)
    if A.shape != B.shape or A.ndim != 1:
        raise ClusteringError("assignments must be equal-length 1-D vectors")
    if A.size == 0:
        raise ClusteringError("assignments must be non-empty")
    n = A.size
    a_ids, a_inv = np.unique(A, return_inverse=True)
    b_ids, b_inv = np.unique(B, return_inverse=True)
    joint = np.zeros((a_ids.size, b_ids.size), dtype=np.int64)
    np.add.at(joint, (a_inv, b_inv), 1)
    pa = joint.sum(axis=1) / n
    pb = joint.sum(axis=0) / n
    log_pa = np.log(pa)
    log_pb = np.log(pb)
    h_a = math.fsum(-p * lp for p, lp in zip(pa, log_pa))
    h_b = math.fsum(-p * lp for p, lp in zip(pb, log_pb))
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    # term shape pij*(log pij - (log pa + log pb)) plus fsum keeps the value
    # exactly invariant to swapping the arguments
    terms = []
    for i in range(a_ids.size):
        for j in range(b_ids.size):
            nij = joint[i, j]
            if nij:
                pij = nij / n
                terms.append(pij * (np.log(pij) - (log_pa[i] + log_pb[j])))
    mi = math.fsum(terms)
    value = mi / math.sqrt(h_a * h_b)
    return min(max(value, 0.0), 1.0)
