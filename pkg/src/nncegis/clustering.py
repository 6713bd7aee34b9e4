"""Counterexample selection: k-means in the max norm, silhouette k-selection, and
δ-separated worst-robustness picking within each cluster."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class ClusteringResult:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    silhouettes: dict[int, float] = field(default_factory=dict)


def _dist(P: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Pairwise max-norm distances ``(len(P), len(C))``."""
    return np.max(np.abs(P[:, None, :] - C[None, :, :]), axis=-1)


def _cluster_cost(P: np.ndarray, c: np.ndarray) -> float:
    return float(np.sum(np.max(np.abs(P - c), axis=1) ** 2))


def _best_center(P: np.ndarray, old: np.ndarray) -> np.ndarray:
    """Pick the candidate center with the lowest sum of squared max-norm distances.

    Candidates are the previous center, the mean, the coordinate median and the
    coordinate midrange; keeping the previous one as a candidate makes the
    update never increase the cost.
    """
    cands = [old, P.mean(axis=0), np.median(P, axis=0), 0.5 * (P.min(axis=0) + P.max(axis=0))]
    costs = [_cluster_cost(P, c) for c in cands]
    return cands[int(np.argmin(costs))]


def _kmeanspp(P: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(P)
    idx = [int(rng.integers(n))]
    d2 = _dist(P, P[idx])[:, 0] ** 2
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            j = int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=d2 / tot))
        idx.append(j)
        d2 = np.minimum(d2, _dist(P, P[[j]])[:, 0] ** 2)
    return P[idx].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100) -> ClusteringResult:
    """Lloyd iterations with max-norm assignment and k-means++ seeding.

    Empty clusters are reseeded at the point farthest from its center. When all
    points coincide the result degenerates to a single cluster (``k = 1``).
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = len(P)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not np.all(np.isfinite(P)):
        raise ValueError("points must be finite")
    if np.all(P == P[0]):
        return ClusteringResult(1, np.zeros(n, dtype=int), P[:1].copy(), 0.0, [0.0])
    rng = np.random.default_rng(seed)
    C = _kmeanspp(P, k, rng)
    labels = np.argmin(_dist(P, C), axis=1)
    history = [_inertia(P, C, labels)]
    for _ in range(max_iter):
        for j in range(k):
            members = P[labels == j]
            if len(members) == 0:
                d = _dist(P, C)[np.arange(n), labels]
                far = int(np.argmax(d))
                C[j] = P[far]
                labels[far] = j
            else:
                C[j] = _best_center(members, C[j])
        D = _dist(P, C)
        # keep the current label on ties so assignments cannot oscillate
        cur = D[np.arange(n), labels]
        new = np.argmin(D, axis=1)
        new = np.where(D[np.arange(n), new] < cur, new, labels)
        history.append(_inertia(P, C, new))
        if np.array_equal(new, labels):
            labels = new
            break
        labels = new
    return ClusteringResult(k, labels, C, history[-1], history)


def _inertia(P, C, labels) -> float:
    return float(np.sum(np.max(np.abs(P - C[labels]), axis=1) ** 2))


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient under the max norm (singletons score 0)."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = _dist(P, P)
    s = np.zeros(len(P))
    for i in range(len(P)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in ks if c != labels[i])
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


def silhouette_select_k(points, k_range: Sequence[int] | None = None, seed: int = 0
                        ) -> tuple[int, dict[int, float]]:
    """Number of clusters maximising the mean silhouette (ties go to the smaller k).

    With fewer than three points no clustering is attempted and ``k = n``.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = len(P)
    if n < 3:
        return n, {}
    if k_range is None:
        k_range = range(2, min(10, n - 1) + 1)
    scores: dict[int, float] = {}
    for k in k_range:
        if not 2 <= k <= n - 1:
            raise ValueError(f"k={k} outside [2, n-1]")
        res = kmeans(P, k, seed)
        if res.k < 2 or len(np.unique(res.labels)) < 2:
            continue
        scores[k] = silhouette(P, res.labels)
    if not scores:
        return 1, scores
    best = max(scores.values())
    return min(k for k, v in scores.items() if v == best), scores


def standardize(P: np.ndarray) -> np.ndarray:
    """Per-axis z-score; constant axes become 0."""
    P = np.asarray(P, dtype=float)
    mu = P.mean(axis=0)
    sd = P.std(axis=0)
    return (P - mu) / np.where(sd > 0, sd, 1.0)


@dataclass
class Selection:
    indices: list[int]
    clusters: list[list[int]]
    k: int
    silhouettes: dict[int, float]

    def to_json(self) -> dict:
        return {"k": self.k, "selected": self.indices, "clusters": self.clusters,
                "silhouettes": {str(k): v for k, v in self.silhouettes.items()}}


def _greedy(order: Sequence[int], E: np.ndarray, delta: float, limit: int,
            taken: list[int] | None = None) -> list[int]:
    """Take up to ``limit`` points of ``order`` more than ``delta`` from ``taken`` and each other."""
    taken = [] if taken is None else taken
    new: list[int] = []
    for i in order:
        if len(new) >= limit:
            break
        if all(np.max(np.abs(E[i] - E[j])) > delta for j in taken):
            taken.append(int(i))
            new.append(int(i))
    return new


def select_cex(embeddings, robustness, delta: float, k_rho: int = 3, seed: int = 0,
               cluster: bool = True, k_range: Sequence[int] | None = None) -> Selection:
    """Pick diverse, low-robustness counterexamples.

    Embeddings are z-scored before clustering; ``delta`` is measured on the raw
    embeddings. Within each cluster points are taken in ascending robustness
    order while they stay more than ``delta`` from every point already taken (in
    any cluster), up to ``k_rho`` per cluster. Clusters are visited by their worst
    robustness, so the overall worst point is always kept. With ``cluster=False``
    every point is returned.
    """
    E = np.asarray(embeddings, dtype=float)
    rho = np.asarray(robustness, dtype=float)
    n = len(E)
    if n == 0:
        return Selection([], [], 0, {})
    if not cluster:
        return Selection(list(range(n)), [list(range(n))], 1, {})
    Z = standardize(E)
    k, scores = silhouette_select_k(Z, k_range, seed)
    if k <= 1 or n < 3:
        labels = np.zeros(n, dtype=int) if k <= 1 else np.arange(n)
    else:
        labels = kmeans(Z, k, seed).labels
    clusters = [list(map(int, np.flatnonzero(labels == c))) for c in np.unique(labels)]
    chosen: list[int] = []
    orders = sorted((sorted(m, key=lambda i: (rho[i], i)) for m in clusters), key=lambda o: (rho[o[0]], o[0]))
    for order in orders:
        _greedy(order, E, delta, k_rho, chosen)
    return Selection(sorted(chosen), clusters, len(clusters), scores)


def select_examples(embeddings, robustness, delta: float, count: int, exclude=None) -> list[int]:
    """Highest-robustness examples, greedily δ-separated (also from ``exclude``)."""
    E = np.asarray(embeddings, dtype=float)
    if len(E) == 0 or count <= 0:
        return []
    rho = np.asarray(robustness, dtype=float)
    order = sorted(range(len(E)), key=lambda i: (-rho[i], i))
    X = np.zeros((0, E.shape[1])) if exclude is None or len(exclude) == 0 else np.atleast_2d(exclude)
    taken: list[int] = []
    for i in order:
        if len(taken) >= count:
            break
        if len(X) and np.min(np.max(np.abs(X - E[i]), axis=1)) <= delta:
            continue
        if all(np.max(np.abs(E[i] - E[j])) > delta for j in taken):
            taken.append(int(i))
    return taken
