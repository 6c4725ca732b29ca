"""Dynamic agent grouping by spectral clustering of recent state trajectories.

Pipeline: per-agent trajectory window -> binary kNN similarity graph ->
symmetric normalized Laplacian -> Jacobi eigendecomposition -> row-normalized
spectral embedding -> k-means -> silhouette-based choice of the group count.
A new grouping replaces the current one only if enough agents change group.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class SpectralConfig:
    k_min: int = 2
    k_max: int = 4
    knn: int = 2
    delta: float = 0.8
    interval: int = 100
    kmeans_restarts: int = 10
    kmeans_iters: int = 100
    seed: int = 0
    window_len: int = 8

    def validate(self, n_agents: int | None = None) -> None:
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("spectral.k_min must satisfy 1 <= k_min <= k_max")
        if n_agents is not None and self.k_max > n_agents:
            raise ValueError(f"spectral.k_max must be <= number of agents ({n_agents})")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("spectral.delta must be in [0,1]")
        for name in ("knn", "interval", "kmeans_restarts", "kmeans_iters", "window_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"spectral.{name} must be >= 1")


class StateHistoryWindow:
    """Per-agent ring buffer of the last ``window_len`` normalized observations.

    Features are standardized with running (population) statistics pooled over
    every vector pushed so far: ``(x - mean) / (std + 1e-8)``.
    """

    def __init__(self, n_agents: int, window_len: int, feat_dim: int):
        self.n_agents = n_agents
        self.window_len = window_len
        self.feat_dim = feat_dim
        self.buffer = [deque(maxlen=window_len) for _ in range(n_agents)]
        self._count = 0
        self._mean = np.zeros(feat_dim)
        self._m2 = np.zeros(feat_dim)

    def push(self, states: np.ndarray) -> None:
        states = np.asarray(states, dtype=np.float64)
        if states.shape != (self.n_agents, self.feat_dim):
            raise ValueError(f"expected states of shape {(self.n_agents, self.feat_dim)}, "
                             f"got {states.shape}")
        for x in states:
            self._count += 1
            d = x - self._mean
            self._mean += d / self._count
            self._m2 += d * (x - self._mean)
        std = np.sqrt(self._m2 / self._count)
        normed = (states - self._mean) / (std + 1e-8)
        for ring, v in zip(self.buffer, normed):
            ring.append(v)

    def __len__(self) -> int:
        return min(len(r) for r in self.buffer) if self.buffer else 0

    def trajectories(self) -> np.ndarray:
        """Flattened trajectories, shape (n_agents, window_len * feat_dim).

        Short histories are zero-padded in the oldest slots.
        """
        out = np.zeros((self.n_agents, self.window_len, self.feat_dim))
        for i, ring in enumerate(self.buffer):
            if ring:
                out[i, self.window_len - len(ring):] = np.stack(ring)
        return out.reshape(self.n_agents, -1)

    def latest(self) -> np.ndarray:
        return np.stack([r[-1] for r in self.buffer])

    def freeze(self) -> "StateHistoryWindow":
        clone = StateHistoryWindow(self.n_agents, self.window_len, self.feat_dim)
        clone.buffer = [deque(r, maxlen=self.window_len) for r in self.buffer]
        clone._count, clone._mean, clone._m2 = self._count, self._mean.copy(), self._m2.copy()
        return clone


@dataclass
class SimilarityGraph:
    weights: np.ndarray
    knn: int = 0

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass
class Grouping:
    labels: np.ndarray
    k: int
    cohesion: np.ndarray
    version: int = 0
    eta_last: float = 0.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.cohesion = np.asarray(self.cohesion, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def silhouette(self) -> float:
        """Agent-weighted mean silhouette."""
        return float(np.mean(self.cohesion[self.labels]))

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.labels == g)

    def same_partition(self, other: "Grouping") -> bool:
        return self.k == other.k and eta(self, other) == 0.0


def single_group(n: int, version: int = 0) -> Grouping:
    return Grouping(np.zeros(n, dtype=int), 1, np.zeros(1), version=version)


def canonical_labels(labels) -> np.ndarray:
    """Renumber labels in order of first appearance."""
    labels = np.asarray(labels)
    mapping: dict[int, int] = {}
    for x in labels:
        mapping.setdefault(int(x), len(mapping))
    return np.array([mapping[int(x)] for x in labels], dtype=int)


# -- graph construction ---------------------------------------------------------
def pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def build_knn_similarity(window: StateHistoryWindow | np.ndarray, knn: int) -> SimilarityGraph:
    """Binary kNN graph over flattened trajectories (edge if either side is a neighbor)."""
    traj = window.trajectories() if isinstance(window, StateHistoryWindow) else np.asarray(window, float)
    if isinstance(window, StateHistoryWindow) and len(window) == 0:
        raise ValueError("build_knn_similarity: empty state history window")
    n = traj.shape[0]
    if not 1 <= knn < n:
        raise ValueError(f"build_knn_similarity: knn must be in [1, {n - 1}], got {knn}")
    dist = pairwise_distances(traj)
    np.fill_diagonal(dist, np.inf)
    w = np.zeros((n, n))
    for i in range(n):
        nbrs = np.argsort(dist[i], kind="stable")[:knn]
        w[i, nbrs] = 1.0
    w = np.maximum(w, w.T)
    np.fill_diagonal(w, 0.0)
    return SimilarityGraph(w, knn)


def normalized_laplacian(g: SimilarityGraph | np.ndarray) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2``; isolated nodes get a 1e-8 self-loop first."""
    w = np.array(g.weights if isinstance(g, SimilarityGraph) else g, dtype=np.float64)
    deg = w.sum(axis=1)
    isolated = deg <= 0
    if np.any(isolated):
        w[isolated, isolated] += 1e-8
        deg = w.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(len(w)) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


# -- eigensolver ---------------------------------------------------------------
def eigh(m: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eigh: expected a square matrix, got shape {a.shape}")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9:
        raise ValueError("eigh: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(np.diag(a)))
        if n < 2 or off.max() < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], v[:, order]


def spectral_embed(laplacian: np.ndarray, k: int, eig=None) -> np.ndarray:
    """Rows of the k smallest eigenvectors, each scaled to unit length."""
    n = laplacian.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"spectral_embed: k must be in [1, {n}], got {k}")
    _, vecs = eig if eig is not None else eigh(laplacian)
    u = vecs[:, :k].copy()
    norms = np.linalg.norm(u, axis=1)
    ok = norms >= 1e-12
    u[ok] /= norms[ok, None]
    u[~ok] = 0.0
    return u


# -- discretization ------------------------------------------------------------
def _assign(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1), d2


def _plus_plus(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
    return np.array(centers, dtype=np.float64)


def _repair_empty(points, labels, centers, k):
    for c in range(k):
        if np.any(labels == c):
            continue
        counts = np.bincount(labels, minlength=k)
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((points[members] - centers[big]) ** 2).sum(-1))]
        labels[far] = c
        centers[c] = points[far]
        centers[big] = points[labels == big].mean(axis=0)
    return labels


def wcss(points: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(labels):
        pts = points[labels == c]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def kmeans(points: np.ndarray, k: int, restarts: int = 10, iters: int = 100,
           seed: int | np.random.Generator = 0) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by WCSS."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: k must be in [1, {n}], got {k}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best, best_score = None, np.inf
    for _ in range(restarts):
        centers = _plus_plus(points, k, rng)
        labels, _ = _assign(points, centers)
        labels = _repair_empty(points, labels, centers, k)
        for _ in range(iters):
            centers = np.array([points[labels == c].mean(axis=0) for c in range(k)])
            new, _ = _assign(points, centers)
            new = _repair_empty(points, new, centers, k)
            if np.array_equal(new, labels):
                break
            labels = new
        score = wcss(points, labels)
        if score < best_score - 1e-12:
            best, best_score = labels.copy(), score
    return best


def silhouette_samples(points: np.ndarray, labels) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ValueError("silhouette: at least two groups are required")
    dist = pairwise_distances(points)
    s = np.zeros(len(points))
    for i in range(len(points)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, labels == g].mean() for g in groups if g != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette; singleton-group points score 0, as do a=b=0 points."""
    return float(np.mean(silhouette_samples(points, labels)))


def _grouping_from(points, labels, version=0) -> Grouping:
    labels = canonical_labels(labels)
    k = int(labels.max()) + 1
    s = silhouette_samples(points, labels) if k >= 2 else np.zeros(len(labels))
    cohesion = np.array([s[labels == g].mean() for g in range(k)])
    return Grouping(labels, k, cohesion, version=version)


def cluster_graph(g: SimilarityGraph, cfg: SpectralConfig) -> Grouping:
    n = g.n
    if n < 2:
        return single_group(n)
    lap = normalized_laplacian(g)
    eig = eigh(lap)
    rng = np.random.default_rng(cfg.seed)
    best = None
    for k in range(max(2, cfg.k_min), min(cfg.k_max, n) + 1):
        emb = spectral_embed(lap, k, eig=eig)
        labels = kmeans(emb, k, cfg.kmeans_restarts, cfg.kmeans_iters, rng)
        score = silhouette(emb, labels)
        if best is None or score > best[0]:
            best = (score, emb, labels)
    if best is None:
        return single_group(n)
    return _grouping_from(best[1], best[2])


def cluster(window: StateHistoryWindow, cfg: SpectralConfig) -> Grouping:
    """Candidate grouping C(H) with the silhouette-maximizing group count.

    Ties in silhouette keep the smaller k.
    """
    if window.n_agents < 2:
        return single_group(window.n_agents)
    knn = min(cfg.knn, window.n_agents - 1)
    return cluster_graph(build_knn_similarity(window, knn), cfg)


# -- objectives and update rule ------------------------------------------------
def ncut(g: SimilarityGraph | np.ndarray, labels) -> float:
    w = np.asarray(g.weights if isinstance(g, SimilarityGraph) else g, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != w.shape[0]:
        raise ValueError(f"ncut: {len(labels)} labels for a graph of {w.shape[0]} nodes")
    deg = w.sum(axis=1)
    total = 0.0
    for c in np.unique(labels):
        inside = labels == c
        vol = deg[inside].sum()
        if vol > 0:
            total += w[np.ix_(inside, ~inside)].sum() / vol
    return float(total)


def contingency(prev_labels, next_labels) -> np.ndarray:
    prev_labels, next_labels = np.asarray(prev_labels), np.asarray(next_labels)
    table = np.zeros((prev_labels.max() + 1, next_labels.max() + 1), dtype=int)
    np.add.at(table, (prev_labels, next_labels), 1)
    return table


def eta(prev: Grouping | np.ndarray, nxt: Grouping | np.ndarray) -> float:
    """Fraction of agents that change group once labels are matched.

    Labels carry no identity, so groups are paired by the assignment that
    maximizes total overlap before counting movers.
    """
    a = prev.labels if isinstance(prev, Grouping) else canonical_labels(prev)
    b = nxt.labels if isinstance(nxt, Grouping) else canonical_labels(nxt)
    if len(a) != len(b):
        raise ValueError("eta: groupings cover different agent counts")
    if len(a) == 0:
        return 0.0
    table = contingency(a, b)
    rows, cols = linear_sum_assignment(table, maximize=True)
    kept = table[rows, cols].sum()
    return float(1.0 - kept / len(a))


def update_rule(prev: Grouping, candidate: Grouping, delta: float) -> Grouping:
    """Adopt ``candidate`` iff its change fraction exceeds ``delta``."""
    e = eta(prev, candidate)
    if e > delta:
        return replace(candidate, version=prev.version + 1, eta_last=e)
    return replace(prev, eta_last=e)


def maybe_update(prev: Grouping, window: StateHistoryWindow, cfg: SpectralConfig) -> Grouping:
    return update_rule(prev, cluster(window, cfg), cfg.delta)


def potential(grouping: Grouping, states: np.ndarray) -> float:
    """Sum of squared distances over unordered intra-group agent pairs."""
    states = np.asarray(states, dtype=np.float64)
    total = 0.0
    for g in range(grouping.k):
        pts = states[grouping.labels == g]
        if len(pts) > 1:
            diff = pts[:, None, :] - pts[None, :, :]
            total += float(np.triu((diff * diff).sum(-1), 1).sum())
    return total
