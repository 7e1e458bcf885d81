"""k-means (policy grouping) and DBSCAN (state clustering) on Euclidean points."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from ..errors import ArgumentError, InternalError

logger = logging.getLogger(__name__)

NOISE = -1
_UNVISITED = -2
_NEIGHBOR_CHUNK = 256


@dataclass(frozen=True)
class KMeansResult:
    centroids: npt.NDArray[np.float64]
    assignments: npt.NDArray[np.int64]
    inertia: float
    iterations_run: int


@dataclass(frozen=True)
class DbscanResult:
    labels: npt.NDArray[np.int64]
    cluster_count: int

    @property
    def noise_fraction(self) -> float:
        return float(np.mean(self.labels == NOISE)) if self.labels.size else 0.0


def _as_points(points) -> npt.NDArray[np.float64]:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError(f"expected a non-empty (n, d) point set, got shape {x.shape}")
    return x


def standardize(points) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Per-dimension z-score with population std; constant dimensions map to 0."""
    x = _as_points(points)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    safe = np.where(std > 0.0, std, 1.0)
    z = np.where(std > 0.0, (x - mean) / safe, 0.0)
    return z, mean, std


def _squared_distances(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def _kmeans_plus_plus(x, k, rng: np.random.Generator):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _squared_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, _squared_distances(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _repair_empty(labels, d2, k):
    """Give every empty cluster the point farthest from its own centroid."""
    labels = labels.copy()
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        own = d2[np.arange(len(labels)), labels]
        donors = counts[labels] > 1
        if not np.any(donors):
            raise InternalError("k-means repair found no cluster with a spare point")
        candidate = np.where(donors, own, -np.inf)
        labels[int(np.argmax(candidate))] = j
    return labels


def _lloyd(x, k, rng, max_iters) -> KMeansResult:
    centroids = _kmeans_plus_plus(x, k, rng)
    rows = np.arange(len(x))
    labels = None
    inertia = np.inf
    iterations = 0
    converged = False
    while iterations < max_iters:
        iterations += 1
        d2 = _squared_distances(x, centroids)
        nearest = np.argmin(d2, axis=1)
        new_labels = _repair_empty(nearest, d2, k)
        new_inertia = float(d2[rows, new_labels].sum())
        # only a plain assignment step is guaranteed not to raise the SSE
        if np.array_equal(new_labels, nearest) and new_inertia > inertia * (1.0 + 1e-12) + 1e-12:
            raise InternalError(f"k-means inertia rose from {inertia} to {new_inertia}")
        inertia = new_inertia
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    if not converged:
        logger.warning("k-means stopped after %d iterations without stable assignments", max_iters)
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    return KMeansResult(centroids=centroids, assignments=labels, inertia=inertia, iterations_run=iterations)


def kmeans(points, k: int, seed: Union[int, Sequence[int]], max_iters: int = 100, n_init: int = 10) -> KMeansResult:
    """k-means++ seeded Lloyd iterations; the best of ``n_init`` restarts by inertia.

    Ties in assignment go to the lowest centroid index; restarts draw from a
    single generator so the result depends only on (points, k, seed).
    """
    x = _as_points(points)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ArgumentError(f"k must lie in [1, {n}], got {k}")
    if n_init < 1 or max_iters < 1:
        raise ArgumentError("n_init and max_iters must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(x, k, rng, max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def radius_neighbors(x, eps: float) -> List[npt.NDArray[np.int64]]:
    """Ascending indices within ``eps`` of each point, the point itself included."""
    n = x.shape[0]
    eps2 = eps * eps
    neighbors: List[npt.NDArray[np.int64]] = []
    for start in range(0, n, _NEIGHBOR_CHUNK):
        block = x[start : start + _NEIGHBOR_CHUNK]
        within = _squared_distances(block, x) <= eps2
        rows, cols = np.nonzero(within)
        splits = np.cumsum(np.bincount(rows, minlength=len(block)))[:-1]
        neighbors.extend(np.split(cols, splits))
    return neighbors


def dbscan(points, eps: float, min_pts: int) -> DbscanResult:
    """Density clustering; clusters are numbered in order of their lowest-index core point."""
    if eps <= 0.0 or min_pts < 1:
        raise ArgumentError("dbscan needs eps > 0 and min_pts >= 1")
    x = _as_points(points)
    n = x.shape[0]
    neighbors = radius_neighbors(x, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, _UNVISITED, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != _UNVISITED:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        labels[i] = cluster
        frontier = np.array([i])
        while frontier.size:
            reached = np.unique(np.concatenate([neighbors[j] for j in frontier]))
            fresh = reached[labels[reached] < 0]
            labels[fresh] = cluster
            frontier = fresh[core[fresh]]
        cluster += 1
    return DbscanResult(labels=labels, cluster_count=cluster)
