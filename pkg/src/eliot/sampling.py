"""Deterministic keypoint sampling and neighborhood grouping.

Brute-force O(n^2) distance math throughout: exact, easy to cross-check,
and fast enough at desk scale (n <= ~20k). All distance comparisons use
squared Euclidean distance; ordering and ties are identical to the metric
distance.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class KeypointSelection:
    """Indices picked from a source cloud, in selection order."""

    indices: np.ndarray  # (n_key,) int64, unique
    source_size: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


@dataclass
class GroupTable:
    """Fixed-width neighbor indices per query center.

    indices: (n_centers, width) int64 into the queried cloud. Slots past
    `counts[i]` repeat the first found neighbor; an empty ball stores the
    nearest point in every slot with count 0 so pooling never sees garbage.
    """

    indices: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)


def _sq_dists(points, query):
    """Squared distances from every row of points to one query point."""
    d = points - query
    return np.einsum("ij,ij->i", d, d)


def _positions_of(cloud):
    """Accept a PointCloud or a bare (n, 3) position array."""
    pos = getattr(cloud, "positions", cloud)
    return np.asarray(pos, dtype=np.float64)


def fps(cloud, n_key, start_index=0):
    """Furthest-point sampling: greedy max-min selection.

    First pick is start_index; each next pick maximizes the minimum distance
    to everything already selected, ties broken by lowest index. Requesting
    n_key >= n returns all indices in selection order.
    """
    positions = _positions_of(cloud)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("cannot sample keypoints from an empty cloud")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    n_key = min(n_key, n)
    selected = np.empty(n_key, dtype=np.int64)
    selected[0] = start_index
    min_d = _sq_dists(positions, positions[start_index])
    min_d[start_index] = -np.inf
    for i in range(1, n_key):
        nxt = int(np.argmax(min_d))  # argmax returns the lowest tied index
        selected[i] = nxt
        min_d = np.minimum(min_d, _sq_dists(positions, positions[nxt]))
        min_d[nxt] = -np.inf
    return KeypointSelection(indices=selected, source_size=n)


def ball_query(centers, cloud, radius, max_samples):
    """Per center, up to max_samples in-radius point indices in ascending
    index order; short groups pad with the first hit, empty groups fall back
    to the nearest point with count 0."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if max_samples < 1:
        raise ValueError("max_samples must be >= 1")
    positions = _positions_of(cloud)
    if positions.shape[0] == 0:
        raise ValueError("cannot query an empty cloud")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    r2 = radius * radius
    indices = np.empty((centers.shape[0], max_samples), dtype=np.int64)
    counts = np.empty(centers.shape[0], dtype=np.int64)
    for i, c in enumerate(centers):
        d2 = _sq_dists(positions, c)
        hits = np.flatnonzero(d2 <= r2)[:max_samples]
        if hits.size == 0:
            indices[i] = np.argmin(d2)
            counts[i] = 0
        else:
            indices[i, :hits.size] = hits
            indices[i, hits.size:] = hits[0]
            counts[i] = hits.size
    return GroupTable(indices=indices, counts=counts)


def knn(query_positions, cloud, k):
    """Per query, the k nearest point indices sorted by (distance, index)."""
    positions = _positions_of(cloud)
    if k < 1:
        raise ValueError("k must be >= 1")
    if positions.shape[0] < k:
        raise ValueError(f"cloud has {positions.shape[0]} points, need >= {k}")
    query_positions = np.asarray(query_positions, dtype=np.float64).reshape(-1, 3)
    indices = np.empty((query_positions.shape[0], k), dtype=np.int64)
    for i, q in enumerate(query_positions):
        d2 = _sq_dists(positions, q)
        order = np.argsort(d2, kind="stable")  # stable: ties stay index-ordered
        indices[i] = order[:k]
    return GroupTable(indices=indices, counts=np.full(len(indices), k, dtype=np.int64))
