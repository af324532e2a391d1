"""Density-based instance clustering.

Classic DBSCAN over 3D positions with a uniform-grid neighbor index. Two
points are neighbors when their distance is <= radius; a point is a core
point when it has at least min_pts neighbors, itself included. Cluster ids
are assigned in ascending order of the first core point discovered, and the
expansion queue processes neighbor indices in ascending order, so the
labeling (not merely the partition) is reproducible and matches a direct
O(n^2) implementation index for index.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .pointset import NOISE, LabelStore

_UNVISITED = -2


@dataclass(frozen=True)
class ClusterResult:
    """Instance labels plus the radius that produced them.

    labels[i] is the cluster id of point i, or NOISE (-1). Cluster ids are
    contiguous in [0, count). Clusters are disjoint by construction and
    their union plus the noise set covers every index.
    """

    labels: np.ndarray
    count: int
    radius: float

    def indices_of(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def clusters(self) -> list[np.ndarray]:
        return [self.indices_of(k) for k in range(self.count)]

    def store(self) -> LabelStore:
        return LabelStore(self.labels, self.count)


def _grid_index(pts, cell):
    grid = {}
    keys = np.floor(pts / cell).astype(np.int64)
    for i, k in enumerate(map(tuple, keys)):
        grid.setdefault(k, []).append(i)
    return grid, keys


def _neighbors(pts, grid, keys, i, radius):
    kx, ky, kz = keys[i]
    cand = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                cell = grid.get((kx + dx, ky + dy, kz + dz))
                if cell is not None:
                    cand.extend(cell)
    cand = np.array(cand, dtype=np.int64)
    d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
    near = cand[d2 <= radius * radius]
    near.sort()
    return near


def dbscan(points, radius: float, min_pts: int = 10) -> ClusterResult:
    """Cluster points into instances; sparse points become noise (-1)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    if pts.shape[0] == 0:
        raise ValueError("cannot cluster an empty point set")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")

    n = pts.shape[0]
    grid, keys = _grid_index(pts, radius)
    labels = np.full(n, _UNVISITED, dtype=np.int32)
    nclusters = 0

    for i in range(n):
        if labels[i] != _UNVISITED:
            continue
        neigh = _neighbors(pts, grid, keys, i, radius)
        if len(neigh) < min_pts:
            labels[i] = NOISE
            continue
        cid = nclusters
        nclusters += 1
        labels[i] = cid
        seeds = deque(int(j) for j in neigh if j != i)
        while seeds:
            j = seeds.popleft()
            if labels[j] == NOISE:
                labels[j] = cid  # border point reachable from a core point
            if labels[j] != _UNVISITED:
                continue
            labels[j] = cid
            jn = _neighbors(pts, grid, keys, j, radius)
            if len(jn) >= min_pts:
                seeds.extend(int(k) for k in jn)
    return ClusterResult(labels, nclusters, float(radius))
