"""Interior particle synthesis for hollow instances.

Surface point clouds (splat centers) enclose empty space; simulating them
directly gives shells with no bulk. This module fills each clustered
instance with interior particles:

  1. cluster points into instances (density clustering),
  2. build the instance's convex hull,
  3. sample uniform candidates in the hull's AABB,
  4. keep candidates whose 6-ray occupancy exceeds a threshold,
  5. weight survivors by proximity to the original surface points,
     w = max(exp(-d^2 / 2 sigma^2), 1e-6), normalized to probabilities,
  6. draw the requested count by multinomial sampling without replacement
     and merge the new points, marked filled with opacity zero.

The proximity weighting keeps samples near the observed surface and starves
deep cavity regions the hull wrongly covers; the 1e-6 floor keeps every
survivor drawable. Distances are exact nearest distances: the spatial hash
is an accelerator only and falls back to exhaustive search whenever the
local search cannot prove the minimum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .cluster import dbscan
from .hull import ConvexHull, occupancy_batch, quickhull
from .pointset import GeometryError, LabelStore, PointSet

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


@dataclass(frozen=True)
class CandidateSet:
    """Candidate interior points for one instance, enriched stage by stage."""

    points: np.ndarray
    occ: np.ndarray | None = None
    distances: np.ndarray | None = None
    weights: np.ndarray | None = None
    probabilities: np.ndarray | None = None

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class FillResult:
    points: np.ndarray       # (n, 3) selected interior positions
    chosen: np.ndarray       # indices into the surviving candidate set
    candidates: CandidateSet


@dataclass(frozen=True)
class FillParams:
    """Knobs for the fill pipeline; defaults suit unit-cube scenes."""

    radius: float = 0.05
    min_pts: int = 10
    candidates: int = 20000
    sigma: float = 0.02
    occ_threshold: float = 0.6
    fill_density: float = 8.0
    cell_size: float = 1.0 / 64.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be at least 1")
        if self.candidates < 1:
            raise ValueError("candidates must be at least 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.occ_threshold <= 1.0:
            raise ValueError("occ_threshold must be in [0, 1]")
        if self.fill_density < 0:
            raise ValueError("fill_density must be nonnegative")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")


def sample_candidates(hull: ConvexHull, m: int, rng) -> CandidateSet:
    """m i.i.d. uniform samples in the hull's axis-aligned bounding box."""
    if m < 1:
        raise ValueError("candidate count must be at least 1")
    lo, hi = hull.aabb
    return CandidateSet(lo + rng.random((m, 3)) * (hi - lo))


def filter_occupancy(cands: CandidateSet, hull: ConvexHull,
                     threshold: float = 0.6) -> CandidateSet:
    """Keep candidates whose ray-cast occupancy exceeds the threshold."""
    occ = occupancy_batch(cands.points, hull)
    keep = occ > threshold
    return CandidateSet(cands.points[keep], occ=occ[keep])


def nearest_distances(queries, ref_points, cell: float) -> np.ndarray:
    """Exact distance from each query to its nearest reference point.

    A uniform hash over the references answers most queries from the 27
    cells around the query; that local minimum is provably global only when
    it is <= cell, so anything larger (or an empty neighborhood) falls back
    to exhaustive search.
    """
    Q = np.asarray(queries, dtype=np.float64)
    R = np.asarray(ref_points, dtype=np.float64)
    if R.shape[0] == 0:
        raise ValueError("reference point set is empty")

    grid = {}
    for i, key in enumerate(map(tuple, np.floor(R / cell).astype(np.int64))):
        grid.setdefault(key, []).append(i)
    grid = {k: np.array(v, dtype=np.int64) for k, v in grid.items()}

    out = np.empty(Q.shape[0])
    fallback = []
    qkeys = np.floor(Q / cell).astype(np.int64)
    for qi in range(Q.shape[0]):
        kx, ky, kz = qkeys[qi]
        cand = [grid[key]
                for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
                if (key := (kx + dx, ky + dy, kz + dz)) in grid]
        if cand:
            pool = np.concatenate(cand)
            d2 = ((R[pool] - Q[qi]) ** 2).sum(axis=1)
            best = float(np.sqrt(d2.min()))
            if best <= cell:
                out[qi] = best
                continue
        fallback.append(qi)

    for lo in range(0, len(fallback), 256):
        block = np.array(fallback[lo:lo + 256], dtype=np.int64)
        d2 = ((Q[block][:, None, :] - R[None, :, :]) ** 2).sum(axis=2)
        out[block] = np.sqrt(d2.min(axis=1))
    return out


def importance_weights(distances, sigma: float) -> np.ndarray:
    """w = max(exp(-d^2 / 2 sigma^2), 1e-6): near-surface bias with a floor."""
    d = np.asarray(distances, dtype=np.float64)
    return np.maximum(np.exp(-(d * d) / (2.0 * sigma * sigma)), WEIGHT_FLOOR)


def multinomial_draw(probabilities, n: int, rng, replace: bool = False):
    """Draw n candidate indices from a normalized probability vector.

    With replacement: inverse-CDF draws. Without replacement: exponential
    race keyed by Exp(1)/p, whose n smallest keys are a weighted sample
    without replacement; every index with p > 0 stays reachable.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    if n < 0:
        raise ValueError("draw count must be nonnegative")
    if replace:
        edges = np.cumsum(p)
        edges[-1] = 1.0
        return np.searchsorted(edges, rng.random(n), side="right").astype(np.int64)
    if n > p.shape[0]:
        raise ValueError("cannot draw more without replacement than candidates")
    keys = rng.exponential(1.0, size=p.shape[0]) / np.maximum(p, 1e-300)
    return np.argsort(keys, kind="stable")[:n].astype(np.int64)


def mcis_fill(cands: CandidateSet, cluster_points, sigma: float, n_k: int,
              rng) -> FillResult:
    """Importance-sample n_k interior points from occupancy survivors."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n_k < 0:
        raise ValueError("requested count must be nonnegative")
    if len(cands) == 0:
        log.warning("no candidates survived occupancy filtering; instance left unfilled")
        empty = np.empty((0, 3))
        return FillResult(empty, np.empty(0, dtype=np.int64), cands)

    d = nearest_distances(cands.points, cluster_points, 3.0 * sigma)
    w = importance_weights(d, sigma)
    p = w / w.sum()
    enriched = replace(cands, distances=d, weights=w, probabilities=p)
    n = min(n_k, len(cands))
    chosen = multinomial_draw(p, n, rng)
    return FillResult(cands.points[chosen], chosen, enriched)


def fill_pipeline(points: PointSet, params: FillParams = FillParams(),
                  seed: int = 0) -> tuple[PointSet, LabelStore]:
    """Cluster, hull, and fill every instance of a point set.

    Returns the merged point set (original points first, then filled points
    with opacity zero) and the label store covering both. Instances whose
    hulls are degenerate (coplanar clusters such as flat sheets) are passed
    through unfilled with a warning; noise points are never filled.
    """
    result = dbscan(points.positions, params.radius, params.min_pts)
    base = points.with_labels(result.labels)
    cell_volume = params.cell_size ** 3

    new_pos = []
    new_lab = []
    for k in range(result.count):
        idx = result.indices_of(k)
        cluster_pts = points.positions[idx]
        try:
            hull = quickhull(cluster_pts)
        except GeometryError as err:
            log.warning("instance %d: %s; left unfilled", k, err)
            continue
        n_k = int(params.fill_density * hull.volume() / cell_volume)
        if n_k <= 0:
            continue
        rng = np.random.default_rng([seed, k])
        cands = sample_candidates(hull, params.candidates, rng)
        survivors = filter_occupancy(cands, hull, params.occ_threshold)
        if len(survivors) == 0:
            log.warning("instance %d: no occupancy survivors; left unfilled", k)
            continue
        filled = mcis_fill(survivors, cluster_pts, params.sigma, n_k, rng)
        if filled.points.shape[0]:
            new_pos.append(filled.points)
            new_lab.append(np.full(filled.points.shape[0], k, dtype=np.int32))

    if new_pos:
        base = base.append_filled(np.concatenate(new_pos),
                                  np.concatenate(new_lab))
    return base, LabelStore(base.labels, result.count)
