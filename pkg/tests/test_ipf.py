"""Instance clustering, hulls, occupancy, and interior filling.

Oracles are deliberately naive: an O(n^2) direct clustering pass, an O(n^4)
supporting-plane enumeration for hull extremes, exact half-space inclusion
for occupancy parity, and exhaustive nearest-distance scans.
"""

import logging
from collections import deque
from itertools import combinations

import numpy as np
import pytest

from splatphys.cluster import dbscan
from splatphys.fill import (
    CandidateSet,
    FillParams,
    fill_pipeline,
    filter_occupancy,
    importance_weights,
    mcis_fill,
    multinomial_draw,
    nearest_distances,
    sample_candidates,
)
from splatphys.hull import occupancy, occupancy_batch, quickhull
from splatphys.pointset import NOISE, GeometryError, PointSet


# ---------------------------------------------------------------------------
# oracles


def naive_dbscan(pts, radius, min_pts):
    """Direct O(n^2) density clustering, same ordering conventions."""
    n = pts.shape[0]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= radius * radius
    labels = np.full(n, -2, dtype=np.int32)
    nclusters = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        neigh = np.nonzero(adj[i])[0]
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
                labels[j] = cid
            if labels[j] != -2:
                continue
            labels[j] = cid
            jn = np.nonzero(adj[j])[0]
            if len(jn) >= min_pts:
                seeds.extend(int(k) for k in jn)
    return labels, nclusters


def brute_force_extremes(pts, tol=1e-10):
    """Indices on the convex hull via supporting-plane enumeration.

    A triple supports the hull when every other point sits on one side of
    its plane; the union of supporting triples is the extreme set. O(n^4),
    valid for points in general position.
    """
    n = pts.shape[0]
    scale = np.linalg.norm(pts.max(0) - pts.min(0))
    extreme = set()
    for i, j, k in combinations(range(n), 3):
        nrm = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        ln = np.linalg.norm(nrm)
        if ln < tol * scale * scale:
            continue
        d = (pts - pts[i]) @ (nrm / ln)
        if np.all(d <= tol * scale) or np.all(d >= -tol * scale):
            extreme.update((i, j, k))
    return np.array(sorted(extreme))


def halfspace_inside(hull, q, margin=0.0):
    return bool(np.all(hull.plane_distances(q) <= margin))


def cube_shell(center, side, per_edge):
    """Points covering the 6 faces of an axis-aligned cube surface."""
    c = np.asarray(center, dtype=np.float64)
    t = np.linspace(-side / 2.0, side / 2.0, per_edge)
    u, v = np.meshgrid(t, t, indexing="ij")
    u, v = u.ravel(), v.ravel()
    h = side / 2.0
    faces = []
    for axis in range(3):
        for sgn in (-h, h):
            f = np.empty((u.size, 3))
            f[:, axis] = sgn
            f[:, (axis + 1) % 3] = u
            f[:, (axis + 2) % 3] = v
            faces.append(f)
    pts = np.unique(np.round(np.concatenate(faces) + c, 12), axis=0)
    return pts


# ---------------------------------------------------------------------------
# clustering


class TestClustering:
    def test_two_separated_blobs(self):
        rng = np.random.default_rng(3)
        r = 0.05
        a = rng.normal(0.0, 0.01, (100, 3))
        b = rng.normal(0.0, 0.01, (100, 3)) + np.array([10 * r, 0, 0])
        res = dbscan(np.concatenate([a, b]), r, min_pts=5)
        assert res.count == 2
        assert set(res.labels[:100]) == {0}
        assert set(res.labels[100:]) == {1}

    def test_single_dense_blob(self):
        rng = np.random.default_rng(4)
        pts = rng.random((200, 3)) * 0.02
        res = dbscan(pts, 0.05, min_pts=5)
        assert res.count == 1
        assert not np.any(res.labels == NOISE)

    def test_isolated_point_is_noise(self):
        rng = np.random.default_rng(5)
        pts = np.concatenate([rng.random((50, 3)) * 0.01,
                              np.array([[5.0, 5.0, 5.0]])])
        res = dbscan(pts, 0.05, min_pts=5)
        assert res.labels[-1] == NOISE

    @pytest.mark.parametrize("seed,radius,min_pts", [
        (0, 0.08, 4), (1, 0.12, 6), (2, 0.05, 3), (3, 0.2, 10), (4, 0.1, 1),
    ])
    def test_matches_naive_reference(self, seed, radius, min_pts):
        rng = np.random.default_rng(seed)
        pts = rng.random((500, 3))
        res = dbscan(pts, radius, min_pts)
        ref_labels, ref_count = naive_dbscan(pts, radius, min_pts)
        assert res.count == ref_count
        np.testing.assert_array_equal(res.labels, ref_labels)

    def test_clusters_partition_indices(self):
        rng = np.random.default_rng(6)
        pts = rng.random((300, 3)) * 0.5
        res = dbscan(pts, 0.06, min_pts=4)
        seen = np.concatenate(res.clusters() + [np.nonzero(res.labels == NOISE)[0]])
        assert sorted(seen) == list(range(300))

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            dbscan(np.empty((0, 3)), 0.05)

    def test_bad_params_rejected(self):
        pts = np.zeros((5, 3))
        with pytest.raises(ValueError):
            dbscan(pts, 0.0)
        with pytest.raises(ValueError):
            dbscan(pts, 0.05, min_pts=0)


# ---------------------------------------------------------------------------
# convex hull


CUBE = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                 [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.float64)


class TestQuickhull:
    def test_cube_corners_with_interior_points(self):
        rng = np.random.default_rng(7)
        interior = 0.1 + 0.8 * rng.random((100, 3))
        pts = np.concatenate([CUBE, interior])
        hull = quickhull(pts)
        assert sorted(hull.vertices) == list(range(8))
        assert hull.faces.shape == (12, 3)
        assert abs(hull.volume() - 1.0) < 1e-12

    def test_regular_tetrahedron(self):
        pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]],
                       dtype=np.float64)
        hull = quickhull(pts)
        assert len(hull.vertices) == 4
        assert hull.faces.shape == (4, 3)
        assert abs(hull.volume() - 8.0 / 3.0) < 1e-12

    @pytest.mark.parametrize("seed", [10, 11, 12])
    def test_matches_brute_force_extremes(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.random((50, 3))
        hull = quickhull(pts)
        np.testing.assert_array_equal(np.sort(hull.vertices),
                                      brute_force_extremes(pts))

    def test_watertight_and_eulerian(self):
        rng = np.random.default_rng(13)
        hull = quickhull(rng.random((200, 3)))
        edges = {}
        for a, b, c in hull.faces:
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                edges[key] = edges.get(key, 0) + 1
        assert all(v == 2 for v in edges.values())
        V, E, F = len(hull.vertices), len(edges), hull.faces.shape[0]
        assert V - E + F == 2

    def test_all_input_points_inside(self):
        rng = np.random.default_rng(14)
        pts = rng.random((300, 3))
        hull = quickhull(pts)
        dist = pts @ hull.normals.T - hull.offsets[None, :]
        assert dist.max() <= hull.plane_eps

    def test_normals_point_outward(self):
        hull = quickhull(CUBE)
        centers = hull.points[hull.faces].mean(axis=1)
        outward = centers - hull.interior_point
        assert np.all(np.einsum("ij,ij->i", outward, hull.normals) > 0)

    def test_shell_hull_collapses_to_corners(self):
        pts = cube_shell((0.5, 0.5, 0.5), 1.0, 9)
        hull = quickhull(pts)
        corner_mask = np.all(np.isin(np.abs(pts - 0.5), 0.5), axis=1)
        assert len(hull.vertices) == 8
        assert np.all(corner_mask[hull.vertices])
        assert abs(hull.volume() - 1.0) < 1e-9

    def test_too_few_points_rejected(self):
        with pytest.raises(GeometryError, match="at least 4"):
            quickhull(CUBE[:3])

    def test_coplanar_rejected(self):
        rng = np.random.default_rng(15)
        flat = rng.random((40, 3))
        flat[:, 2] = 0.25
        with pytest.raises(GeometryError, match="coplanar"):
            quickhull(flat)

    def test_collinear_rejected(self):
        t = np.linspace(0.0, 1.0, 30)
        line = np.stack([t, 2 * t, -t], axis=1)
        with pytest.raises(GeometryError, match="collinear"):
            quickhull(line)

    def test_coincident_rejected(self):
        with pytest.raises(GeometryError, match="coincide"):
            quickhull(np.ones((10, 3)))

    def test_contains_interior_and_excludes_exterior(self):
        hull = quickhull(CUBE)
        assert hull.contains((0.5, 0.5, 0.5))
        assert not hull.contains((1.5, 0.5, 0.5))


# ---------------------------------------------------------------------------
# candidate sampling


class TestSampleCandidates:
    def test_uniform_mean_clt_bound(self):
        hull = quickhull(CUBE)
        cands = sample_candidates(hull, 10000, np.random.default_rng(20))
        mean = cands.points.mean(axis=0)
        assert np.all(np.abs(mean - 0.5) < 0.02)

    def test_single_sample_in_box(self):
        hull = quickhull(CUBE)
        cands = sample_candidates(hull, 1, np.random.default_rng(21))
        lo, hi = hull.aabb
        assert np.all(cands.points >= lo) and np.all(cands.points <= hi)

    def test_all_samples_in_box(self):
        rng = np.random.default_rng(22)
        hull = quickhull(rng.random((40, 3)) * 2.0 - 0.5)
        cands = sample_candidates(hull, 5000, np.random.default_rng(23))
        lo, hi = hull.aabb
        assert np.all(cands.points >= lo) and np.all(cands.points <= hi)

    def test_same_seed_identical(self):
        hull = quickhull(CUBE)
        a = sample_candidates(hull, 100, np.random.default_rng(9)).points
        b = sample_candidates(hull, 100, np.random.default_rng(9)).points
        np.testing.assert_array_equal(a, b)

    def test_zero_samples_rejected(self):
        hull = quickhull(CUBE)
        with pytest.raises(ValueError):
            sample_candidates(hull, 0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# occupancy


class TestOccupancy:
    def test_centroid_fully_inside(self):
        rng = np.random.default_rng(30)
        hull = quickhull(rng.random((60, 3)))
        centroid = hull.points[hull.vertices].mean(axis=0)
        assert occupancy(centroid, hull) == 1.0

    def test_outside_aabb_is_zero(self):
        hull = quickhull(CUBE)
        assert occupancy((2.0, 2.0, 2.0), hull) == 0.0
        assert occupancy((-1.0, 0.5, 0.5), hull) == 0.0

    def test_agrees_with_halfspace_oracle(self):
        rng = np.random.default_rng(31)
        hull = quickhull(rng.random((60, 3)))
        queries = rng.random((1000, 3)) * 1.4 - 0.2
        occ = occupancy_batch(queries, hull)
        for q, o in zip(queries, occ):
            dist = hull.plane_distances(q)
            if np.min(np.abs(dist)) <= 1e-7:
                continue  # too close to a face plane to classify
            assert (o > 0.6) == bool(np.all(dist < 0))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(32)
        hull = quickhull(rng.random((30, 3)))
        queries = rng.random((64, 3)) * 1.2 - 0.1
        batch = occupancy_batch(queries, hull)
        scalar = np.array([occupancy(q, hull) for q in queries])
        np.testing.assert_array_equal(batch, scalar)

    def test_grazing_ray_is_deterministic_and_bounded(self):
        hull = quickhull(CUBE)
        for q in [(0.5, 0.5, 1.0), (-0.5, 1.0, 0.5), (1.0, 1.0, 1.0)]:
            a = occupancy(q, hull)
            b = occupancy(q, hull)
            assert a == b
            assert 0.0 <= a <= 1.0

    def test_near_face_interior_point(self):
        hull = quickhull(CUBE)
        assert occupancy((0.5, 0.5, 1.0 - 1e-4), hull) == 1.0
        assert occupancy((0.5, 0.5, 1.0 + 1e-4), hull) == 0.0


# ---------------------------------------------------------------------------
# nearest distances and weights


class TestNearestDistances:
    @pytest.mark.parametrize("cell", [0.01, 0.06, 10.0])
    def test_exact_vs_brute_force(self, cell):
        rng = np.random.default_rng(40)
        ref = rng.random((400, 3))
        q = rng.random((200, 3)) * 1.5 - 0.25
        d = nearest_distances(q, ref, cell)
        brute = np.sqrt(((q[:, None, :] - ref[None, :, :]) ** 2).sum(2).min(1))
        np.testing.assert_allclose(d, brute, rtol=0, atol=1e-12)

    def test_zero_distance_on_exact_match(self):
        ref = np.array([[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]])
        d = nearest_distances(ref[:1], ref, 0.06)
        assert d[0] == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nearest_distances(np.zeros((1, 3)), np.empty((0, 3)), 0.06)


class TestImportanceWeights:
    def test_zero_distance_weight_one(self):
        assert importance_weights([0.0], 0.02)[0] == 1.0

    def test_one_sigma_weight(self):
        w = importance_weights([0.02], 0.02)[0]
        assert abs(w - np.exp(-0.5)) < 1e-15

    def test_floor_active_far_away(self):
        assert importance_weights([10.0], 0.02)[0] == 1e-6

    def test_monotone_above_floor(self):
        rng = np.random.default_rng(41)
        sigma = 0.02
        d = np.sort(rng.random(50) * 4 * sigma)
        w = importance_weights(d, sigma)
        assert np.all(np.diff(w) < 0)

    def test_large_sigma_flattens_probabilities(self):
        rng = np.random.default_rng(42)
        d = rng.random(500)
        w = importance_weights(d, 1e3)
        p = w / w.sum()
        assert p.max() - p.min() < 1e-6


class TestMultinomialDraw:
    def test_with_replacement_frequencies(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        idx = multinomial_draw(p, 100000, np.random.default_rng(43), replace=True)
        freq = np.bincount(idx, minlength=4) / 100000.0
        assert np.all(np.abs(freq - p) < 0.01)

    def test_with_replacement_chi_square(self):
        from scipy import stats
        rng = np.random.default_rng(44)
        w = rng.random(12) + 0.1
        p = w / w.sum()
        idx = multinomial_draw(p, 100000, np.random.default_rng(45), replace=True)
        counts = np.bincount(idx, minlength=12)
        _, pvalue = stats.chisquare(counts, 100000 * p)
        assert pvalue > 1e-4

    def test_without_replacement_distinct(self):
        p = np.full(50, 0.02)
        idx = multinomial_draw(p, 50, np.random.default_rng(46))
        assert sorted(idx) == list(range(50))

    def test_without_replacement_respects_weights(self):
        p = np.array([0.97, 0.0075, 0.0075, 0.0075, 0.0075])
        hits = sum(0 in multinomial_draw(p, 1, np.random.default_rng(s))
                   for s in range(300))
        assert hits > 270

    def test_overdraw_rejected(self):
        with pytest.raises(ValueError, match="without replacement"):
            multinomial_draw(np.array([0.5, 0.5]), 3, np.random.default_rng(0))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sum to 1"):
            multinomial_draw(np.array([0.5, 0.6]), 1, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# mcis_fill and the full pipeline


class TestMcisFill:
    def _survivors(self, hull, m, rng):
        return filter_occupancy(sample_candidates(hull, m, rng), hull, 0.6)

    def test_selected_count_and_probability_sum(self):
        rng = np.random.default_rng(50)
        hull = quickhull(CUBE)
        surv = self._survivors(hull, 2000, rng)
        res = mcis_fill(surv, CUBE, 0.02, 300, rng)
        assert res.points.shape == (300, 3)
        assert abs(res.candidates.probabilities.sum() - 1.0) < 1e-9
        assert np.all(res.candidates.weights >= 1e-6)

    def test_clamps_to_survivor_count(self):
        rng = np.random.default_rng(51)
        hull = quickhull(CUBE)
        surv = self._survivors(hull, 50, rng)
        res = mcis_fill(surv, CUBE, 0.02, 10000, rng)
        assert res.points.shape[0] == len(surv)

    def test_zero_survivors_warns_not_raises(self, caplog):
        empty = CandidateSet(np.empty((0, 3)))
        with caplog.at_level(logging.WARNING, logger="splatphys.fill"):
            res = mcis_fill(empty, CUBE, 0.02, 100, np.random.default_rng(0))
        assert res.points.shape == (0, 3)
        assert any("unfilled" in r.message for r in caplog.records)

    def test_near_surface_bias(self):
        # with a tight sigma, samples should hug the reference points
        rng = np.random.default_rng(52)
        hull = quickhull(CUBE)
        surv = self._survivors(hull, 5000, rng)
        res = mcis_fill(surv, CUBE, 0.1, 500, rng)
        d_sel = nearest_distances(res.points, CUBE, 0.3)
        d_all = res.candidates.distances
        assert d_sel.mean() < d_all.mean()


class TestFillPipeline:
    def test_hollow_cube_filled_inside_hull(self):
        shell = cube_shell((0.5, 0.5, 0.5), 0.3, 13)
        ps = PointSet(shell)
        params = FillParams(fill_density=0.2, candidates=3000)
        out, store = fill_pipeline(ps, params, seed=1)

        assert store.count == 1
        hull = quickhull(shell)
        expect = int(params.fill_density * hull.volume() / params.cell_size ** 3)
        filled = out.positions[out.is_filled]
        assert filled.shape[0] == expect > 0
        # exact half-space inclusion, strict interior
        dist = filled @ hull.normals.T - hull.offsets[None, :]
        assert dist.max() < 0
        occ = occupancy_batch(filled, hull)
        assert np.all(occ > 0.6)
        assert np.all(out.labels[out.is_filled] == 0)
        assert np.all(out.opacity[out.is_filled] == 0.0)

    def test_two_shells_fill_independently(self):
        a = cube_shell((0.25, 0.25, 0.25), 0.2, 9)
        b = cube_shell((0.75, 0.75, 0.75), 0.2, 9)
        ps = PointSet(np.concatenate([a, b]))
        out, store = fill_pipeline(ps, FillParams(fill_density=0.1,
                                                  candidates=1500), seed=2)
        assert store.count == 2
        hull_a, hull_b = quickhull(a), quickhull(b)
        for lab, own, other in ((0, hull_a, hull_b), (1, hull_b, hull_a)):
            pts = out.positions[out.is_filled & (out.labels == lab)]
            assert pts.shape[0] > 0
            assert np.all(pts @ own.normals.T - own.offsets[None, :] < 0)
            assert not np.any(np.all(
                pts @ other.normals.T - other.offsets[None, :] <= 0, axis=1))

    def test_fill_density_zero_is_identity(self):
        shell = cube_shell((0.5, 0.5, 0.5), 0.3, 11)
        ps = PointSet(shell)
        out, store = fill_pipeline(ps, FillParams(fill_density=0.0,
                                                  candidates=100), seed=3)
        assert len(out) == len(ps)
        np.testing.assert_array_equal(out.positions, ps.positions)
        assert not np.any(out.is_filled)
        assert store.count == 1

    def test_flat_sheet_skipped_with_warning(self, caplog):
        t = np.linspace(0.3, 0.7, 21)
        u, v = np.meshgrid(t, t, indexing="ij")
        sheet = np.stack([u.ravel(), v.ravel(), np.full(u.size, 0.1)], axis=1)
        shell = cube_shell((0.5, 0.5, 0.6), 0.25, 11)
        ps = PointSet(np.concatenate([sheet, shell]))
        with caplog.at_level(logging.WARNING, logger="splatphys.fill"):
            out, store = fill_pipeline(ps, FillParams(fill_density=0.1,
                                                      candidates=1500), seed=4)
        assert store.count == 2
        sheet_label = out.labels[0]
        shell_label = out.labels[-1 - (len(out) - len(ps))]
        assert sheet_label != shell_label
        assert not np.any(out.is_filled & (out.labels == sheet_label))
        assert np.any(out.is_filled & (out.labels == shell_label))
        assert any("unfilled" in r.message for r in caplog.records)

    def test_deterministic_given_seed(self):
        shell = cube_shell((0.5, 0.5, 0.5), 0.3, 11)
        ps = PointSet(shell)
        params = FillParams(fill_density=0.1, candidates=1000)
        out1, _ = fill_pipeline(ps, params, seed=7)
        out2, _ = fill_pipeline(ps, params, seed=7)
        np.testing.assert_array_equal(out1.positions, out2.positions)
        np.testing.assert_array_equal(out1.labels, out2.labels)

    def test_different_seed_differs(self):
        shell = cube_shell((0.5, 0.5, 0.5), 0.3, 11)
        ps = PointSet(shell)
        params = FillParams(fill_density=0.1, candidates=1000)
        out1, _ = fill_pipeline(ps, params, seed=7)
        out2, _ = fill_pipeline(ps, params, seed=8)
        assert out1.positions[out1.is_filled].shape == \
            out2.positions[out2.is_filled].shape
        assert not np.array_equal(out1.positions, out2.positions)

    def test_original_points_keep_positions(self):
        shell = cube_shell((0.5, 0.5, 0.5), 0.3, 11)
        ps = PointSet(shell)
        out, _ = fill_pipeline(ps, FillParams(fill_density=0.1,
                                              candidates=1000), seed=9)
        np.testing.assert_array_equal(out.positions[:len(ps)], ps.positions)
        assert not np.any(out.is_filled[:len(ps)])
