"""3D convex hulls (quickhull) and ray-cast occupancy queries.

The hull builder is a conflict-list quickhull over triangles. All face
planes use an epsilon of 1e-9 times the input bounding-box diagonal; points
within that band of a plane are treated as on it, which keeps coplanar
inputs from churning the horizon walk.

Occupancy is deliberately NOT a half-space test: interior classification
casts 6 axis-aligned rays and votes on crossing parity, returning the inside
fraction in [0, 1]. On clean geometry the answer is 0 or 1; rays grazing an
edge, vertex, or coplanar face are re-cast from a deterministically jittered
origin, and only if every retry grazes too does the fractional vote carry
the ambiguity. The exact half-space check stays available separately so
tests can cross-validate the two routes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointset import GeometryError

_PLANE_EPS_REL = 1e-9  # of the bbox diagonal
_BARY_EPS = 1e-9       # barycentric distance considered edge-grazing
_JITTERS = 1e-7 * np.array([
    [0.53766714, 0.31153145, 0.78330665],
    [-0.62323322, 0.70120818, 0.34592314],
    [0.41813887, -0.56372742, 0.71271847],
])


@dataclass(frozen=True)
class ConvexHull:
    """Watertight triangulated convex hull of a point set.

    faces are index triples into ``points``, wound so ``normals`` (unit
    length) point outward; the plane of face f is n.x = offset[f].
    """

    points: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    interior_point: np.ndarray
    plane_eps: float

    @property
    def aabb(self):
        v = self.points[self.vertices]
        return v.min(axis=0), v.max(axis=0)

    def volume(self) -> float:
        a = self.points[self.faces[:, 0]] - self.interior_point
        b = self.points[self.faces[:, 1]] - self.interior_point
        c = self.points[self.faces[:, 2]] - self.interior_point
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def contains(self, q, tol: float = 0.0) -> bool:
        """Exact half-space inclusion: inside every face plane (tolerance out)."""
        q = np.asarray(q, dtype=np.float64)
        return bool(np.all(self.normals @ q <= self.offsets + tol))

    def plane_distances(self, q) -> np.ndarray:
        """Signed distance of q to every face plane (positive = outside)."""
        return self.normals @ np.asarray(q, dtype=np.float64) - self.offsets


def _face_normal(pts, a, b, c):
    n = np.cross(pts[b] - pts[a], pts[c] - pts[a])
    norm = np.linalg.norm(n)
    return n, norm


def quickhull(points) -> ConvexHull:
    """Convex hull of >= 4 non-coplanar points.

    Raises GeometryError for fewer than 4 points or (near-)coplanar input;
    callers treat that as "this instance has no interior".
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    n = pts.shape[0]
    if n < 4:
        raise GeometryError(f"need at least 4 points for a hull, got {n}")
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    if diag == 0.0:
        raise GeometryError("degenerate input: all points coincide")
    eps = _PLANE_EPS_REL * diag

    # initial simplex: farthest AABB-extreme pair, then max line / plane dist
    ext = np.concatenate([pts.argmin(axis=0), pts.argmax(axis=0)])
    d2 = ((pts[ext][:, None, :] - pts[ext][None, :, :]) ** 2).sum(-1)
    i0, i1 = np.unravel_index(np.argmax(d2), d2.shape)
    p0, p1 = int(ext[i0]), int(ext[i1])
    if p0 == p1:
        raise GeometryError("degenerate input: all points coincide")
    axis = pts[p1] - pts[p0]
    rel = pts - pts[p0]
    cross = np.cross(rel, axis)
    p2 = int(np.argmax((cross ** 2).sum(axis=1)))
    nrm, nn = _face_normal(pts, p0, p1, p2)
    if nn <= eps * np.linalg.norm(axis):
        raise GeometryError("degenerate input: points are collinear")
    dist = rel @ (nrm / nn)
    p3 = int(np.argmax(np.abs(dist)))
    if abs(dist[p3]) <= eps:
        raise GeometryError("degenerate input: points are coplanar")

    interior = pts[[p0, p1, p2, p3]].mean(axis=0)

    faces = []      # list of (a, b, c), outward wound
    normals = []    # unit normals
    offsets = []
    conflicts = []  # per-face index arrays of strictly-outside points
    alive = []
    edge_face = {}  # directed edge -> owning face, kept incrementally
    work = []       # faces that were created with a nonempty conflict list

    def add_face(a, b, c, cand):
        nf, nn = _face_normal(pts, a, b, c)
        if nn == 0.0:
            raise GeometryError("hull construction hit a zero-area face")
        nf = nf / nn
        off = float(nf @ pts[a])
        if nf @ interior > off:  # wound inward, flip
            b, c = c, b
            nf = -nf
            off = -off
        fi = len(faces)
        faces.append((a, b, c))
        normals.append(nf)
        offsets.append(off)
        alive.append(True)
        for e in ((a, b), (b, c), (c, a)):
            edge_face[e] = fi
        outside = np.empty(0, dtype=np.int64)
        if cand is not None and len(cand):
            d = pts[cand] @ nf - off
            outside = cand[d > eps]
            if len(outside):
                outside = outside[np.argsort(pts[outside] @ nf)]
                work.append(fi)
        conflicts.append(outside)
        return fi

    all_idx = np.arange(n)
    seed = (p0, p1, p2, p3)
    cand0 = all_idx[~np.isin(all_idx, seed)]
    for tri in ((p0, p1, p2), (p0, p1, p3), (p0, p2, p3), (p1, p2, p3)):
        add_face(*tri, cand0)

    while work:
        far_face = work.pop()
        if not alive[far_face] or not len(conflicts[far_face]):
            continue
        apex = int(conflicts[far_face][-1])  # farthest (sorted ascending)

        # grow the visible region from far_face by adjacency
        visible = {far_face}
        stack = [far_face]
        while stack:
            fi = stack.pop()
            a, b, c = faces[fi]
            for e in ((b, a), (c, b), (a, c)):  # neighbors own reversed edges
                nb = edge_face.get(e)
                if nb is None or nb in visible or not alive[nb]:
                    continue
                if pts[apex] @ normals[nb] - offsets[nb] > eps:
                    visible.add(nb)
                    stack.append(nb)

        horizon = []  # directed edges (a, b) wound as in the visible faces
        orphan = []
        for fi in visible:
            a, b, c = faces[fi]
            for e in ((a, b), (b, c), (c, a)):
                if edge_face.get((e[1], e[0])) not in visible:
                    horizon.append(e)
            orphan.extend(int(x) for x in conflicts[fi] if x != apex)
        for fi in visible:
            alive[fi] = False
            conflicts[fi] = np.empty(0, dtype=np.int64)
            a, b, c = faces[fi]
            for e in ((a, b), (b, c), (c, a)):
                del edge_face[e]

        orphan = np.unique(np.array(orphan, dtype=np.int64))
        for a, b in horizon:
            add_face(a, b, apex, orphan)

    live = [i for i in range(len(faces)) if alive[i]]
    F = np.array([faces[i] for i in live], dtype=np.int64)
    N = np.array([normals[i] for i in live])
    O = np.array([offsets[i] for i in live])
    verts = np.unique(F)

    # watertightness: every directed edge exactly once
    edges = set()
    for a, b, c in F:
        for e in ((a, b), (b, c), (c, a)):
            if e in edges:
                raise GeometryError("hull construction produced a non-manifold edge")
            edges.add(e)
    for a, b in edges:
        if (b, a) not in edges:
            raise GeometryError("hull is not watertight")

    return ConvexHull(pts, verts, F, N, O, interior, eps)


# ---------------------------------------------------------------------------
# Ray-cast occupancy


def _cast_axis_ray(q, hull, axis, sign):
    """Crossing parity of one axis ray; returns (parity, degenerate)."""
    pts = hull.points
    a = pts[hull.faces[:, 0]]
    b = pts[hull.faces[:, 1]]
    c = pts[hull.faces[:, 2]]
    u_ax, v_ax = ((1, 2), (0, 2), (0, 1))[axis]

    e1 = b - a
    e2 = c - a
    det = e1[:, u_ax] * e2[:, v_ax] - e1[:, v_ax] * e2[:, u_ax]
    rel_u = q[u_ax] - a[:, u_ax]
    rel_v = q[v_ax] - a[:, v_ax]

    scale = np.abs(det)
    parallel = scale < 1e-14
    degenerate = False
    crossings = 0
    for f in range(a.shape[0]):
        if parallel[f]:
            # ray parallel to the face plane: degenerate only if the origin
            # sits essentially on that plane
            if abs(hull.normals[f] @ q - hull.offsets[f]) < hull.plane_eps:
                degenerate = True
            continue
        inv = 1.0 / det[f]
        u = (rel_u[f] * e2[f, v_ax] - rel_v[f] * e2[f, u_ax]) * inv
        v = (e1[f, u_ax] * rel_v[f] - e1[f, v_ax] * rel_u[f]) * inv
        w = 1.0 - u - v
        margin = min(u, v, w)
        if margin < -_BARY_EPS:
            continue
        if margin < _BARY_EPS:
            degenerate = True
            continue
        t = (a[f, axis] + u * e1[f, axis] + v * e2[f, axis] - q[axis]) * sign
        if abs(t) < hull.plane_eps:
            degenerate = True
        elif t > 0.0:
            crossings += 1
    return crossings & 1, degenerate


def _ray_vote(q, hull, axis, sign):
    """Parity vote for one ray with up to 3 jittered recasts."""
    votes = []
    for attempt in range(4):
        origin = q if attempt == 0 else q + _JITTERS[attempt - 1]
        parity, bad = _cast_axis_ray(origin, hull, axis, sign)
        if not bad:
            return parity
        votes.append(parity)
    return 1 if sum(votes) * 2 > len(votes) else 0


def occupancy(q, hull: ConvexHull) -> float:
    """Inside fraction over 6 axis-aligned rays cast from q."""
    q = np.asarray(q, dtype=np.float64)
    votes = 0
    for axis in range(3):
        for sign in (1.0, -1.0):
            votes += _ray_vote(q, hull, axis, sign)
    return votes / 6.0


def occupancy_batch(Q, hull: ConvexHull, chunk: int = 2048) -> np.ndarray:
    """Vectorized occupancy for many query points.

    Computes the 2D barycentrics of every (query, face) pair once per axis
    (the +/- rays share them) and counts crossings above and below. Queries
    whose rays graze an edge, vertex, or coplanar face fall back to the
    scalar jittered path.
    """
    Q = np.asarray(Q, dtype=np.float64)
    m = Q.shape[0]
    votes = np.zeros(m, dtype=np.int64)
    needs_scalar = np.zeros(m, dtype=bool)

    pts = hull.points
    a = pts[hull.faces[:, 0]]
    e1 = pts[hull.faces[:, 1]] - a
    e2 = pts[hull.faces[:, 2]] - a

    for axis in range(3):
        u_ax, v_ax = ((1, 2), (0, 2), (0, 1))[axis]
        det = e1[:, u_ax] * e2[:, v_ax] - e1[:, v_ax] * e2[:, u_ax]
        parallel = np.abs(det) < 1e-14
        inv = np.where(parallel, 0.0, 1.0 / np.where(parallel, 1.0, det))
        for lo in range(0, m, chunk):
            qs = Q[lo:lo + chunk]
            ru = qs[:, u_ax, None] - a[None, :, u_ax]
            rv = qs[:, v_ax, None] - a[None, :, v_ax]
            u = (ru * e2[None, :, v_ax] - rv * e2[None, :, u_ax]) * inv
            v = (e1[None, :, u_ax] * rv - e1[None, :, v_ax] * ru) * inv
            w = 1.0 - u - v
            margin = np.minimum(np.minimum(u, v), w)
            hit = margin > _BARY_EPS
            grazing = (margin >= -_BARY_EPS) & ~hit & ~parallel[None, :]
            t = (a[None, :, axis] + u * e1[None, :, axis]
                 + v * e2[None, :, axis]) - qs[:, axis, None]
            on_plane = hit & (np.abs(t) < hull.plane_eps)
            # parallel faces are degenerate only for origins on their plane
            pd = np.abs(qs @ hull.normals.T - hull.offsets[None, :])
            par_bad = parallel[None, :] & (pd < hull.plane_eps)
            bad = (grazing | on_plane | par_bad).any(axis=1)
            needs_scalar[lo:lo + chunk] |= bad
            up = (hit & (t > 0)).sum(axis=1) & 1
            dn = (hit & (t < 0)).sum(axis=1) & 1
            votes[lo:lo + chunk] += up + dn

    occ = votes / 6.0
    for i in np.nonzero(needs_scalar)[0]:
        occ[i] = occupancy(Q[i], hull)
    return occ
