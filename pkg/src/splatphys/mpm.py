"""MLS-MPM simulation engine.

Cycle per substep, all on a uniform collocated grid over the unit cube:

  p2g          scatter mass and momentum to grid nodes through quadratic
               B-spline weights; the per-particle stress force is fused into
               the affine term with the -(4/dx^2) dt V0 tau scaling
  grid finish  momentum -> velocity on active nodes, gravity increment,
               boundary bands (sticky zeroes the node velocity, slip zeroes
               the face-normal component)
  g2p          gather velocity and its affine moment back, advect, update
               F <- (I + dt C) F, then apply the plastic return map

The kernels are serial nopython routines: single-threaded execution is the
deterministic mode and the fast mode at once, so results are bit-identical
across runs by construction. Stress formulas and return maps mirror the
constitutive module exactly (same branch structure); symmetric 3x3
eigensolves use a cyclic Jacobi sweep instead of LAPACK, which changes
nothing beyond last-bit rounding.

Inverted elements (det F <= 0) abort the run with the particle, frame, and
substep attached -- never silent NaNs. Particles advected past the boundary
band are clamped back with the outward velocity component removed, and the
engine logs how many clamps each frame needed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .constitutive import (
    InvertedElementError,
    MaterialParams,
    drucker_prager_alpha,
)
from .pointset import PointSet

log = logging.getLogger(__name__)

ELAST_ID = {"sigma": 0, "corotated": 1, "stvk": 2, "fluid": 3, "volume": 4,
            "neohookean": 5}
PLAST_ID = {"identity": 0, "sigma": 1, "vonmises": 2, "druckerprager": 3,
            "fluid": 4}
BOUNDARY_KINDS = ("slip", "sticky")

# speed a particle can pick up falling across the unit domain; folded into
# the CFL estimate so a run that accelerates under gravity stays stable
_FALL_HEADROOM_DOMAIN = 1.0


class MaterialCoverageError(ValueError):
    """A particle label has no material assigned."""


class CFLError(ValueError):
    """A pinned dt or substep count violates the stability guard."""


class DomainError(ValueError):
    """A particle sits outside the valid interpolation band."""

    def __init__(self, particle, position):
        self.particle = particle
        super().__init__(
            f"particle {particle} at {np.asarray(position)} is outside the "
            "valid grid band")


@dataclass
class SimConfig:
    """Grid, stepping, and boundary setup.

    dt and substeps are normally derived from the CFL guard
    dt <= cfl * dx / v_est, where v_est adds the fastest material wave speed,
    the largest initial particle speed, and the speed gained falling across
    the domain. The wave speed is sqrt(stiff / rho) with stiff = lam + 2 mu
    for shear-carrying models, lam + 2 mu / 3 for the volume model, and lam
    for the pressure-only fluid model. Either dt or substeps may be pinned
    explicitly; a pinned dt that violates the guard is rejected when the
    engine starts.

    boundaries order: (x_min, x_max, y_min, y_max, z_min, z_max).
    """

    grid_n: int = 64
    frames: int = 150
    fps: float = 25.0
    gravity: tuple = (0.0, 0.0, -9.8)
    cfl: float = 0.5
    margin: int = 3
    boundaries: tuple = ("slip", "slip", "slip", "slip", "sticky", "slip")
    dt: float | None = None
    substeps: int | None = None

    def __post_init__(self):
        if self.grid_n < 8:
            raise ValueError("grid_n must be at least 8")
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if not 0.0 < self.cfl <= 1.0:
            raise ValueError("cfl must be in (0, 1]")
        if not 1 <= self.margin < self.grid_n // 2 - 1:
            raise ValueError("margin must be in [1, grid_n/2 - 1) cells")
        if len(self.boundaries) != 6 or any(
                b not in BOUNDARY_KINDS for b in self.boundaries):
            raise ValueError(
                "boundaries must be 6 faces, each 'sticky' or 'slip'")
        if len(self.gravity) != 3:
            raise ValueError("gravity must be a 3-vector")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps is not None and self.substeps < 1:
            raise ValueError("substeps must be at least 1")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid_n

    @property
    def frame_dt(self) -> float:
        return 1.0 / self.fps


@dataclass
class ParticleState:
    """Index-aligned particle arrays: the complete material state."""

    x: np.ndarray       # (N, 3) positions in unit-cube coordinates
    v: np.ndarray       # (N, 3) velocities
    C: np.ndarray       # (N, 3, 3) affine velocity tensors
    F: np.ndarray       # (N, 3, 3) deformation gradients
    m: np.ndarray       # (N,) masses
    V0: np.ndarray      # (N,) reference volumes
    label: np.ndarray   # (N,) instance ids

    def __post_init__(self):
        n = self.x.shape[0]
        shapes = {"x": (n, 3), "v": (n, 3), "C": (n, 3, 3), "F": (n, 3, 3),
                  "m": (n,), "V0": (n,), "label": (n,)}
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
        if n and (self.m.min() <= 0 or self.V0.min() <= 0):
            raise ValueError("particle masses and volumes must be positive")

    def __len__(self):
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return ParticleState(self.x.copy(), self.v.copy(), self.C.copy(),
                             self.F.copy(), self.m.copy(), self.V0.copy(),
                             self.label.copy())

    @classmethod
    def from_pointset(cls, ps: PointSet, materials: dict, config: SimConfig,
                      velocities=None) -> "ParticleState":
        """Seed simulation particles from a (filled) point set.

        Reference volume is (dx/2)^3 per particle and mass is that volume
        times the label's density. Labels must all be covered by materials.
        """
        if ps.labels is None:
            raise ValueError("point set has no labels; run the fill stage "
                             "or attach labels first")
        labels = ps.labels.astype(np.int64)
        missing = sorted(set(labels.tolist()) - set(materials))
        if missing:
            raise MaterialCoverageError(
            f"materials missing for labels {missing}")
        n = len(ps)
        x = ps.positions.copy()
        lo = config.margin * config.dx
        hi = 1.0 - config.margin * config.dx
        bad = np.nonzero(np.any((x < lo) | (x > hi), axis=1))[0]
        if bad.size:
            raise DomainError(int(bad[0]), x[bad[0]])
        if velocities is None:
            v = np.zeros((n, 3))
        else:
            v = np.asarray(velocities, dtype=np.float64)
            if v.shape == (3,):
                v = np.tile(v, (n, 1))
            v = v.copy()
        V0 = np.full(n, (config.dx / 2.0) ** 3)
        density = np.array([materials[int(l)].density for l in labels])
        return cls(x=x, v=v, C=np.zeros((n, 3, 3)), F=np.tile(np.eye(3), (n, 1, 1)),
                   m=density * V0, V0=V0, label=labels)


@dataclass(frozen=True)
class FrameSnapshot:
    """Immutable deep copy of {x, v, C, F, label} captured at frame entry."""

    frame: int
    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    label: np.ndarray

    @classmethod
    def capture(cls, state: ParticleState, frame: int) -> "FrameSnapshot":
        arrays = {k: getattr(state, k).copy() for k in ("x", "v", "C", "F")}
        arrays["label"] = state.label.copy()
        for a in arrays.values():
            a.setflags(write=False)
        return cls(frame=frame, **arrays)

    @property
    def nbytes(self) -> int:
        return (self.x.nbytes + self.v.nbytes + self.C.nbytes
                + self.F.nbytes + self.label.nbytes)


@dataclass
class Grid:
    """Collocated node arrays; (n+1)^3 nodes at spacing dx = 1/n."""

    n: int
    mass: np.ndarray
    velocity: np.ndarray

    @classmethod
    def allocate(cls, n: int) -> "Grid":
        return cls(n, np.zeros((n + 1,) * 3),
                   np.zeros((n + 1,) * 3 + (3,)))

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    def zero(self):
        self.mass[:] = 0.0
        self.velocity[:] = 0.0


def kernel_weights(x_p, grid, particle=None):
    """Quadratic B-spline weights over the particle's 3x3x3 node block.

    Returns (base, w): base is the lowest node index per axis and w[axis]
    holds the three per-axis weights; the tensor product over axes gives the
    27 node weights, which sum to 1.
    """
    n = grid.n if isinstance(grid, Grid) else int(grid)
    dx = 1.0 / n
    x_p = np.asarray(x_p, dtype=np.float64)
    base = np.floor(x_p / dx - 0.5).astype(np.int64)
    if np.any(base < 0) or np.any(base > n - 2):
        raise DomainError(particle if particle is not None else "?", x_p)
    fx = x_p / dx - base
    w = np.stack([0.5 * (1.5 - fx) ** 2,
                  0.75 - (fx - 1.0) ** 2,
                  0.5 * (fx - 0.5) ** 2], axis=1)
    return base, w


# ---------------------------------------------------------------------------
# nopython kernels


@njit(cache=True)
def _jacobi3(A, Q):
    """Eigendecomposition of symmetric 3x3 A: A = Q diag(w) Q^T.

    Cyclic Jacobi rotations; A is destroyed (diagonal becomes eigenvalues),
    Q columns are the eigenvectors. Returns the three eigenvalues.
    """
    for r in range(3):
        for c in range(3):
            Q[r, c] = 1.0 if r == c else 0.0
    for _ in range(30):
        off = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
        scale = A[0, 0] ** 2 + A[1, 1] ** 2 + A[2, 2] ** 2 + 1e-300
        if off <= 1e-60 * scale:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app = A[p, p]
                aqq = A[q, q]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for r in range(3):
                    if r != p and r != q:
                        arp = A[r, p]
                        arq = A[r, q]
                        A[r, p] = c * arp - s * arq
                        A[p, r] = A[r, p]
                        A[r, q] = s * arp + c * arq
                        A[q, r] = A[r, q]
                for r in range(3):
                    qrp = Q[r, p]
                    qrq = Q[r, q]
                    Q[r, p] = c * qrp - s * qrq
                    Q[r, q] = s * qrp + c * qrq
    return A[0, 0], A[1, 1], A[2, 2]


@njit(cache=True)
def _det3(F):
    return (F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]))


@njit(cache=True)
def _stress(F, mu, lam, eid, tau, A, Q):
    """Kirchhoff-type stress for elasticity model eid into tau.

    Returns det(F); the caller aborts on det <= 0 (checked here so no model
    ever touches a log/sqrt of a negative or reconstructs from a reflected
    frame).
    """
    J = _det3(F)
    if not (J > 0.0) or not math.isfinite(J):
        return J

    if eid == 0:  # log-strain principal stress
        for r in range(3):
            for c in range(3):
                A[r, c] = (F[r, 0] * F[c, 0] + F[r, 1] * F[c, 1]
                           + F[r, 2] * F[c, 2])
        w0, w1, w2 = _jacobi3(A, Q)
        e0 = 0.5 * math.log(max(w0, 1e-300))
        e1 = 0.5 * math.log(max(w1, 1e-300))
        e2 = 0.5 * math.log(max(w2, 1e-300))
        tr = e0 + e1 + e2
        p0 = 2.0 * mu * e0 + lam * tr
        p1 = 2.0 * mu * e1 + lam * tr
        p2 = 2.0 * mu * e2 + lam * tr
        for r in range(3):
            for c in range(3):
                tau[r, c] = (p0 * Q[r, 0] * Q[c, 0] + p1 * Q[r, 1] * Q[c, 1]
                             + p2 * Q[r, 2] * Q[c, 2])
        return J

    if eid == 1:  # rotation-removed linear elasticity
        for r in range(3):
            for c in range(3):
                A[r, c] = (F[r, 0] * F[c, 0] + F[r, 1] * F[c, 1]
                           + F[r, 2] * F[c, 2])
        w0, w1, w2 = _jacobi3(A, Q)
        k0 = 1.0 / math.sqrt(max(w0, 1e-300))
        k1 = 1.0 / math.sqrt(max(w1, 1e-300))
        k2 = 1.0 / math.sqrt(max(w2, 1e-300))
        vol = lam * J * (J - 1.0)
        for r in range(3):
            for c in range(3):
                # M = (F F^T)^(-1/2), row r col c
                A[r, c] = (k0 * Q[r, 0] * Q[c, 0] + k1 * Q[r, 1] * Q[c, 1]
                           + k2 * Q[r, 2] * Q[c, 2])
        for r in range(3):
            for c in range(3):
                # R = M F; D = F - R
                rc = (A[r, 0] * F[0, c] + A[r, 1] * F[1, c]
                      + A[r, 2] * F[2, c])
                Q[r, c] = F[r, c] - rc
        for r in range(3):
            for c in range(3):
                t = 2.0 * mu * (Q[r, 0] * F[c, 0] + Q[r, 1] * F[c, 1]
                                + Q[r, 2] * F[c, 2])
                if r == c:
                    t += vol
                tau[r, c] = t
        return J

    if eid == 2:  # quadratic Green-strain model
        vol = lam * J * (J - 1.0)
        for r in range(3):
            for c in range(3):
                g = (F[0, r] * F[0, c] + F[1, r] * F[1, c]
                     + F[2, r] * F[2, c])
                if r == c:
                    g -= 1.0
                A[r, c] = 0.5 * g
        for r in range(3):
            for c in range(3):
                t = 2.0 * mu * (F[r, 0] * A[0, c] + F[r, 1] * A[1, c]
                                + F[r, 2] * A[2, c])
                if r == c:
                    t += vol
                tau[r, c] = t
        return J

    for r in range(3):
        for c in range(3):
            tau[r, c] = 0.0
    if eid == 3:  # pressure-only fluid
        p = lam * J * (J - 1.0)
        tau[0, 0] = p
        tau[1, 1] = p
        tau[2, 2] = p
    elif eid == 4:  # volume-change penalty
        p = (2.0 * mu / 3.0 + lam) * (J - 1.0 / J)
        tau[0, 0] = p
        tau[1, 1] = p
        tau[2, 2] = p
    else:  # eid == 5, neo-hookean
        lg = lam * math.log(J)
        for r in range(3):
            for c in range(3):
                t = mu * (F[r, 0] * F[c, 0] + F[r, 1] * F[c, 1]
                          + F[r, 2] * F[c, 2])
                if r == c:
                    t += lg - mu
                tau[r, c] = t
    return J


@njit(cache=True)
def _plastic(F, mu, lam, pid, ys, alpha, A, Q):
    """Plastic return map pid applied to F in place. Returns det(F) seen."""
    J = _det3(F)
    if not (J > 0.0) or not math.isfinite(J):
        return J
    if pid == 0:  # no plastic flow
        return J

    if pid == 4:  # fluid: keep volume only
        c = J ** (1.0 / 3.0)
        for r in range(3):
            for k in range(3):
                F[r, k] = c if r == k else 0.0
        return J
    if pid == 1:  # volume clamp
        Jc = min(max(J, 0.05), 1.2)
        c = Jc ** (1.0 / 3.0)
        for r in range(3):
            for k in range(3):
                F[r, k] = c if r == k else 0.0
        return J

    # log-strain maps need the principal frame
    for r in range(3):
        for c in range(3):
            A[r, c] = (F[r, 0] * F[c, 0] + F[r, 1] * F[c, 1]
                       + F[r, 2] * F[c, 2])
    w0, w1, w2 = _jacobi3(A, Q)
    e0 = 0.5 * math.log(max(w0, 1e-300))
    e1 = 0.5 * math.log(max(w1, 1e-300))
    e2 = 0.5 * math.log(max(w2, 1e-300))
    s0 = math.sqrt(max(w0, 1e-300))
    s1 = math.sqrt(max(w1, 1e-300))
    s2 = math.sqrt(max(w2, 1e-300))

    if pid == 2:  # deviatoric radial return
        mean = (e0 + e1 + e2) / 3.0
        d0 = e0 - mean
        d1 = e1 - mean
        d2 = e2 - mean
        nrm = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        dg = nrm - ys / (2.0 * mu)
        if dg <= 0.0 or nrm == 0.0:
            return J
        f = dg / nrm
        e0 -= f * d0
        e1 -= f * d1
        e2 -= f * d2
    else:  # pid == 3, cone return
        tr = e0 + e1 + e2
        if tr > 0.0:
            e0 = 0.0
            e1 = 0.0
            e2 = 0.0
        else:
            d0 = e0 - tr / 3.0
            d1 = e1 - tr / 3.0
            d2 = e2 - tr / 3.0
            nrm = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            dg = nrm + alpha * (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr
            if dg <= 0.0 or nrm == 0.0:
                return J
            f = dg / nrm
            e0 -= f * d0
            e1 -= f * d1
            e2 -= f * d2

    # F' = U diag(exp(e)/sigma) U^T F  (same as U diag(exp e) V^T)
    k0 = math.exp(e0) / s0
    k1 = math.exp(e1) / s1
    k2 = math.exp(e2) / s2
    for r in range(3):
        for c in range(3):
            A[r, c] = (k0 * Q[r, 0] * Q[c, 0] + k1 * Q[r, 1] * Q[c, 1]
                       + k2 * Q[r, 2] * Q[c, 2])
    for c in range(3):
        f0 = F[0, c]
        f1 = F[1, c]
        f2 = F[2, c]
        Q[0, c] = A[0, 0] * f0 + A[0, 1] * f1 + A[0, 2] * f2
        Q[1, c] = A[1, 0] * f0 + A[1, 1] * f1 + A[1, 2] * f2
        Q[2, c] = A[2, 0] * f0 + A[2, 1] * f1 + A[2, 2] * f2
    for r in range(3):
        for c in range(3):
            F[r, c] = Q[r, c]
    return J


@njit(cache=True)
def _p2g_kernel(x, v, C, F, m, V0, mat, mu, lam, eid, stress_on,
                gm, gv, n, dx, dt, err, errdet):
    inv_dx = 1.0 / dx
    fused = 4.0 * inv_dx * inv_dx * dt
    A = np.empty((3, 3))
    Q = np.empty((3, 3))
    tau = np.empty((3, 3))
    for p in range(x.shape[0]):
        px = x[p, 0]
        py = x[p, 1]
        pz = x[p, 2]
        bx = int(math.floor(px * inv_dx - 0.5))
        by = int(math.floor(py * inv_dx - 0.5))
        bz = int(math.floor(pz * inv_dx - 0.5))
        if (bx < 0 or by < 0 or bz < 0 or bx > n - 2 or by > n - 2
                or bz > n - 2):
            err[0] = 2
            err[1] = p
            return
        fx = px * inv_dx - bx
        fy = py * inv_dx - by
        fz = pz * inv_dx - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2

        r = mat[p]
        if stress_on == 1:
            J = _stress(F[p], mu[r], lam[r], eid[r], tau, A, Q)
            if not (J > 0.0) or not math.isfinite(J):
                err[0] = 1
                err[1] = p
                errdet[0] = J
                return
        else:
            for a in range(3):
                for b in range(3):
                    tau[a, b] = 0.0

        mp = m[p]
        sc = fused * V0[p]
        q00 = mp * C[p, 0, 0] - sc * tau[0, 0]
        q01 = mp * C[p, 0, 1] - sc * tau[0, 1]
        q02 = mp * C[p, 0, 2] - sc * tau[0, 2]
        q10 = mp * C[p, 1, 0] - sc * tau[1, 0]
        q11 = mp * C[p, 1, 1] - sc * tau[1, 1]
        q12 = mp * C[p, 1, 2] - sc * tau[1, 2]
        q20 = mp * C[p, 2, 0] - sc * tau[2, 0]
        q21 = mp * C[p, 2, 1] - sc * tau[2, 1]
        q22 = mp * C[p, 2, 2] - sc * tau[2, 2]
        mv0 = mp * v[p, 0]
        mv1 = mp * v[p, 1]
        mv2 = mp * v[p, 2]

        for i in range(3):
            wi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
            d0 = (bx + i) * dx - px
            for j in range(3):
                wij = wi * (wy0 if j == 0 else (wy1 if j == 1 else wy2))
                d1 = (by + j) * dx - py
                for k in range(3):
                    w = wij * (wz0 if k == 0 else (wz1 if k == 1 else wz2))
                    d2 = (bz + k) * dx - pz
                    ni = bx + i
                    nj = by + j
                    nk = bz + k
                    gm[ni, nj, nk] += w * mp
                    gv[ni, nj, nk, 0] += w * (mv0 + q00 * d0 + q01 * d1 + q02 * d2)
                    gv[ni, nj, nk, 1] += w * (mv1 + q10 * d0 + q11 * d1 + q12 * d2)
                    gv[ni, nj, nk, 2] += w * (mv2 + q20 * d0 + q21 * d1 + q22 * d2)


@njit(cache=True)
def _grid_finish_kernel(gm, gv, l0, h0, l1, h1, l2, h2, dt, g0, g1, g2,
                        n, margin, bc):
    for i in range(l0, h0 + 1):
        for j in range(l1, h1 + 1):
            for k in range(l2, h2 + 1):
                mass = gm[i, j, k]
                if mass <= 0.0:
                    continue
                inv = 1.0 / mass
                vx = gv[i, j, k, 0] * inv + g0 * dt
                vy = gv[i, j, k, 1] * inv + g1 * dt
                vz = gv[i, j, k, 2] * inv + g2 * dt
                sticky = False
                if i < margin:
                    if bc[0] == 1:
                        sticky = True
                    else:
                        vx = 0.0
                elif i > n - margin:
                    if bc[1] == 1:
                        sticky = True
                    else:
                        vx = 0.0
                if j < margin:
                    if bc[2] == 1:
                        sticky = True
                    else:
                        vy = 0.0
                elif j > n - margin:
                    if bc[3] == 1:
                        sticky = True
                    else:
                        vy = 0.0
                if k < margin:
                    if bc[4] == 1:
                        sticky = True
                    else:
                        vz = 0.0
                elif k > n - margin:
                    if bc[5] == 1:
                        sticky = True
                    else:
                        vz = 0.0
                if sticky:
                    vx = 0.0
                    vy = 0.0
                    vz = 0.0
                gv[i, j, k, 0] = vx
                gv[i, j, k, 1] = vy
                gv[i, j, k, 2] = vz


@njit(cache=True)
def _g2p_kernel(x, v, C, F, mat, mu, lam, pid, ys, alpha, gv,
                n, dx, dt, margin, err, errdet, nclamp):
    inv_dx = 1.0 / dx
    four_inv_dx2 = 4.0 * inv_dx * inv_dx
    lo = margin * dx
    hi = 1.0 - margin * dx
    A = np.empty((3, 3))
    Q = np.empty((3, 3))
    for p in range(x.shape[0]):
        px = x[p, 0]
        py = x[p, 1]
        pz = x[p, 2]
        bx = int(math.floor(px * inv_dx - 0.5))
        by = int(math.floor(py * inv_dx - 0.5))
        bz = int(math.floor(pz * inv_dx - 0.5))
        fx = px * inv_dx - bx
        fy = py * inv_dx - by
        fz = pz * inv_dx - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2

        nvx = 0.0
        nvy = 0.0
        nvz = 0.0
        b00 = 0.0
        b01 = 0.0
        b02 = 0.0
        b10 = 0.0
        b11 = 0.0
        b12 = 0.0
        b20 = 0.0
        b21 = 0.0
        b22 = 0.0
        for i in range(3):
            wi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
            d0 = (bx + i) * dx - px
            for j in range(3):
                wij = wi * (wy0 if j == 0 else (wy1 if j == 1 else wy2))
                d1 = (by + j) * dx - py
                for k in range(3):
                    w = wij * (wz0 if k == 0 else (wz1 if k == 1 else wz2))
                    d2 = (bz + k) * dx - pz
                    gx = gv[bx + i, by + j, bz + k, 0]
                    gy = gv[bx + i, by + j, bz + k, 1]
                    gz = gv[bx + i, by + j, bz + k, 2]
                    nvx += w * gx
                    nvy += w * gy
                    nvz += w * gz
                    b00 += w * gx * d0
                    b01 += w * gx * d1
                    b02 += w * gx * d2
                    b10 += w * gy * d0
                    b11 += w * gy * d1
                    b12 += w * gy * d2
                    b20 += w * gz * d0
                    b21 += w * gz * d1
                    b22 += w * gz * d2

        v[p, 0] = nvx
        v[p, 1] = nvy
        v[p, 2] = nvz
        c00 = four_inv_dx2 * b00
        c01 = four_inv_dx2 * b01
        c02 = four_inv_dx2 * b02
        c10 = four_inv_dx2 * b10
        c11 = four_inv_dx2 * b11
        c12 = four_inv_dx2 * b12
        c20 = four_inv_dx2 * b20
        c21 = four_inv_dx2 * b21
        c22 = four_inv_dx2 * b22
        C[p, 0, 0] = c00
        C[p, 0, 1] = c01
        C[p, 0, 2] = c02
        C[p, 1, 0] = c10
        C[p, 1, 1] = c11
        C[p, 1, 2] = c12
        C[p, 2, 0] = c20
        C[p, 2, 1] = c21
        C[p, 2, 2] = c22

        px += dt * nvx
        py += dt * nvy
        pz += dt * nvz
        clamped = False
        if px < lo:
            px = lo
            clamped = True
            if v[p, 0] < 0.0:
                v[p, 0] = 0.0
        elif px > hi:
            px = hi
            clamped = True
            if v[p, 0] > 0.0:
                v[p, 0] = 0.0
        if py < lo:
            py = lo
            clamped = True
            if v[p, 1] < 0.0:
                v[p, 1] = 0.0
        elif py > hi:
            py = hi
            clamped = True
            if v[p, 1] > 0.0:
                v[p, 1] = 0.0
        if pz < lo:
            pz = lo
            clamped = True
            if v[p, 2] < 0.0:
                v[p, 2] = 0.0
        elif pz > hi:
            pz = hi
            clamped = True
            if v[p, 2] > 0.0:
                v[p, 2] = 0.0
        if clamped:
            nclamp[0] += 1
        x[p, 0] = px
        x[p, 1] = py
        x[p, 2] = pz

        # F <- (I + dt C) F
        f00 = F[p, 0, 0]
        f01 = F[p, 0, 1]
        f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]
        f11 = F[p, 1, 1]
        f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]
        f21 = F[p, 2, 1]
        f22 = F[p, 2, 2]
        a00 = 1.0 + dt * c00
        a01 = dt * c01
        a02 = dt * c02
        a10 = dt * c10
        a11 = 1.0 + dt * c11
        a12 = dt * c12
        a20 = dt * c20
        a21 = dt * c21
        a22 = 1.0 + dt * c22
        F[p, 0, 0] = a00 * f00 + a01 * f10 + a02 * f20
        F[p, 0, 1] = a00 * f01 + a01 * f11 + a02 * f21
        F[p, 0, 2] = a00 * f02 + a01 * f12 + a02 * f22
        F[p, 1, 0] = a10 * f00 + a11 * f10 + a12 * f20
        F[p, 1, 1] = a10 * f01 + a11 * f11 + a12 * f21
        F[p, 1, 2] = a10 * f02 + a11 * f12 + a12 * f22
        F[p, 2, 0] = a20 * f00 + a21 * f10 + a22 * f20
        F[p, 2, 1] = a20 * f01 + a21 * f11 + a22 * f21
        F[p, 2, 2] = a20 * f02 + a21 * f12 + a22 * f22

        r = mat[p]
        J = _plastic(F[p], mu[r], lam[r], pid[r], ys[r], alpha[r], A, Q)
        if not (J > 0.0) or not math.isfinite(J):
            err[0] = 1
            err[1] = p
            errdet[0] = J
            return


@njit(cache=True)
def _stress_norm_kernel(F, mat, mu, lam, eid, out, bad):
    """Frobenius norm of the stress of each stored F into out.

    Inverted or non-finite gradients set bad[p] and a zero norm instead of
    aborting; calibration replays skip those rows.
    """
    A = np.empty((3, 3))
    Q = np.empty((3, 3))
    tau = np.empty((3, 3))
    for p in range(F.shape[0]):
        r = mat[p]
        J = _stress(F[p], mu[r], lam[r], eid[r], tau, A, Q)
        if not (J > 0.0) or not math.isfinite(J):
            bad[p] = 1
            out[p] = 0.0
            continue
        s = 0.0
        for a in range(3):
            for b in range(3):
                s += tau[a, b] * tau[a, b]
        out[p] = math.sqrt(s)


@njit(cache=True)
def _probe_kernel(x, F, mat, mu, lam, pid, ys, alpha, gv, n, dx, dt,
                  delta, bad):
    """Per-particle distance from identity after one pseudo step.

    Gathers the node velocities like the regular grid-to-particle pass, forms
    the trial gradient (I + dt C) F, applies the plastic map, and writes only
    ||F' - I||_F. Particle state is read-only; a trial gradient that inverts
    flags bad[p] with delta 0 and moves on instead of aborting.
    """
    inv_dx = 1.0 / dx
    four_inv_dx2 = 4.0 * inv_dx * inv_dx
    A = np.empty((3, 3))
    Q = np.empty((3, 3))
    Fp = np.empty((3, 3))
    for p in range(x.shape[0]):
        px = x[p, 0]
        py = x[p, 1]
        pz = x[p, 2]
        bx = int(math.floor(px * inv_dx - 0.5))
        by = int(math.floor(py * inv_dx - 0.5))
        bz = int(math.floor(pz * inv_dx - 0.5))
        fx = px * inv_dx - bx
        fy = py * inv_dx - by
        fz = pz * inv_dx - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2

        b00 = 0.0
        b01 = 0.0
        b02 = 0.0
        b10 = 0.0
        b11 = 0.0
        b12 = 0.0
        b20 = 0.0
        b21 = 0.0
        b22 = 0.0
        for i in range(3):
            wi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
            d0 = (bx + i) * dx - px
            for j in range(3):
                wij = wi * (wy0 if j == 0 else (wy1 if j == 1 else wy2))
                d1 = (by + j) * dx - py
                for k in range(3):
                    w = wij * (wz0 if k == 0 else (wz1 if k == 1 else wz2))
                    d2 = (bz + k) * dx - pz
                    gx = gv[bx + i, by + j, bz + k, 0]
                    gy = gv[bx + i, by + j, bz + k, 1]
                    gz = gv[bx + i, by + j, bz + k, 2]
                    b00 += w * gx * d0
                    b01 += w * gx * d1
                    b02 += w * gx * d2
                    b10 += w * gy * d0
                    b11 += w * gy * d1
                    b12 += w * gy * d2
                    b20 += w * gz * d0
                    b21 += w * gz * d1
                    b22 += w * gz * d2

        a00 = 1.0 + dt * four_inv_dx2 * b00
        a01 = dt * four_inv_dx2 * b01
        a02 = dt * four_inv_dx2 * b02
        a10 = dt * four_inv_dx2 * b10
        a11 = 1.0 + dt * four_inv_dx2 * b11
        a12 = dt * four_inv_dx2 * b12
        a20 = dt * four_inv_dx2 * b20
        a21 = dt * four_inv_dx2 * b21
        a22 = 1.0 + dt * four_inv_dx2 * b22
        for c in range(3):
            Fp[0, c] = a00 * F[p, 0, c] + a01 * F[p, 1, c] + a02 * F[p, 2, c]
            Fp[1, c] = a10 * F[p, 0, c] + a11 * F[p, 1, c] + a12 * F[p, 2, c]
            Fp[2, c] = a20 * F[p, 0, c] + a21 * F[p, 1, c] + a22 * F[p, 2, c]

        r = mat[p]
        J = _plastic(Fp, mu[r], lam[r], pid[r], ys[r], alpha[r], A, Q)
        if not (J > 0.0) or not math.isfinite(J):
            bad[p] = 1
            delta[p] = 0.0
            continue
        s = 0.0
        for a in range(3):
            for b in range(3):
                d = Fp[a, b] - (1.0 if a == b else 0.0)
                s += d * d
        delta[p] = math.sqrt(s)


# ---------------------------------------------------------------------------
# material tables and python-level operations


def _material_rows(materials: dict):
    """Pack a label -> MaterialParams mapping into flat per-row arrays."""
    labels = sorted(materials)
    row_of = {lab: i for i, lab in enumerate(labels)}
    mu = np.empty(len(labels))
    lam = np.empty(len(labels))
    eid = np.empty(len(labels), dtype=np.int64)
    pid = np.empty(len(labels), dtype=np.int64)
    ys = np.empty(len(labels))
    alpha = np.empty(len(labels))
    for lab in labels:
        mat = materials[lab]
        lp = mat.lame()
        i = row_of[lab]
        mu[i] = lp.mu
        lam[i] = lp.lam
        eid[i] = ELAST_ID[mat.elasticity]
        pid[i] = PLAST_ID[mat.plasticity]
        ys[i] = mat.yield_stress
        alpha[i] = drucker_prager_alpha(mat.friction_angle)
    return row_of, mu, lam, eid, pid, ys, alpha


def _particle_rows(labels, row_of):
    missing = sorted(set(labels.tolist()) - set(row_of))
    if missing:
        raise MaterialCoverageError(
        f"materials missing for labels {missing}")
    return np.array([row_of[int(l)] for l in labels], dtype=np.int64)


def _check_err(err, errdet, frame=None, substep=None, x=None):
    if err[0] == 1:
        raise InvertedElementError(float(errdet[0]), particle=int(err[1]),
                                   frame=frame, substep=substep)
    if err[0] == 2:
        p = int(err[1])
        raise DomainError(p, x[p] if x is not None else "?")


def p2g(state: ParticleState, materials: dict, grid: Grid, dt: float,
        stress_enabled: bool = True) -> Grid:
    """Scatter particles to a zeroed grid; node velocities on exit."""
    grid.zero()
    row_of, mu, lam, eid, pid, ys, alpha = _material_rows(materials)
    mat = _particle_rows(state.label, row_of)
    err = np.zeros(2, dtype=np.int64)
    errdet = np.zeros(1)
    _p2g_kernel(state.x, state.v, state.C, state.F, state.m, state.V0,
                mat, mu, lam, eid, 1 if stress_enabled else 0,
                grid.mass, grid.velocity, grid.n, grid.dx, dt, err, errdet)
    _check_err(err, errdet, x=state.x)
    active = grid.mass > 0
    grid.velocity[active] /= grid.mass[active][:, None]
    return grid


def grid_update(grid: Grid, dt: float, gravity,
                boundaries=("slip",) * 4 + ("sticky", "slip"),
                margin: int = 3) -> Grid:
    """Gravity increment plus boundary bands on active nodes."""
    g = np.asarray(gravity, dtype=np.float64)
    bc = np.array([1 if b == "sticky" else 0 for b in boundaries],
                  dtype=np.int64)
    active = grid.mass > 0
    grid.velocity[active] += dt * g
    n, m = grid.n, margin
    for axis, (lo_face, hi_face) in enumerate(((0, 1), (2, 3), (4, 5))):
        idx = [slice(None)] * 3
        idx[axis] = slice(0, m)
        lo_band = tuple(idx)
        idx[axis] = slice(n - m + 1, n + 1)
        hi_band = tuple(idx)
        for band, face in ((lo_band, lo_face), (hi_band, hi_face)):
            if bc[face] == 1:
                grid.velocity[band] = 0.0
            else:
                grid.velocity[band + (axis,)] = 0.0
    return grid


def g2p(state: ParticleState, grid: Grid, materials: dict, dt: float,
        margin: int = 3) -> ParticleState:
    """Gather back, advect, update F, apply plasticity. Mutates state."""
    row_of, mu, lam, eid, pid, ys, alpha = _material_rows(materials)
    mat = _particle_rows(state.label, row_of)
    err = np.zeros(2, dtype=np.int64)
    errdet = np.zeros(1)
    nclamp = np.zeros(1, dtype=np.int64)
    _g2p_kernel(state.x, state.v, state.C, state.F, mat, mu, lam, pid, ys,
                alpha, grid.velocity, grid.n, grid.dx, dt, margin, err,
                errdet, nclamp)
    _check_err(err, errdet, x=state.x)
    if nclamp[0]:
        log.warning("%d particles clamped to the boundary band", nclamp[0])
    return state


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Owns the grid buffers and steps a particle state through time.

    Grid arrays are allocated once and reused every substep (only the active
    window, the particle bounding box padded by two cells, is zeroed), so a
    long run allocates nothing per step. The same buffers are lent to the
    calibration stage's single-substep replays.
    """

    def __init__(self, state: ParticleState, materials: dict,
                 config: SimConfig, stress_enabled: bool = True,
                 deterministic: bool = True):
        # serial kernels: deterministic and fast modes coincide; the flag is
        # accepted so callers can state their intent
        self.state = state
        self.materials = materials
        self.config = config
        self.stress_enabled = stress_enabled
        self.deterministic = deterministic

        (self.row_of, self._mu, self._lam, self._eid, self._pid, self._ys,
         self._alpha) = _material_rows(materials)
        self._mat = _particle_rows(state.label, self.row_of)
        self._bc = np.array(
            [1 if b == "sticky" else 0 for b in config.boundaries],
            dtype=np.int64)
        n = config.grid_n
        self.grid_mass = np.zeros((n + 1,) * 3)
        self.grid_velocity = np.zeros((n + 1,) * 3 + (3,))
        self._err = np.zeros(2, dtype=np.int64)
        self._errdet = np.zeros(1)
        self._nclamp = np.zeros(1, dtype=np.int64)
        self.clamped_total = 0

        self.dt, self.substeps = self._resolve_stepping()

    # -- stepping ----------------------------------------------------------

    def _cfl_limit(self) -> float:
        cfg = self.config
        wave = 0.0
        if self.stress_enabled:
            for lab, mat in self.materials.items():
                lp = mat.lame()
                # pressure-only models carry no shear waves
                if mat.elasticity == "fluid":
                    stiff = lp.lam
                elif mat.elasticity == "volume":
                    stiff = lp.lam + 2.0 * lp.mu / 3.0
                else:
                    stiff = lp.lam + 2.0 * lp.mu
                wave = max(wave, math.sqrt(stiff / mat.density))
        vmax = float(np.abs(self.state.v).max()) if len(self.state) else 0.0
        gmag = float(np.linalg.norm(cfg.gravity))
        fall = math.sqrt(2.0 * gmag * _FALL_HEADROOM_DOMAIN)
        v_est = wave + vmax + fall
        if v_est <= 0.0:
            return cfg.frame_dt
        return cfg.cfl * cfg.dx / v_est

    def _resolve_stepping(self):
        cfg = self.config
        limit = self._cfl_limit()
        if cfg.dt is not None:
            if cfg.dt > limit * (1.0 + 1e-12):
                raise CFLError(
                    f"dt = {cfg.dt:g} violates the CFL guard "
                    f"dt <= cfl * dx / v_est = {limit:g}")
            substeps = cfg.substeps or max(
                1, math.ceil(cfg.frame_dt / cfg.dt - 1e-9))
            return cfg.dt, substeps
        if cfg.substeps is not None:
            dt = cfg.frame_dt / cfg.substeps
            if dt > limit * (1.0 + 1e-12):
                raise CFLError(
                    f"substeps = {cfg.substeps} gives dt = {dt:g}, violating "
                    f"the CFL guard dt <= {limit:g}")
            return dt, cfg.substeps
        substeps = max(1, math.ceil(cfg.frame_dt / limit - 1e-9))
        return cfg.frame_dt / substeps, substeps

    # -- grid window -------------------------------------------------------

    def _window(self, x):
        n = self.config.grid_n
        inv_dx = float(self.config.grid_n)
        lo = np.floor(x.min(axis=0) * inv_dx - 0.5).astype(np.int64) - 1
        hi = np.floor(x.max(axis=0) * inv_dx - 0.5).astype(np.int64) + 3
        lo = np.clip(lo, 0, n)
        hi = np.clip(hi, 0, n)
        return lo, hi

    def zero_window(self, x):
        lo, hi = self._window(x)
        sl = tuple(slice(int(l), int(h) + 1) for l, h in zip(lo, hi))
        self.grid_mass[sl] = 0.0
        self.grid_velocity[sl] = 0.0
        return lo, hi

    # -- substep and run ---------------------------------------------------

    def substep(self, frame=None, sub=None, state: ParticleState = None):
        """One p2g -> grid finish -> g2p cycle on the engine's buffers."""
        cfg = self.config
        st = self.state if state is None else state
        mat = self._mat if state is None else _particle_rows(st.label,
                                                             self.row_of)
        lo, hi = self.zero_window(st.x)
        self._err[0] = 0
        _p2g_kernel(st.x, st.v, st.C, st.F, st.m, st.V0, mat,
                    self._mu, self._lam, self._eid,
                    1 if self.stress_enabled else 0,
                    self.grid_mass, self.grid_velocity,
                    cfg.grid_n, cfg.dx, self.dt, self._err, self._errdet)
        _check_err(self._err, self._errdet, frame, sub, st.x)
        g = cfg.gravity
        _grid_finish_kernel(self.grid_mass, self.grid_velocity,
                            int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]),
                            int(lo[2]), int(hi[2]), self.dt,
                            float(g[0]), float(g[1]), float(g[2]),
                            cfg.grid_n, cfg.margin, self._bc)
        self._nclamp[0] = 0
        _g2p_kernel(st.x, st.v, st.C, st.F, mat, self._mu, self._lam,
                    self._pid, self._ys, self._alpha, self.grid_velocity,
                    cfg.grid_n, cfg.dx, self.dt, cfg.margin, self._err,
                    self._errdet, self._nclamp)
        _check_err(self._err, self._errdet, frame, sub, st.x)
        return int(self._nclamp[0])

    def replay_probe(self, snapshot, materials: dict = None,
                     dt: float = None):
        """One pseudo substep from a frozen snapshot on borrowed grid buffers.

        Returns (stress_norm, delta, bad): per-particle Frobenius norms of
        the stress of the stored gradients, distances ||F' - I||_F after a
        single trial step, and skip flags for rows whose trial step inverted.
        The snapshot arrays are never written and no per-particle state is
        copied; the only allocations are the returned vectors and the packed
        material rows, so memory cost stays far below one snapshot.
        """
        cfg = self.config
        mats = self.materials if materials is None else materials
        step = self.dt if dt is None else dt
        row_of, mu, lam, eid, pid, ys, alpha = _material_rows(mats)
        mat = _particle_rows(snapshot.label, row_of)
        npart = snapshot.x.shape[0]
        dens = np.empty(len(row_of))
        for lab, r in row_of.items():
            dens[r] = mats[lab].density
        V0 = np.full(npart, (cfg.dx / 2.0) ** 3)
        mass = dens[mat] * V0

        stress_norm = np.empty(npart)
        bad = np.zeros(npart, dtype=np.int64)
        _stress_norm_kernel(snapshot.F, mat, mu, lam, eid, stress_norm, bad)

        lo, hi = self.zero_window(snapshot.x)
        self._err[0] = 0
        _p2g_kernel(snapshot.x, snapshot.v, snapshot.C, snapshot.F, mass, V0,
                    mat, mu, lam, eid, 1 if self.stress_enabled else 0,
                    self.grid_mass, self.grid_velocity,
                    cfg.grid_n, cfg.dx, step, self._err, self._errdet)
        _check_err(self._err, self._errdet, snapshot.frame, None, snapshot.x)
        g = cfg.gravity
        _grid_finish_kernel(self.grid_mass, self.grid_velocity,
                            int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]),
                            int(lo[2]), int(hi[2]), step,
                            float(g[0]), float(g[1]), float(g[2]),
                            cfg.grid_n, cfg.margin, self._bc)
        delta = np.empty(npart)
        _probe_kernel(snapshot.x, snapshot.F, mat, mu, lam, pid, ys, alpha,
                      self.grid_velocity, cfg.grid_n, cfg.dx, step,
                      delta, bad)
        return stress_norm, delta, bad

    def simulate(self, snapshot_frames=()):
        """Run the configured frames; returns (state, snapshots, frame log).

        Snapshots are captured at frame entry, before that frame's substeps;
        the frame log holds a position copy at the end of every frame.
        """
        wanted = set(int(f) for f in snapshot_frames)
        bad = [f for f in wanted if not 0 <= f < self.config.frames]
        if bad:
            raise ValueError(f"snapshot frames {sorted(bad)} outside "
                             f"[0, {self.config.frames})")
        snapshots = []
        frame_log = []
        for f in range(self.config.frames):
            if f in wanted:
                snapshots.append(FrameSnapshot.capture(self.state, f))
            clamped = 0
            for s in range(self.substeps):
                clamped += self.substep(f, s)
            if clamped:
                self.clamped_total += clamped
                log.warning("frame %d: %d boundary clamps", f, clamped)
            frame_log.append(self.state.x.copy())
        snapshots.sort(key=lambda s: s.frame)
        return self.state, snapshots, frame_log


def simulate(particles: ParticleState, materials: dict, config: SimConfig,
             snapshot_frames=(), stress_enabled: bool = True):
    """Forward-simulate frames x substeps; no sensitivity state anywhere."""
    engine = Engine(particles, materials, config,
                    stress_enabled=stress_enabled)
    return engine.simulate(snapshot_frames)
