"""Bundled procedural desk-scale scenes.

Every scene is generated deterministically from a fixed seed and returns a
SceneBundle: a labeled point cloud in unit-cube coordinates plus matching
materials, simulation config, an optional initial velocity field, and fill
parameters. The mat-over-box scene also carries an analytic description of
its open cavity so tests can check where interior fills may not appear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constitutive import MaterialParams, material_from_preset
from .fill import FillParams
from .mpm import SimConfig
from .pointset import PointSet

__all__ = ["SceneBundle", "BUILTIN_SCENES", "load_scene", "hollow_cube",
           "shell_pair", "mat_over_box", "pulse_cube", "resting_cube"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box region with a containment test."""

    lo: tuple
    hi: tuple

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((pts > lo) & (pts < hi), axis=1)


@dataclass(frozen=True)
class SceneBundle:
    name: str
    points: PointSet
    materials: dict
    config: SimConfig
    fill: FillParams
    velocity: object = None     # None or callable (N,3) positions -> (N,3)
    cavity: Box = None          # analytic open region (mat-box scene only)
    notes: str = ""


def _lattice_shell(lo, hi, h):
    """Grid-sampled boundary of an axis-aligned box (all six faces)."""
    axes = [np.arange(lo[d], hi[d] + h / 2, h) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    on_face = np.zeros(len(pts), dtype=bool)
    for d in range(3):
        on_face |= np.isclose(pts[:, d], lo[d]) | np.isclose(pts[:, d], hi[d])
    return pts[on_face]


def _sphere_shell(center, radius, n):
    """Even shell sampling via the golden-angle spiral."""
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return np.asarray(center) + radius * pts


def hollow_cube() -> SceneBundle:
    """Soft hollow cube shell resting just above a sticky floor."""
    shell = _lattice_shell((0.38, 0.38, 0.06), (0.62, 0.62, 0.30), 0.01)
    points = PointSet(shell, labels=np.zeros(len(shell), dtype=np.int32))
    materials = {0: material_from_preset(0, "jelly")}
    config = SimConfig(frames=150, gravity=(0.0, 0.0, -9.8))
    fill = FillParams(fill_density=0.8, cell_size=config.dx)
    return SceneBundle("hollow-cube", points, materials, config, fill,
                       notes="single soft shell; fill then drop on floor")


def shell_pair() -> SceneBundle:
    """Two separate instances: a cube shell and a sphere shell."""
    cube = _lattice_shell((0.29, 0.41, 0.06), (0.47, 0.59, 0.24), 0.01)
    sphere = _sphere_shell((0.66, 0.50, 0.16), 0.10, 1500)
    pts = np.concatenate([cube, sphere])
    labels = np.concatenate([np.zeros(len(cube), dtype=np.int32),
                             np.ones(len(sphere), dtype=np.int32)])
    points = PointSet(pts, labels=labels)
    materials = {0: material_from_preset(0, "jelly"),
                 1: material_from_preset(1, "rubber")}
    config = SimConfig(frames=60, gravity=(0.0, 0.0, -9.8))
    fill = FillParams(fill_density=0.8, cell_size=config.dx)
    return SceneBundle("shell-pair", points, materials, config, fill,
                       notes="two instances with separate hulls and fills")


def mat_over_box() -> SceneBundle:
    """Thin flat mat hovering above an open-topped box.

    The mat is exactly coplanar, so its hull is degenerate and it must
    receive no interior fills. The box's open cavity is reported
    analytically, shrunk by three fill sigmas from the inner walls, where
    distance-weighted filling must place (almost) nothing.
    """
    h = 0.015
    n, nz = 21, 17                     # outer 0.30 x 0.30 x 0.24 at step h
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(nz),
                          indexing="ij")
    cavity = (i > 2) & (i < 18) & (j > 2) & (j < 18) & (k > 2)
    pad = np.pad(cavity, 1, constant_values=False)
    near = (pad[2:, 1:-1, 1:-1] | pad[:-2, 1:-1, 1:-1]
            | pad[1:-1, 2:, 1:-1] | pad[1:-1, :-2, 1:-1]
            | pad[1:-1, 1:-1, 2:] | pad[1:-1, 1:-1, :-2])
    surface = ~cavity & ((i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)
                         | (k == 0) | (k == nz - 1) | near)
    box_pts = np.stack([0.35 + i[surface] * h, 0.35 + j[surface] * h,
                        0.10 + k[surface] * h], axis=1)

    mx, my = np.meshgrid(np.arange(0.30, 0.70 + h / 2, h),
                         np.arange(0.30, 0.70 + h / 2, h), indexing="ij")
    mat_pts = np.stack([mx.ravel(), my.ravel(),
                        np.full(mx.size, 0.42)], axis=1)

    pts = np.concatenate([box_pts, mat_pts])
    labels = np.concatenate([np.zeros(len(box_pts), dtype=np.int32),
                             np.ones(len(mat_pts), dtype=np.int32)])
    points = PointSet(pts, labels=labels)
    materials = {0: material_from_preset(0, "rubber"),
                 1: material_from_preset(1, "jelly")}
    config = SimConfig(frames=30, gravity=(0.0, 0.0, -9.8))
    sigma = 0.02
    fill = FillParams(sigma=sigma, fill_density=0.5, cell_size=config.dx)
    # open air region inset 3 sigma from the inner walls and floor
    inset = 3.0 * sigma
    cavity_box = Box((0.38 + inset, 0.38 + inset, 0.13 + inset),
                     (0.62 - inset, 0.62 - inset, 0.34 - inset))
    return SceneBundle("mat-box", points, materials, config, fill,
                       cavity=cavity_box,
                       notes="degenerate mat hull; box fills avoid cavity")


PULSE_CENTER = np.array([0.5, 0.5, 0.5])
PULSE_RATE = 0.7          # 1/s inward contraction of the velocity field
PULSE_SEED = 20240811
PULSE_SIDE = 0.22


def pulse_velocity(positions: np.ndarray) -> np.ndarray:
    """Inward radial pulse: v = -rate * (x - center)."""
    return -PULSE_RATE * (positions - PULSE_CENTER)


def pulse_cube(young: float = 3e8, particles: int = 5000) -> SceneBundle:
    """Stiffness-calibration scene: cube under a contracting velocity pulse.

    Gravity is off and the velocity field is an irrotational contraction, so
    the run has no contact, no rotation, and no shear. A stiff cube resists
    the pulse through pressure and barely leaves identity (distance stays
    far below the deformation target), while a soft cube collapses
    ballistically, racking up large deformation at near-zero stress. That
    separation is what gives the stiffness update an unambiguous sign on
    both sides of the target, which the calibration tests rely on.

    The stress model is pressure-only so shear never contributes stress,
    and the pressure magnitude |lam * J(J-1)| -> 0 as the collapse deepens
    instead of diverging like a log-strain model would.
    """
    rng = np.random.default_rng(PULSE_SEED)
    half = PULSE_SIDE / 2.0
    pts = PULSE_CENTER + rng.uniform(-half, half, size=(particles, 3))
    points = PointSet(pts, labels=np.zeros(particles, dtype=np.int32))
    materials = {0: MaterialParams.from_young(
        0, density=1e6, poisson=0.05, young=young,
        elasticity="fluid", plasticity="identity")}
    config = SimConfig(frames=30, gravity=(0.0, 0.0, 0.0))
    fill = FillParams(fill_density=0.0, cell_size=config.dx)  # already solid
    return SceneBundle("pulse-cube", points, materials, config, fill,
                       velocity=pulse_velocity,
                       notes="zero-g contraction pulse for calibration")


def resting_cube(young: float = 1e5) -> SceneBundle:
    """Solid elastic cube in equilibrium on the sticky floor."""
    config = SimConfig(frames=150, gravity=(0.0, 0.0, -9.8))
    h = config.dx / 2.0
    side = np.arange(10) * h
    # bottom layer at 3.25 dx couples to two frozen floor nodes: the cube
    # rests on the sticky band without triggering position clamps
    X, Y, Z = np.meshgrid(side + 0.5 - 4.5 * h, side + 0.5 - 4.5 * h,
                          side + 3.25 * config.dx, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    points = PointSet(pts, labels=np.zeros(len(pts), dtype=np.int32))
    materials = {0: MaterialParams.from_young(
        0, density=1000.0, poisson=0.3, young=young,
        elasticity="sigma", plasticity="identity")}
    fill = FillParams(fill_density=0.0, cell_size=config.dx)
    return SceneBundle("resting-cube", points, materials, config, fill,
                       notes="static regression: sag stays small")


BUILTIN_SCENES = {
    "hollow-cube": hollow_cube,
    "shell-pair": shell_pair,
    "mat-box": mat_over_box,
    "pulse-cube": pulse_cube,
    "resting-cube": resting_cube,
}


def load_scene(name: str) -> SceneBundle:
    if name not in BUILTIN_SCENES:
        raise ValueError(f"unknown scene {name!r}; choose one of "
                         f"{sorted(BUILTIN_SCENES)}")
    return BUILTIN_SCENES[name]()
