"""Command-line driver: fill | simulate | optimize | pipeline.

Every subcommand resolves a run configuration (YAML file plus flag
overrides), validates it before any expensive work, and writes artifacts
atomically (temp file, rename on success) so a failed stage leaves no
partial outputs. Exit codes: 0 success, 2 configuration error, 3 runtime
error; failures print ``error [stage]: message`` to stderr. Log verbosity
comes from the SPLATPHYS_LOG environment variable (DEBUG/INFO/WARNING/...,
default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import yaml

from .calibrate import bgdo_update, run_pipeline
from .config import (
    BUILTIN_PREFIX,
    ConfigError,
    PipelineConfig,
    config_from_dict,
    parse_config,
    save_config,
    serialize_config,
)
from .fill import fill_pipeline
from .mpm import (
    CFLError,
    DomainError,
    Engine,
    MaterialCoverageError,
    ParticleState,
)
from .pointset import NOISE, PlyError, PointSet, load_ply, save_frames, \
    save_ply

log = logging.getLogger(__name__)

LOG_ENV = "SPLATPHYS_LOG"

# configuration-class failures; everything else is a runtime failure
_CONFIG_ERRORS = (ConfigError, PlyError, DomainError, MaterialCoverageError,
                  CFLError)


class StageFailure(Exception):
    """Wraps the first error of a run with the stage where it happened."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name: str):
    """Decorator tagging exceptions with the pipeline stage."""
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageFailure:
                raise
            except Exception as exc:
                raise StageFailure(name, exc) from exc
        return inner
    return wrap


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# input resolution


@_stage("input")
def load_input(cfg: PipelineConfig):
    """Resolve the configured input into (points, velocity resolver).

    The velocity resolver maps an (N, 3) position array and matching label
    array to per-particle velocities, honoring (in priority order) the
    config's velocity entry, then a builtin scene's bundled field, then
    rest.
    """
    bundle = None
    if cfg.input.startswith(BUILTIN_PREFIX):
        from .scenes import load_scene
        bundle = load_scene(cfg.input[len(BUILTIN_PREFIX):])
        points = bundle.points
    else:
        try:
            points = load_ply(cfg.input)
        except OSError as exc:
            raise ConfigError(f"cannot read input {cfg.input}: "
                              f"{exc}") from exc

    def velocities(positions, labels):
        if cfg.velocity is None:
            if bundle is not None and bundle.velocity is not None:
                return np.asarray(bundle.velocity(positions), float)
            return None
        if isinstance(cfg.velocity, dict):
            v = np.zeros((len(positions), 3))
            for lab, vec in cfg.velocity.items():
                v[labels == lab] = vec
            return v
        return np.tile(np.asarray(cfg.velocity, float),
                       (len(positions), 1))

    return points, velocities


def _require_materials(points, materials):
    missing = sorted(set(np.unique(points.labels).tolist()) - set(materials))
    if missing:
        raise MaterialCoverageError(
            f"materials missing for labels {missing}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_fill(cfg: PipelineConfig, out_path) -> int:
    points, _ = load_input(cfg)
    run = _stage("fill")(fill_pipeline)
    filled, store = run(points, cfg.fill, cfg.seed)
    out_path = out_path or os.path.join(cfg.output_dir, "filled.ply")
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    export = _stage("export")(save_ply)
    export(filled, out_path)
    sizes = {int(lab): int(np.count_nonzero(filled.labels == lab))
             for lab in np.unique(filled.labels)}
    _atomic_write(os.path.splitext(out_path)[0] + ".labels.json",
                  json.dumps({"instances": store.count,
                              "points_per_label": sizes}, indent=2))
    print(f"filled {len(filled) - len(points)} interior points into "
          f"{store.count} instance(s); wrote {out_path}")
    return 0


def _simulate_forward(cfg: PipelineConfig, points, velocities):
    _require_materials(points, cfg.materials)
    vel = velocities(points.positions, points.labels)
    state = ParticleState.from_pointset(points, cfg.materials, cfg.sim,
                                        velocities=vel)
    engine = Engine(state, cfg.materials, cfg.sim,
                    deterministic=cfg.deterministic)
    run = _stage("forward")(engine.simulate)
    _, snapshots, frames = run(cfg.snapshot_frames)
    return engine, snapshots, frames


def cmd_simulate(cfg: PipelineConfig) -> int:
    points, velocities = load_input(cfg)
    _, snapshots, frames = _simulate_forward(cfg, points, velocities)
    export = _stage("export")(_export_frames_and_snapshots)
    paths = export(cfg, points, snapshots, frames)
    print(f"simulated {cfg.sim.frames} frames -> {cfg.output_dir} "
          f"({len(paths)} files, {len(snapshots)} snapshots)")
    return 0


def _export_frames_and_snapshots(cfg, points, snapshots, frames):
    paths = save_frames(frames, cfg.output_dir, labels=points.labels,
                        is_filled=points.is_filled)
    arrays = {}
    for s in snapshots:
        tag = f"frame_{s.frame:03d}"
        arrays.update({f"{tag}_x": s.x, f"{tag}_v": s.v, f"{tag}_C": s.C,
                       f"{tag}_F": s.F, f"{tag}_label": s.label})
    snap_path = os.path.join(cfg.output_dir, "snapshots.npz")
    tmp = snap_path + ".tmp.npz"
    np.savez(tmp, frames=np.array([s.frame for s in snapshots]), **arrays)
    os.replace(tmp, snap_path)
    return paths


def _audit_lines(audit) -> str:
    return "".join(
        json.dumps({"iteration": r.iteration, "label": r.label,
                    "young_before": r.young_before,
                    "stress_norm": r.stress_norm, "distance": r.distance,
                    "eta": r.eta, "update": r.update,
                    "young_after": r.young_after,
                    "suppressed": r.suppressed, "clamped": r.clamped})
        + "\n"
        for r in audit)


def _mat_dict(mat):
    return dict(density=mat.density, poisson=mat.poisson,
                log_young=mat.log_young, young=mat.young,
                elasticity=mat.elasticity, plasticity=mat.plasticity,
                yield_stress=mat.yield_stress,
                friction_angle=mat.friction_angle, cohesion=mat.cohesion)


def _materials_yaml(materials) -> str:
    return yaml.safe_dump(
        {"materials": {lab: _mat_dict(m)
                       for lab, m in sorted(materials.items())}},
        sort_keys=False)


def cmd_optimize(cfg: PipelineConfig, report_path) -> int:
    points, velocities = load_input(cfg)
    filled, _ = _stage("fill")(fill_pipeline)(points, cfg.fill, cfg.seed)
    keep = filled.labels != NOISE
    filled = PointSet(filled.positions[keep], filled.opacity[keep],
                      filled.labels[keep], filled.is_filled[keep])
    engine, snapshots, _ = _simulate_forward(cfg, filled, velocities)
    run = _stage("optimize")(bgdo_update)
    mats, audit = run(cfg.materials, snapshots, cfg.sim,
                      iterations=cfg.iterations, engine=engine,
                      delta_target=cfg.delta_target)
    os.makedirs(cfg.output_dir, exist_ok=True)
    report_path = report_path or os.path.join(cfg.output_dir, "audit.jsonl")
    _atomic_write(report_path, _audit_lines(audit))
    mat_path = os.path.join(cfg.output_dir, "materials.yaml")
    _atomic_write(mat_path, _materials_yaml(mats))
    for lab in sorted(mats):
        print(f"label {lab}: young {cfg.materials[lab].young:.6g} -> "
              f"{mats[lab].young:.6g}")
    print(f"wrote {mat_path} and {report_path} "
          f"({len(audit)} audit records)")
    return 0


def cmd_pipeline(cfg: PipelineConfig) -> int:
    points, velocities = load_input(cfg)
    result = _stage("pipeline")(run_pipeline)(
        points, cfg.materials, cfg.sim, cfg.fill,
        iterations=cfg.iterations, delta_target=cfg.delta_target,
        snapshot_frames=cfg.snapshot_frames,
        velocities=velocities, seed=cfg.seed,
        out_dir=os.path.join(cfg.output_dir, "frames"),
        resimulate=cfg.resimulate, deterministic=cfg.deterministic)

    os.makedirs(cfg.output_dir, exist_ok=True)
    _atomic_write(os.path.join(cfg.output_dir, "audit.jsonl"),
                  _audit_lines(result.audit))
    _atomic_write(os.path.join(cfg.output_dir, "materials.yaml"),
                  _materials_yaml(result.materials))
    save_config(cfg, os.path.join(cfg.output_dir, "config.resolved.yaml"))
    lines = [f"{'stage':<10} {'seconds':>10} {'peak MB':>10}"]
    lines += [f"{r.name:<10} {r.seconds:>10.3f} {r.peak_mb:>10.2f}"
              for r in result.report]
    _atomic_write(os.path.join(cfg.output_dir, "report.txt"),
                  "\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"pipeline done: {len(result.frame_paths)} frames in "
          f"{os.path.join(cfg.output_dir, 'frames')}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="splatphys",
        description="Interior filling, continuum simulation, and stiffness "
                    "calibration for labeled splat point clouds.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--in", dest="input",
                        help="input PLY or builtin:<scene>")
        sp.add_argument("--out-dir", help="output directory")
        sp.add_argument("--seed", type=int)

    f = sub.add_parser("fill", help="cluster instances and fill interiors")
    add_common(f)
    f.add_argument("--out", help="output PLY path (default "
                                 "<out-dir>/filled.ply)")
    f.add_argument("--radius", type=float, help="clustering radius")
    f.add_argument("--min-pts", type=int, help="cluster core threshold")
    f.add_argument("--sigma", type=float, help="fill distance falloff")
    f.add_argument("--occ-threshold", type=float,
                   help="occupancy acceptance threshold")
    f.add_argument("--candidates", type=int,
                   help="candidate samples per instance")
    f.add_argument("--fill-density", type=float,
                   help="interior points per grid cell volume")

    s = sub.add_parser("simulate", help="forward-simulate the input points")
    add_common(s)
    s.add_argument("--frames", type=int)
    s.add_argument("--grid", type=int, help="grid nodes per axis")
    s.add_argument("--dt", type=float, help="explicit substep size")
    s.add_argument("--gravity", help="gx,gy,gz")
    s.add_argument("--snapshot-frames", help="comma-separated frame indices")
    s.add_argument("--deterministic", dest="deterministic",
                   action="store_true", default=None)
    s.add_argument("--no-deterministic", dest="deterministic",
                   action="store_false")

    o = sub.add_parser("optimize",
                       help="fill, simulate, and calibrate stiffness")
    add_common(o)
    o.add_argument("--frames", type=int)
    o.add_argument("--iterations", type=int)
    o.add_argument("--snapshots", help="comma-separated snapshot frames")
    o.add_argument("--report", help="audit log path (line-delimited JSON)")

    pl = sub.add_parser("pipeline",
                        help="fill + simulate + optimize + final export")
    add_common(pl)
    pl.add_argument("--frames", type=int)
    pl.add_argument("--iterations", type=int)
    pl.add_argument("--resimulate", action="store_true", default=None,
                    help="refresh snapshots between calibration iterations")
    return p


def _overrides_from_args(args) -> dict:
    over: dict = {}

    def put(path, value):
        if value is None:
            return
        node = over
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("input",), args.input)
    put(("output_dir",), getattr(args, "out_dir", None))
    put(("seed",), args.seed)
    put(("deterministic",), getattr(args, "deterministic", None))
    for name in ("radius", "min_pts", "sigma", "occ_threshold",
                 "candidates", "fill_density"):
        put(("fill", name), getattr(args, name, None))
    put(("sim", "frames"), getattr(args, "frames", None))
    put(("sim", "grid_n"), getattr(args, "grid", None))
    put(("sim", "dt"), getattr(args, "dt", None))
    gravity = getattr(args, "gravity", None)
    if gravity is not None:
        put(("sim", "gravity"), [float(g) for g in gravity.split(",")])
    put(("bgdo", "iterations"), getattr(args, "iterations", None))
    put(("bgdo", "resimulate"), getattr(args, "resimulate", None))
    snaps = getattr(args, "snapshot_frames", None) \
        or getattr(args, "snapshots", None)
    if snaps is not None:
        put(("bgdo", "snapshot_frames"),
            [int(f) for f in str(snaps).split(",")])
    return over


def _resolve_config(args) -> PipelineConfig:
    overrides = _overrides_from_args(args)
    if args.config:
        return parse_config(args.config, overrides)
    overrides.setdefault("output_dir", "out")
    cfg = config_from_dict(overrides)
    log.info("resolved config:\n%s", serialize_config(cfg))
    return cfg


def main(argv=None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        try:
            cfg = _resolve_config(args)
        except _CONFIG_ERRORS as exc:
            raise StageFailure("config", exc) from exc
        if args.command == "fill":
            return cmd_fill(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg, args.report)
        return cmd_pipeline(cfg)
    except StageFailure as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2 if isinstance(exc.cause, _CONFIG_ERRORS) else 3
    except KeyboardInterrupt:
        print("error [interrupted]", file=sys.stderr)
        return 3
    except Exception as exc:   # validation outside a staged call
        print(f"error [validate] {exc}", file=sys.stderr)
        return 2 if isinstance(exc, _CONFIG_ERRORS) else 3


if __name__ == "__main__":
    sys.exit(main())
