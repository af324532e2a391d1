"""Run configuration: schema, validation, defaults, and round-trip.

A run is described by a small YAML document with five sections:

```yaml
input: scene.ply            # or builtin:<scene-name>
output_dir: out
seed: 0
deterministic: true
fill:                       # interior-filling stage
  radius: 0.05
  min_pts: 10
  sigma: 0.02
  candidates: 20000
  occ_threshold: 0.6
  fill_density: 8.0
sim:                        # grid and stepping (SimConfig fields)
  grid_n: 64
  frames: 150
  fps: 25.0
  gravity: [0.0, 0.0, -9.8]
  cfl: 0.5
  margin: 3
  boundaries: [slip, slip, slip, slip, sticky, slip]
  dt: null
  substeps: null
velocity: null              # rest | [vx,vy,vz] | {label: [vx,vy,vz]}
materials:                  # per instance label
  0: {preset: jelly}
  1: {density: 1000.0, poisson: 0.3, young: 1.0e5,
      elasticity: sigma, plasticity: identity}
bgdo:                       # stiffness calibration
  iterations: 2
  delta_target: 0.1
  snapshot_frames: null     # default: first, middle, last frame
  resimulate: false
```

Parsing resolves every default, so the returned object is fully explicit;
``builtin:`` inputs borrow their bundled scene's fill/sim/materials values
for any section the document omits. Unknown keys raise ConfigError naming
the key; range violations surface the owning type's own invariant message.
``serialize_config`` writes the resolved state back out such that parsing
it again yields an identical configuration (materials round-trip through
``log_young``, the exact internal parameter, to avoid exp/log drift).
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import yaml

from .calibrate import DELTA_TARGET, default_snapshot_frames
from .constitutive import MaterialParams, PRESETS, material_from_preset
from .fill import FillParams
from .mpm import SimConfig

log = logging.getLogger(__name__)

__all__ = ["ConfigError", "PipelineConfig", "parse_config",
           "config_from_dict", "config_to_dict", "serialize_config",
           "save_config"]

# near-incompressible cap: lambda stays finite in every model
POISSON_CAP = 0.499

_TOP_KEYS = {"input", "output_dir", "seed", "deterministic", "fill", "sim",
             "velocity", "materials", "bgdo"}
_FILL_KEYS = {"radius", "min_pts", "sigma", "candidates", "occ_threshold",
              "fill_density"}
_SIM_KEYS = {"grid_n", "frames", "fps", "gravity", "cfl", "margin",
             "boundaries", "dt", "substeps"}
_BGDO_KEYS = {"iterations", "delta_target", "snapshot_frames", "resimulate"}
_MATERIAL_KEYS = {"preset", "density", "poisson", "young", "log_young",
                  "elasticity", "plasticity", "yield_stress",
                  "friction_angle", "cohesion"}

# accepted spelling for the log-strain model
_ELASTICITY_ALIASES = {"hencky": "sigma"}

BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    """Invalid run configuration: unknown key, bad range, or bad shape."""


@dataclass(frozen=True)
class PipelineConfig:
    """Fully resolved run description; every field is explicit."""

    input: str
    output_dir: str
    seed: int
    deterministic: bool
    fill: FillParams
    sim: SimConfig
    materials: dict                 # {label: MaterialParams}
    velocity: object = None         # None | (3,) tuple | {label: tuple}
    iterations: int = 2
    delta_target: float = DELTA_TARGET
    snapshot_frames: tuple = ()
    resimulate: bool = False


def _check_keys(section: dict, allowed, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where}{key}'")


def _section(raw: dict, name: str, defaults: dict) -> dict:
    got = raw.get(name) or {}
    if not isinstance(got, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    _check_keys(got, set(defaults), f"{name}.")
    merged = dict(defaults)
    merged.update(got)
    return merged


# fields coerced to float: YAML 1.1 reads shorthand like 1e5 as a string
_MATERIAL_FLOATS = ("density", "poisson", "young", "log_young",
                    "yield_stress", "friction_angle", "cohesion")


def _material_from_dict(label: int, spec: dict) -> MaterialParams:
    if not isinstance(spec, dict):
        raise ConfigError(f"materials.{label} must be a mapping")
    _check_keys(spec, _MATERIAL_KEYS, f"materials.{label}.")
    spec = dict(spec)
    for name in _MATERIAL_FLOATS:
        if spec.get(name) is not None:
            try:
                spec[name] = float(spec[name])
            except (TypeError, ValueError):
                raise ConfigError(f"materials.{label}.{name} must be a "
                                  f"number, got {spec[name]!r}") from None
    if "elasticity" in spec:
        spec["elasticity"] = _ELASTICITY_ALIASES.get(spec["elasticity"],
                                                     spec["elasticity"])
    if "young" in spec and "log_young" in spec:
        raise ConfigError(
            f"materials.{label}: give young or log_young, not both")
    poisson = spec.get("poisson")
    if poisson is not None and poisson > POISSON_CAP:
        if poisson < 0.5:
            log.warning("materials.%s: poisson %g capped at %g",
                        label, poisson, POISSON_CAP)
            spec["poisson"] = POISSON_CAP
        # >= 0.5 falls through to the type's own range error
    try:
        preset = spec.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(
                    f"materials.{label}: unknown preset {preset!r}; "
                    f"choose one of {sorted(PRESETS)}")
            if "young" in spec:
                spec["log_young"] = math.log(spec.pop("young"))
            return material_from_preset(label, preset, **spec)
        missing = {"density", "poisson"} - set(spec)
        if "young" not in spec and "log_young" not in spec:
            missing.add("young")
        if missing:
            raise ConfigError(
                f"materials.{label}: missing required field(s) "
                f"{sorted(missing)} (or use a preset)")
        if "young" in spec:
            return MaterialParams.from_young(label, **spec)
        return MaterialParams(label, **spec)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"materials.{label}: {exc}") from exc


def _parse_velocity(raw):
    if raw is None:
        return None

    def vec(v, where):
        try:
            t = tuple(float(c) for c in v)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a 3-vector") from None
        if len(t) != 3:
            raise ConfigError(f"{where} must be a 3-vector")
        return t

    if isinstance(raw, dict):
        return {int(lab): vec(v, f"velocity.{lab}") for lab, v in raw.items()}
    return vec(raw, "velocity")


def _builtin_defaults(name: str):
    from .scenes import BUILTIN_SCENES  # deferred: scenes import config-free
    if name not in BUILTIN_SCENES:
        raise ConfigError(f"unknown builtin scene {name!r}; choose one of "
                          f"{sorted(BUILTIN_SCENES)}")
    return BUILTIN_SCENES[name]()


def config_from_dict(raw: dict) -> PipelineConfig:
    """Validate and resolve a raw mapping into a PipelineConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(raw, _TOP_KEYS, "")
    if "input" not in raw or not raw["input"]:
        raise ConfigError("config needs an 'input' (file path or builtin:"
                          "<scene>)")
    if "output_dir" not in raw or not raw["output_dir"]:
        raise ConfigError("config needs an 'output_dir'")
    inp = str(raw["input"])

    fill_defaults = dict(radius=0.05, min_pts=10, sigma=0.02,
                         candidates=20000, occ_threshold=0.6,
                         fill_density=8.0)
    sim_defaults = dict(grid_n=64, frames=150, fps=25.0,
                        gravity=[0.0, 0.0, -9.8], cfl=0.5, margin=3,
                        boundaries=["slip"] * 4 + ["sticky", "slip"],
                        dt=None, substeps=None)
    mats_default: dict = {}
    if inp.startswith(BUILTIN_PREFIX):
        bundle = _builtin_defaults(inp[len(BUILTIN_PREFIX):])
        f, s = bundle.fill, bundle.config
        fill_defaults = dict(radius=f.radius, min_pts=f.min_pts,
                             sigma=f.sigma, candidates=f.candidates,
                             occ_threshold=f.occ_threshold,
                             fill_density=f.fill_density)
        sim_defaults = dict(grid_n=s.grid_n, frames=s.frames, fps=s.fps,
                            gravity=list(s.gravity), cfl=s.cfl,
                            margin=s.margin, boundaries=list(s.boundaries),
                            dt=s.dt, substeps=s.substeps)
        mats_default = dict(bundle.materials)

    fill_kw = _section(raw, "fill", fill_defaults)
    # cell defaults to the grid spacing so fills match simulation density
    sim_kw = _section(raw, "sim", sim_defaults)
    bgdo_kw = _section(raw, "bgdo", dict(iterations=2,
                                         delta_target=DELTA_TARGET,
                                         snapshot_frames=None,
                                         resimulate=False))
    try:
        sim = SimConfig(grid_n=int(sim_kw["grid_n"]),
                        frames=int(sim_kw["frames"]),
                        fps=float(sim_kw["fps"]),
                        gravity=tuple(float(g) for g in sim_kw["gravity"]),
                        cfl=float(sim_kw["cfl"]),
                        margin=int(sim_kw["margin"]),
                        boundaries=tuple(sim_kw["boundaries"]),
                        dt=None if sim_kw["dt"] is None
                        else float(sim_kw["dt"]),
                        substeps=None if sim_kw["substeps"] is None
                        else int(sim_kw["substeps"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from exc
    try:
        fill = FillParams(radius=float(fill_kw["radius"]),
                          min_pts=int(fill_kw["min_pts"]),
                          sigma=float(fill_kw["sigma"]),
                          candidates=int(fill_kw["candidates"]),
                          occ_threshold=float(fill_kw["occ_threshold"]),
                          fill_density=float(fill_kw["fill_density"]),
                          cell_size=sim.dx)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fill: {exc}") from exc

    mats_raw = raw.get("materials")
    if mats_raw is None:
        materials = mats_default
    else:
        if not isinstance(mats_raw, dict):
            raise ConfigError("materials must map labels to specs")
        materials = {}
        for lab, spec in mats_raw.items():
            try:
                ilab = int(lab)
            except (TypeError, ValueError):
                raise ConfigError(
                    f"materials key {lab!r} is not an integer label"
                ) from None
            materials[ilab] = _material_from_dict(ilab, spec)

    iterations = bgdo_kw["iterations"]
    if not isinstance(iterations, int) or iterations < 0:
        raise ConfigError("bgdo.iterations must be an integer >= 0")
    delta_target = float(bgdo_kw["delta_target"])
    if not math.isfinite(delta_target):
        raise ConfigError("bgdo.delta_target must be finite")
    frames_raw = bgdo_kw["snapshot_frames"]
    if frames_raw is None:
        snap = tuple(default_snapshot_frames(sim.frames))
    else:
        try:
            snap = tuple(sorted({int(f) for f in frames_raw}))
        except (TypeError, ValueError):
            raise ConfigError(
                "bgdo.snapshot_frames must be a list of frame indices"
            ) from None
        bad = [f for f in snap if not 0 <= f < sim.frames]
        if bad:
            raise ConfigError(f"bgdo.snapshot_frames {bad} outside "
                              f"[0, {sim.frames})")

    return PipelineConfig(
        input=inp,
        output_dir=str(raw["output_dir"]),
        seed=int(raw.get("seed", 0)),
        deterministic=bool(raw.get("deterministic", True)),
        fill=fill,
        sim=sim,
        materials=materials,
        velocity=_parse_velocity(raw.get("velocity")),
        iterations=iterations,
        delta_target=delta_target,
        snapshot_frames=snap,
        resimulate=bool(bgdo_kw["resimulate"]),
    )


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(path, overrides: dict = None) -> PipelineConfig:
    """Load, validate, and resolve a YAML run configuration.

    ``overrides`` is an optional nested mapping (typically from CLI flags)
    merged over the document before validation. The resolved configuration
    is echoed to the run log.
    """
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if overrides:
        raw = _deep_merge(raw if isinstance(raw, dict) else {}, overrides)
    cfg = config_from_dict(raw)
    log.info("resolved config:\n%s", serialize_config(cfg))
    return cfg


def _material_to_dict(mat: MaterialParams) -> dict:
    return dict(density=mat.density, poisson=mat.poisson,
                log_young=mat.log_young, elasticity=mat.elasticity,
                plasticity=mat.plasticity, yield_stress=mat.yield_stress,
                friction_angle=mat.friction_angle, cohesion=mat.cohesion)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Resolved configuration as plain data (parse-able back, identically)."""
    velocity = cfg.velocity
    if isinstance(velocity, dict):
        velocity = {lab: list(v) for lab, v in velocity.items()}
    elif velocity is not None:
        velocity = list(velocity)
    return {
        "input": cfg.input,
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "fill": dict(radius=cfg.fill.radius, min_pts=cfg.fill.min_pts,
                     sigma=cfg.fill.sigma, candidates=cfg.fill.candidates,
                     occ_threshold=cfg.fill.occ_threshold,
                     fill_density=cfg.fill.fill_density),
        "sim": dict(grid_n=cfg.sim.grid_n, frames=cfg.sim.frames,
                    fps=cfg.sim.fps, gravity=list(cfg.sim.gravity),
                    cfl=cfg.sim.cfl, margin=cfg.sim.margin,
                    boundaries=list(cfg.sim.boundaries), dt=cfg.sim.dt,
                    substeps=cfg.sim.substeps),
        "velocity": velocity,
        "materials": {lab: _material_to_dict(m)
                      for lab, m in sorted(cfg.materials.items())},
        "bgdo": dict(iterations=cfg.iterations,
                     delta_target=cfg.delta_target,
                     snapshot_frames=list(cfg.snapshot_frames),
                     resimulate=cfg.resimulate),
    }


def serialize_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False,
                          default_flow_style=False)


def save_config(cfg: PipelineConfig, path):
    """Atomic write of the resolved configuration."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(serialize_config(cfg))
    os.replace(tmp, path)
