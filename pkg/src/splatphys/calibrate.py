"""Stiffness calibration from frozen key-frame snapshots.

The forward run stores three full particle snapshots (first, middle, and
last frame). Each calibration iteration replays a single trial substep from
every snapshot under the current materials, reduces two per-label signals
(mean stress norm of the stored deformation gradients and mean post-step
distance of the gradient from identity), blends them with a stiffness-
dependent weight, and shifts the label's log Young's modulus by the blend.
The forward pass itself keeps no per-step sensitivity state, so calibration
cost is a handful of replays regardless of run length.
"""

from __future__ import annotations

import inspect
import logging
import math
import time
import tracemalloc
from dataclasses import dataclass, replace

import numpy as np

from .fill import FillParams, fill_pipeline
from .mpm import Engine, ParticleState, SimConfig
from .pointset import NOISE, PointSet, save_frames

log = logging.getLogger(__name__)

# Young's modulus is confined to this band after every update.
YOUNG_MIN = 1e-2
YOUNG_MAX = 1e12

# Default deformation distance the soft-side signal steers toward.
DELTA_TARGET = 0.1

# A label whose replays skip more than this fraction of particles
# (inverted trial gradients) keeps its stiffness for that iteration.
SKIP_SUPPRESS_FRACTION = 0.01


class CalibrationError(RuntimeError):
    """A stiffness update signal came out non-finite."""


def eta(young: float) -> float:
    """Blend weight in [0, 1] between the stress and deformation signals.

    Grows with the log of the stiffness and saturates at one, so very stiff
    labels are steered by the stress term alone while soft labels mostly
    follow the deformation target.
    """
    return min(1.0, 0.1 * math.log1p(young))


@dataclass(frozen=True)
class LabelSignals:
    """Per-label means from one snapshot replay."""

    label: int
    stress_norm: float    # mean ||tau||_F over surviving particles
    distance: float       # mean ||F' - I||_F over surviving particles
    total: int            # particles carrying this label
    skipped: int          # rows dropped because the trial step inverted


@dataclass(frozen=True)
class OptimizationSignal:
    """Snapshot-averaged signals and the blended log-stiffness step."""

    label: int
    stress_norm: float
    distance: float
    delta_target: float
    eta: float
    update: float          # step subtracted from log Young's modulus
    skip_fraction: float   # worst per-snapshot skipped fraction


@dataclass(frozen=True)
class AuditRecord:
    """One applied (or suppressed) stiffness update."""

    iteration: int
    label: int
    young_before: float
    stress_norm: float
    distance: float
    eta: float
    update: float
    young_after: float
    suppressed: bool = False
    clamped: bool = False


def pseudo_step_signals(snapshot, materials: dict, engine: Engine,
                        dt: float = None) -> dict:
    """Replay one trial substep from a snapshot; label-wise signal means.

    Returns {label: LabelSignals}. Particles whose trial gradient inverts
    are excluded from the means and counted, never fatal: the snapshot came
    from a healthy forward pass, so a bad row only means the current trial
    stiffness is incompatible with that particle's neighborhood.
    """
    stress_norm, delta, bad = engine.replay_probe(snapshot, materials, dt)
    ok = bad == 0
    out = {}
    for lab in np.unique(snapshot.label):
        sel = snapshot.label == lab
        keep = sel & ok
        n_sel = int(sel.sum())
        n_keep = int(keep.sum())
        g = float(stress_norm[keep].mean()) if n_keep else 0.0
        d = float(delta[keep].mean()) if n_keep else 0.0
        out[int(lab)] = LabelSignals(int(lab), g, d, n_sel, n_sel - n_keep)
    return out


def combine(per_snapshot, materials: dict,
            delta_target: float = DELTA_TARGET) -> dict:
    """Blend equal-weight snapshot means into per-label stiffness steps.

    The stress side enters compressed, log1p of the mean norm; the
    deformation side is the gap between the mean distance and the target.
    eta(young) sets the balance. Positive steps soften the label, negative
    ones stiffen it.
    """
    if not per_snapshot:
        raise ValueError("no snapshot signals to combine")
    labels = set(per_snapshot[0])
    for s in per_snapshot[1:]:
        labels &= set(s)
    n = len(per_snapshot)
    out = {}
    for lab in sorted(labels):
        if lab not in materials:
            continue
        g = sum(s[lab].stress_norm for s in per_snapshot) / n
        d = sum(s[lab].distance for s in per_snapshot) / n
        w = eta(materials[lab].young)
        update = w * math.log1p(abs(g)) - (1.0 - w) * (d - delta_target)
        skip = max((s[lab].skipped / s[lab].total) if s[lab].total else 0.0
                   for s in per_snapshot)
        out[lab] = OptimizationSignal(lab, g, d, delta_target, w, update,
                                      skip)
    return out


def _state_from_snapshot(snap, materials: dict,
                         config: SimConfig) -> ParticleState:
    """Writable particle state seeded from a frozen snapshot."""
    n = snap.x.shape[0]
    V0 = np.full(n, (config.dx / 2.0) ** 3)
    dens = np.array([materials[int(l)].density for l in snap.label])
    return ParticleState(x=snap.x.copy(), v=snap.v.copy(), C=snap.C.copy(),
                         F=snap.F.copy(), m=dens * V0, V0=V0,
                         label=snap.label.copy())


def bgdo_update(materials: dict, snapshots, config: SimConfig = None,
                iterations: int = 2, engine: Engine = None,
                delta_target: float = DELTA_TARGET, resimulate=None):
    """Iterate the log-stiffness update on the stored snapshots.

    Every iteration recomputes the signals from the same snapshots with the
    current stiffness values; pass a ``resimulate`` callback (materials ->
    snapshots) to refresh the snapshots from a new forward pass between
    iterations instead. Updates are applied in log space, so each audit row
    satisfies young_after = young_before * exp(-update) up to float
    rounding, and the result is clamped to [YOUNG_MIN, YOUNG_MAX] with a
    logged clamp event. Returns (updated materials dict, audit records);
    the inputs are never mutated. iterations = 0 is a no-op.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    mats = dict(materials)
    audit = []
    if iterations == 0:
        return mats, audit
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("calibration needs at least one snapshot")
    if engine is None:
        if config is None:
            raise ValueError("bgdo_update needs an engine or a config")
        engine = Engine(_state_from_snapshot(snapshots[0], mats, config),
                        mats, config)

    log_lo, log_hi = math.log(YOUNG_MIN), math.log(YOUNG_MAX)
    for it in range(iterations):
        if it > 0 and resimulate is not None:
            snapshots = list(resimulate(mats))
        per_snapshot = [pseudo_step_signals(s, mats, engine)
                        for s in snapshots]
        signals = combine(per_snapshot, mats, delta_target)
        for lab in sorted(signals):
            sig = signals[lab]
            mat = mats[lab]
            young_before = mat.young
            if not math.isfinite(sig.update):
                raise CalibrationError(
                    f"non-finite stiffness update for label {lab} at "
                    f"iteration {it}: stress_norm={sig.stress_norm!r}, "
                    f"distance={sig.distance!r}, eta={sig.eta!r}")
            if sig.skip_fraction > SKIP_SUPPRESS_FRACTION:
                log.warning(
                    "label %d: %.2f%% of particles inverted during the "
                    "replay; stiffness update suppressed this iteration",
                    lab, 100.0 * sig.skip_fraction)
                audit.append(AuditRecord(it, lab, young_before,
                                         sig.stress_norm, sig.distance,
                                         sig.eta, 0.0, young_before,
                                         suppressed=True))
                continue
            new_log = mat.log_young - sig.update
            clamped = False
            if new_log < log_lo:
                new_log, clamped = log_lo, True
            elif new_log > log_hi:
                new_log, clamped = log_hi, True
            mats[lab] = replace(mat, log_young=new_log)
            if clamped:
                log.warning("label %d: stiffness clamped to %g",
                            lab, mats[lab].young)
            audit.append(AuditRecord(it, lab, young_before, sig.stress_norm,
                                     sig.distance, sig.eta, sig.update,
                                     mats[lab].young, clamped=clamped))
    return mats, audit


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass(frozen=True)
class StageReport:
    """Wall-clock seconds and traced-allocation peak for one stage."""

    name: str
    seconds: float
    peak_mb: float


@dataclass(frozen=True)
class PipelineResult:
    points: PointSet        # simulated cloud: originals plus interior fills
    instance_count: int
    materials: dict         # calibrated per-label materials
    audit: list
    snapshots: list
    forward_frames: list    # per-frame positions before calibration
    final_frames: list      # per-frame positions with calibrated stiffness
    report: list            # StageReport rows: fill/forward/optimize/final/total
    frame_paths: list


def default_snapshot_frames(frames: int):
    """First, middle, and last frame of a run."""
    return sorted({0, frames // 2, frames - 1})


def run_pipeline(points: PointSet, materials: dict, config: SimConfig,
                 fill_params: FillParams = None, *, iterations: int = 2,
                 delta_target: float = DELTA_TARGET, snapshot_frames=None,
                 velocities=None, seed: int = 0, out_dir=None,
                 resimulate: bool = False,
                 deterministic: bool = True) -> PipelineResult:
    """Fill, simulate, calibrate, re-simulate, and optionally export frames.

    ``velocities`` may be None (rest), a 3-vector, an (N, 3) array matching
    the filled cloud, or a callable mapping the filled cloud's (N, 3)
    positions (plus its labels, when the callable takes two arguments) to
    per-particle velocities or None.
    With ``iterations = 0`` the final frames are the forward frames: no
    update is computed, so rerunning the unchanged materials would
    reproduce them bit for bit anyway. ``resimulate`` refreshes snapshots
    with a fresh forward pass between calibration iterations.
    """
    if fill_params is None:
        fill_params = FillParams(cell_size=config.dx)
    started_tracing = not tracemalloc.is_tracing()
    if started_tracing:
        tracemalloc.start()
    report = []
    t_total = time.perf_counter()

    def stage(name, fn):
        tracemalloc.reset_peak()
        t0 = time.perf_counter()
        out = fn()
        seconds = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1] / 1e6
        report.append(StageReport(name, seconds, peak))
        log.info("stage %-8s %8.3f s   peak %8.2f MB", name, seconds, peak)
        return out

    try:
        filled, store = stage(
            "fill", lambda: fill_pipeline(points, fill_params, seed))

        keep = filled.labels != NOISE
        dropped = int(len(filled) - keep.sum())
        if dropped:
            log.warning("%d unclustered points dropped before simulation",
                        dropped)
        sim_ps = PointSet(filled.positions[keep], filled.opacity[keep],
                          filled.labels[keep], filled.is_filled[keep])

        if callable(velocities):
            try:
                n_par = len(inspect.signature(velocities).parameters)
            except (TypeError, ValueError):
                n_par = 1
            vel = velocities(sim_ps.positions, sim_ps.labels) \
                if n_par >= 2 else velocities(sim_ps.positions)
            if vel is not None:
                vel = np.asarray(vel, dtype=np.float64)
        elif velocities is not None and dropped:
            vel = np.asarray(velocities, dtype=np.float64)
            if vel.ndim == 2:
                vel = vel[keep]
        else:
            vel = velocities

        if snapshot_frames is None:
            snapshot_frames = default_snapshot_frames(config.frames)
        state = ParticleState.from_pointset(sim_ps, materials, config,
                                            velocities=vel)
        engine = Engine(state, materials, config,
                        deterministic=deterministic)
        _, snapshots, forward_frames = stage(
            "forward", lambda: engine.simulate(snapshot_frames))

        resim = None
        if resimulate:
            def resim(mats):
                st = ParticleState.from_pointset(sim_ps, mats, config,
                                                 velocities=vel)
                eng = Engine(st, mats, config, deterministic=deterministic)
                return eng.simulate(snapshot_frames)[1]

        calibrated, audit = stage(
            "optimize", lambda: bgdo_update(
                materials, snapshots, config, iterations=iterations,
                engine=engine, delta_target=delta_target, resimulate=resim))

        if iterations == 0:
            final_frames = forward_frames
            report.append(StageReport("final", 0.0, 0.0))
        else:
            engine = None  # release the forward grid before the final run
            fstate = ParticleState.from_pointset(sim_ps, calibrated, config,
                                                 velocities=vel)
            feng = Engine(fstate, calibrated, config,
                          deterministic=deterministic)
            final_frames = stage("final", lambda: feng.simulate(()))[2]

        frame_paths = []
        if out_dir is not None:
            frame_paths = save_frames(final_frames, out_dir,
                                      labels=sim_ps.labels,
                                      is_filled=sim_ps.is_filled)
    finally:
        peak_all = max((r.peak_mb for r in report), default=0.0)
        report.append(StageReport("total", time.perf_counter() - t_total,
                                  peak_all))
        if started_tracing:
            tracemalloc.stop()

    return PipelineResult(points=sim_ps, instance_count=store.count,
                          materials=calibrated, audit=audit,
                          snapshots=snapshots, forward_frames=forward_frames,
                          final_frames=final_frames, report=report,
                          frame_paths=frame_paths)
