"""Material models: elastic stress, plastic return maps, stiffness sensitivity.

Stress convention: every elasticity model returns the Kirchhoff-type tensor

    tau = (dPhi/dF) F^T

which is the quantity the momentum update consumes; the engine scales it by
-(4/dx^2) dt V0 before scattering to the grid.

All six models are linear in the Lame pair (mu, lambda), and both moduli are
linear in Young's modulus E at fixed Poisson ratio, so tau(F, E) = E*tau(F, 1).
That makes d||tau||_F / d(log E) = ||tau||_F exactly, which is what the
calibration stage exploits (see stress_and_sensitivity).

Plastic return maps act on the deformation gradient after the elastic stress
of a substep has been computed, projecting F back to the model's admissible
set. Maps working in log-strain space use the sign-corrected SVD
(det U = det V = +1) so the logarithm stays real.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ELASTICITY_MODELS = ("sigma", "corotated", "stvk", "fluid", "volume",
                     "neohookean")
PLASTICITY_MODELS = ("identity", "sigma", "vonmises", "druckerprager", "fluid")

_I3 = np.eye(3)


class InvertedElementError(ValueError):
    """det(F) <= 0: the element is inverted or collapsed.

    Carries the particle index (and, when raised from the engine, the frame
    and substep) so the failure is locatable instead of surfacing as NaNs.
    """

    def __init__(self, detF, particle=None, frame=None, substep=None):
        self.detF = detF
        self.particle = particle
        self.frame = frame
        self.substep = substep
        where = ""
        if particle is not None:
            where = f" at particle {particle}"
        if frame is not None:
            where += f", frame {frame}, substep {substep}"
        super().__init__(f"inverted element{where}: det(F) = {detF:.6g} <= 0")


@dataclass(frozen=True)
class LameParams:
    """Shear modulus mu and first Lame parameter lam."""

    mu: float
    lam: float


def lame_from(young: float, poisson: float) -> LameParams:
    """Convert (E, nu) to Lame parameters.

    mu = E / (2 (1 + nu)),  lam = E nu / ((1 + nu)(1 - 2 nu)).

    Accepts nu in [0, 0.5); nu = 0 gives lam = 0 (no volumetric coupling).
    """
    if young <= 0.0:
        raise ValueError(f"young modulus must be positive, got {young}")
    if poisson >= 0.5:
        raise ValueError(
            f"poisson must be in (0, 0.5): nu = {poisson} reaches the "
            "incompressible limit (lambda diverges)")
    if poisson < 0.0:
        raise ValueError(f"poisson must be non-negative, got {poisson}")
    mu = young / (2.0 * (1.0 + poisson))
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return LameParams(mu, lam)


@dataclass
class MaterialParams:
    """Per-instance material description.

    Young's modulus is stored as its natural log because the calibration
    update is additive in log space; use ``young`` / ``from_young`` at the
    edges. ``friction_angle`` is in degrees.
    """

    label: int
    density: float
    poisson: float
    log_young: float
    elasticity: str = "corotated"
    plasticity: str = "identity"
    yield_stress: float = 1e4
    friction_angle: float = 30.0
    cohesion: float = 0.0

    def __post_init__(self):
        if self.density <= 0.0:
            raise ValueError(f"density must be positive, got {self.density}")
        if not (0.0 < self.poisson < 0.5):
            raise ValueError(
                f"poisson must be in (0, 0.5), got {self.poisson}")
        if self.elasticity not in ELASTICITY_MODELS:
            raise ValueError(
                f"unknown elasticity model {self.elasticity!r}; "
                f"choose one of {ELASTICITY_MODELS}")
        if self.plasticity not in PLASTICITY_MODELS:
            raise ValueError(
                f"unknown plasticity model {self.plasticity!r}; "
                f"choose one of {PLASTICITY_MODELS}")
        if self.yield_stress < 0.0:
            raise ValueError("yield_stress must be >= 0")
        if self.cohesion < 0.0:
            raise ValueError("cohesion must be >= 0")
        if not (0.0 <= self.friction_angle < 90.0):
            raise ValueError("friction_angle must be in [0, 90) degrees")

    @classmethod
    def from_young(cls, label, density, poisson, young, **kw):
        return cls(label, density, poisson, math.log(young), **kw)

    @property
    def young(self) -> float:
        return math.exp(self.log_young)

    def with_young(self, young: float) -> "MaterialParams":
        return replace(self, log_young=math.log(young))

    def lame(self) -> LameParams:
        return lame_from(self.young, self.poisson)


# Named parameter bundles for quick scene setup. The tuples are this
# package's own defaults, not measured constants; scenes override freely.
PRESETS = {
    "rubber": dict(density=1000.0, poisson=0.3, young=1e6,
                   elasticity="corotated", plasticity="identity"),
    "jelly": dict(density=1000.0, poisson=0.35, young=1e4,
                  elasticity="sigma", plasticity="identity"),
    "metal": dict(density=7800.0, poisson=0.33, young=2e8,
                  elasticity="sigma", plasticity="vonmises",
                  yield_stress=1e6),
    "sand": dict(density=1600.0, poisson=0.3, young=3e7,
                 elasticity="sigma", plasticity="druckerprager",
                 friction_angle=35.0, cohesion=0.0),
    "water": dict(density=1000.0, poisson=0.45, young=5e4,
                  elasticity="fluid", plasticity="fluid"),
    "snow": dict(density=400.0, poisson=0.25, young=1.4e5,
                 elasticity="sigma", plasticity="druckerprager",
                 friction_angle=25.0, cohesion=0.0),
}


def material_from_preset(label: int, name: str, **overrides) -> MaterialParams:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose one of "
                         f"{sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    young = kw.pop("young")
    return MaterialParams.from_young(label, young=young, **kw)


# ---------------------------------------------------------------------------
# Decompositions


def svd3(F: np.ndarray):
    """SVD of a 3x3 matrix with det(U) = det(V) = +1.

    Reflections are pushed into the last singular value (flip the last
    column of the offending factor and negate sigma_2), so for det(F) > 0
    all singular values come out positive and log(sigma) is real.
    """
    U, s, Vt = np.linalg.svd(F)
    s = s.copy()
    if np.linalg.det(U) < 0.0:
        U = U.copy()
        U[:, 2] = -U[:, 2]
        s[2] = -s[2]
    if np.linalg.det(Vt) < 0.0:
        Vt = Vt.copy()
        Vt[2, :] = -Vt[2, :]
        s[2] = -s[2]
    return U, s, Vt


def _check_det(F: np.ndarray, particle=None) -> float:
    J = float(np.linalg.det(F))
    if not np.isfinite(J) or J <= 0.0:
        raise InvertedElementError(J, particle=particle)
    return J


# ---------------------------------------------------------------------------
# Elastic stress models


def elastic_stress(model: str, F: np.ndarray, lame: LameParams,
                   particle=None) -> np.ndarray:
    """Kirchhoff-type stress tau = (dPhi/dF) F^T for the selected model.

    sigma        log-strain: tau = U diag(2 mu eps + lam tr(eps)) U^T,
                 eps = log(Sigma)
    corotated    tau = 2 mu (F - R) F^T + lam J (J - 1) I, R = U V^T
    stvk         Green-Lagrange: tau = 2 mu F Eg + lam J (J - 1) I,
                 Eg = (F^T F - I)/2  (not symmetric for general F)
    fluid        tau = lam J (J - 1) I
    volume       tau = kappa (J - 1/J) I, kappa = 2 mu / 3 + lam
    neohookean   tau = mu (F F^T - I) + lam log(J) I
    """
    F = np.asarray(F, dtype=np.float64)
    J = _check_det(F, particle)
    mu, lam = lame.mu, lame.lam

    if model == "sigma":
        U, s, _ = svd3(F)
        eps = np.log(s)
        principal = 2.0 * mu * eps + lam * eps.sum()
        return (U * principal) @ U.T
    if model == "corotated":
        U, _, Vt = svd3(F)
        R = U @ Vt
        return 2.0 * mu * (F - R) @ F.T + lam * J * (J - 1.0) * _I3
    if model == "stvk":
        Eg = 0.5 * (F.T @ F - _I3)
        return 2.0 * mu * F @ Eg + lam * J * (J - 1.0) * _I3
    if model == "fluid":
        return lam * J * (J - 1.0) * _I3
    if model == "volume":
        kappa = 2.0 * mu / 3.0 + lam
        return kappa * (J - 1.0 / J) * _I3
    if model == "neohookean":
        return mu * (F @ F.T - _I3) + lam * math.log(J) * _I3
    raise ValueError(f"unknown elasticity model {model!r}")


# ---------------------------------------------------------------------------
# Plastic return maps


def drucker_prager_alpha(friction_angle_deg: float) -> float:
    """Cone slope from the friction angle: sqrt(2/3) 2 sin(phi)/(3 - sin(phi))."""
    s = math.sin(math.radians(friction_angle_deg))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def plastic_return(model: str, F: np.ndarray, lame: LameParams,
                   params: MaterialParams, particle=None) -> np.ndarray:
    """Project F onto the admissible set of the selected plasticity model.

    identity        no plastic flow, F unchanged
    fluid           volume-only memory: psi(F) = J^(1/3) I
    sigma           clamp J into [0.05, 1.2], then J^(1/3) I
    vonmises        log-strain radial return with dg = ||dev|| - sigma_y/(2 mu)
    druckerprager   sand cone: expansion -> U V^T; inside cone -> F; else
                    radial return with
                    dg = ||dev|| + alpha (3 lam + 2 mu)/(2 mu) tr(eps)
    """
    F = np.asarray(F, dtype=np.float64)
    if model == "identity":
        _check_det(F, particle)
        return F
    J = _check_det(F, particle)

    if model == "fluid":
        return np.cbrt(J) * _I3
    if model == "sigma":
        return np.cbrt(np.clip(J, 0.05, 1.2)) * _I3

    U, s, Vt = svd3(F)
    eps = np.log(s)

    if model == "vonmises":
        dev = eps - eps.mean()
        n = float(np.linalg.norm(dev))
        dg = n - params.yield_stress / (2.0 * lame.mu)
        if dg <= 0.0 or n == 0.0:
            return F
        eps = eps - dg * dev / n
        return (U * np.exp(eps)) @ Vt

    if model == "druckerprager":
        tr = float(eps.sum())
        if tr > 0.0:
            # expansion: project all the way back to the rotation
            return U @ Vt
        dev = eps - tr / 3.0
        n = float(np.linalg.norm(dev))
        alpha = drucker_prager_alpha(params.friction_angle)
        dg = n + alpha * (3.0 * lame.lam + 2.0 * lame.mu) / (2.0 * lame.mu) * tr
        if dg <= 0.0 or n == 0.0:
            return F
        eps = eps - dg * dev / n
        return (U * np.exp(eps)) @ Vt

    raise ValueError(f"unknown plasticity model {model!r}")


def drucker_prager_yield(tau: np.ndarray, alpha: float,
                         cohesion: float = 0.0) -> float:
    """Yield function f(tau) = ||dev tau|| + alpha tr(tau) - c (<= 0 admissible)."""
    tr = float(np.trace(tau))
    dev = tau - (tr / 3.0) * _I3
    return float(np.linalg.norm(dev)) + alpha * tr - cohesion


# ---------------------------------------------------------------------------
# Stiffness sensitivity


def stress_and_sensitivity(model: str, F: np.ndarray, young: float,
                           poisson: float, particle=None):
    """Stress and the exact derivative of ||tau||_F with respect to log E.

    tau is degree-1 homogeneous in E (both Lame moduli are linear in E), so
    ||tau(F, E)|| = E ||tau(F, 1)|| and d||tau||/dlogE = ||tau|| with no
    differentiation pass needed. Returns (tau, sensitivity).
    """
    tau = elastic_stress(model, F, lame_from(young, poisson), particle)
    return tau, float(np.linalg.norm(tau))
