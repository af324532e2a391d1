"""splatphys: interior filling and calibrated MPM simulation for splat clouds.

Pipeline stages:

1. Load a splat point cloud (PLY), normalize it into the unit cube.
2. Cluster it into instances, fill each instance's interior with
   physics-only particles (``fill``).
3. Simulate all particles with a moving-least-squares material point
   method (``mpm``) under per-instance material models (``constitutive``).
4. Calibrate each instance's Young's modulus from a handful of state
   snapshots without differentiating through the simulator (``calibrate``).

The command line front end (``splatphys ...``) wires the stages together;
see ``cli`` and ``config`` for the file formats.
"""

from .pointset import (  # noqa: F401
    NOISE, GeometryError, LabelStore, PlyError, PointSet, Transform,
    load_ply, normalize_to_unit_cube, save_frames, save_ply,
)
from .constitutive import (  # noqa: F401
    ELASTICITY_MODELS, PLASTICITY_MODELS, PRESETS, InvertedElementError,
    LameParams, MaterialParams, elastic_stress, lame_from,
    material_from_preset, plastic_return, stress_and_sensitivity,
)
from .hull import ConvexHull, quickhull  # noqa: F401
from .cluster import ClusterResult, dbscan  # noqa: F401
from .fill import FillParams, FillResult, fill_pipeline  # noqa: F401
from .mpm import (  # noqa: F401
    CFLError, DomainError, Engine, FrameSnapshot, MaterialCoverageError,
    ParticleState, SimConfig, simulate,
)
from .calibrate import (  # noqa: F401
    AuditRecord, CalibrationError, PipelineResult, bgdo_update,
    run_pipeline,
)
from .config import (  # noqa: F401
    ConfigError, PipelineConfig, config_from_dict, parse_config,
    save_config, serialize_config,
)
from .scenes import BUILTIN_SCENES, SceneBundle, load_scene  # noqa: F401

__version__ = "0.1.0"
