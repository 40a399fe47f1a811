"""Two-view point-map registration and pixel-aligned Gaussian planes for novel views."""

from .errors import (
    DegenerateGeometry,
    DimensionMismatch,
    EmptyGeometry,
    EmptySet,
    InsufficientOverlap,
    NonFiniteResidual,
    ReconstructionError,
    SingularCovariance,
    TooSmall,
)
from .gaussians import DepthMap, GaussianPlane, RenderOutput, build_gaussian_plane, splat, splat_reference
from .geometry import AffineTransform, CameraModel, PointMap, Space, apply_affine, bilinear_query, project, unproject
from .metrics import chamfer_eval, l_render, psnr, ssim
from .pipeline import PipelineConfig, run_pipeline
from .refinement import RefineConfig, build_cost_volume, init_color, regress_depth, sample_depth_candidates
from .registration import RegistrationConfig, chamfer_6d, estimate_scale, iterative_translation, register
from .scenes import CorruptionSpec, SceneSpec, corrupt_pointmap, gen_rig, raycast_render

__version__ = "0.1.0"
