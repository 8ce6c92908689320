"""Differentiable Gaussian splatting with photometric bundle adjustment."""

from .errors import (
    DegenerateInputError,
    DivergenceError,
    GenerationError,
    ParseError,
    SamplingError,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PoseParams6D,
    fov_to_focal,
    normalize_poses,
    pose_angular_errors,
    project,
    quat_to_matrix,
    rot6d_to_matrix,
    unproject,
)
from .gaussians import (
    DepthMap,
    GaussianSet,
    activate_depth,
    build_covariance,
    eval_sh,
    lift_depth_to_centers,
    load_gaussians,
    save_gaussians,
)
from .renderer import (
    RenderConfig,
    RenderOutput,
    SplatGradients,
    project_gaussian,
    render,
    render_depth_only,
    render_with_gradients,
)

__version__ = "0.1.0"
