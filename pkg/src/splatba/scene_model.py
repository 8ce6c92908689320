"""Scene parameter blocks and the differentiable render chain.

SceneParameters holds every raw quantity the photometric optimization
touches: per-context-view depth logits and per-pixel Gaussian parameters,
per-view raw pose parameters (6D rotation + homogeneous translation), and
one FOV angle shared by all views of the scene. View 0 is the canonical
frame; its pose row encodes the identity and is never optimized.

The Gaussian centers are not free parameters: they are produced by lifting
each context pixel's activated depth along its viewing ray, so gradients on
centers are chained back into depth logits, context poses, and the FOV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    DEFAULT_FAR,
    DEFAULT_NEAR,
    DepthMap,
    GaussianSet,
    SH_C0,
    activate_depth,
    activate_depth_grad,
    pixel_rays,
    sigmoid,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PoseParams6D,
    decode_translation_vjp,
    fov_to_focal_grad,
    rot6d_to_matrix_vjp,
)
from .renderer import DEFAULT_CONFIG, RenderConfig, RenderOutput, render, render_with_gradients

FOV_FOCAL_EQUALS_WIDTH = 2.0 * math.atan(0.5)


@dataclass
class SceneParameters:
    """Raw optimizable state for one scene.

    Context blocks are stacked over views: depth_raw (Vc, H, W), quats
    (Vc, H, W, 4), log_scales (Vc, H, W, 3), opacity_logits (Vc, H, W),
    sh (Vc, H, W, k, 3). Poses hold one row of 10 raw values per view
    (context views first, then targets); row 0 stays the identity encoding.
    """

    depth_raw: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    poses: np.ndarray  # (V, 10)
    fov_rad: float
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    sh_degree: int = 0

    def __post_init__(self):
        vc, h, w = self.depth_raw.shape
        k = (self.sh_degree + 1) ** 2
        if self.quats.shape != (vc, h, w, 4):
            raise ValueError("quats shape mismatch")
        if self.log_scales.shape != (vc, h, w, 3):
            raise ValueError("log_scales shape mismatch")
        if self.opacity_logits.shape != (vc, h, w):
            raise ValueError("opacity_logits shape mismatch")
        if self.sh.shape != (vc, h, w, k, 3):
            raise ValueError("sh shape mismatch")
        if self.poses.ndim != 2 or self.poses.shape[1] != 10 or self.poses.shape[0] < vc:
            raise ValueError("poses must be (V, 10) with V >= context count")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def n_context(self) -> int:
        return self.depth_raw.shape[0]

    @property
    def n_views(self) -> int:
        return self.poses.shape[0]

    @property
    def context_hw(self) -> tuple[int, int]:
        return self.depth_raw.shape[1], self.depth_raw.shape[2]

    def context_intrinsics(self) -> CameraIntrinsics:
        h, w = self.context_hw
        return CameraIntrinsics(self.fov_rad, w, h)

    def decode_pose(self, view: int) -> CameraPose:
        if view == 0:
            return CameraPose.identity()
        return PoseParams6D.from_vector(self.poses[view]).decode()

    def decode_poses(self) -> list[CameraPose]:
        return [self.decode_pose(v) for v in range(self.n_views)]

    def depth_map(self, view: int) -> DepthMap:
        return DepthMap(self.depth_raw[view], self.near, self.far)

    def decode_gaussians(self) -> GaussianSet:
        """Lift all context pixels into one pixel-aligned GaussianSet.

        Primitive order is context-view major, then row-major pixels.
        """
        vc = self.n_context
        h, w = self.context_hw
        K = self.context_intrinsics()
        rays = pixel_rays(K, w, h)
        centers = np.empty((vc, h, w, 3))
        for v in range(vc):
            pose = self.decode_pose(v)
            depth = activate_depth(self.depth_raw[v], self.near, self.far)
            centers[v] = (depth[..., None] * rays) @ pose.rotation.T + pose.translation
        n = vc * h * w
        k = (self.sh_degree + 1) ** 2
        return GaussianSet(
            centers=centers.reshape(n, 3),
            quats=self.quats.reshape(n, 4),
            log_scales=self.log_scales.reshape(n, 3),
            opacity_logits=self.opacity_logits.reshape(n),
            sh_coeffs=self.sh.reshape(n, k, 3),
            sh_degree=self.sh_degree,
        )

    def copy(self) -> "SceneParameters":
        return SceneParameters(
            self.depth_raw.copy(), self.quats.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.poses.copy(),
            self.fov_rad, self.near, self.far, self.sh_degree,
        )


@dataclass
class RenderGradients:
    """Full-chain gradients of <target_grad, rendered color>.

    Per-primitive blocks mirror SceneParameters' context stacking; d_poses
    rows follow the raw 10-vector layout (6D rotation, then homogeneous
    translation), with row 0 forced to zero (canonical frame is pinned).
    """

    d_depth_raw: np.ndarray
    d_quats: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_sh: np.ndarray
    d_poses: np.ndarray
    d_fov: float
    d_centers: np.ndarray  # diagnostic: gradient at the lifted centers


def render_scene(
    params: SceneParameters,
    target_view: int,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
) -> RenderOutput:
    """Render one view of the decoded scene."""
    gaussians = params.decode_gaussians()
    K = CameraIntrinsics(params.fov_rad, width, height)
    return render(gaussians, K, params.decode_pose(target_view), width, height,
                  background, config)


def render_backward(
    params: SceneParameters,
    target_view: int,
    target_grad: np.ndarray,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
) -> tuple[RenderOutput, RenderGradients]:
    """Render a target view and back-propagate <target_grad, color> to every
    raw parameter: Gaussian blocks, depth logits (through the lifting chain),
    context and target pose parameters, and the shared FOV.

    The forward intermediates are rebuilt internally, so the result is
    always consistent with the returned render.
    """
    height, width = np.asarray(target_grad).shape[:2]
    gaussians = params.decode_gaussians()
    K = CameraIntrinsics(params.fov_rad, width, height)
    target_pose = params.decode_pose(target_view)
    out, core = render_with_gradients(
        gaussians, K, target_pose, target_grad, width, height, background, config
    )
    grads = _chain_scene(params, core, target_view, width, height)
    return out, grads


def render_scene_with_loss(
    params: SceneParameters,
    target_view: int,
    loss_fn,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
):
    """Render, evaluate `loss_fn(output) -> (aux, grad image)`, and chain the
    gradients to all raw parameters. Returns (output, gradients, aux)."""
    from .renderer import render_with_loss

    gaussians = params.decode_gaussians()
    K = CameraIntrinsics(params.fov_rad, width, height)
    target_pose = params.decode_pose(target_view)
    out, core, aux = render_with_loss(
        gaussians, K, target_pose, loss_fn, width, height, background, config
    )
    grads = _chain_scene(params, core, target_view, width, height)
    return out, grads, aux


def _chain_scene(params: SceneParameters, core, target_view: int,
                 width: int, height: int) -> RenderGradients:
    vc = params.n_context
    h, w = params.context_hw
    k = (params.sh_degree + 1) ** 2
    d_centers = core.d_centers.reshape(vc, h, w, 3)

    ctx_K = params.context_intrinsics()
    rays = pixel_rays(ctx_K, w, h)
    ctx_focal = ctx_K.focal_px

    d_depth_raw = np.empty((vc, h, w))
    d_poses = np.zeros((params.n_views, 10))
    d_fov = 0.0

    for v in range(vc):
        pose = params.decode_pose(v)
        depth = activate_depth(params.depth_raw[v], params.near, params.far)
        world_rays = rays @ pose.rotation.T  # R @ ray per pixel
        g = d_centers[v]

        # center = R (depth * ray) + T
        d_depth = np.sum(g * world_rays, axis=-1)
        d_depth_raw[v] = d_depth * activate_depth_grad(
            params.depth_raw[v], params.near, params.far
        )

        cam_points = depth[..., None] * rays
        d_R = np.einsum("hwi,hwj->ij", g, cam_points)
        d_T = np.sum(g, axis=(0, 1))

        # ray_x = (u - cx)/f, ray_y = (v - cy)/f: d ray / d f = -ray_xy / f
        d_ray = (g @ pose.rotation) * depth[..., None]  # gradient at cam_points -> ray
        d_focal_lift = -float(
            np.sum(d_ray[..., 0] * rays[..., 0] + d_ray[..., 1] * rays[..., 1])
        ) / ctx_focal
        d_fov += d_focal_lift * fov_to_focal_grad(params.fov_rad, w)

        if v != 0:
            d_poses[v] = _pose_matrix_grads_to_raw(params.poses[v], d_R, d_T)

    # Target view: core returns matrix-level pose grads plus the focal grad.
    if target_view != 0:
        d_poses[target_view] += _pose_matrix_grads_to_raw(
            params.poses[target_view], core.d_rotation, core.d_translation
        )
    d_fov += core.d_focal * fov_to_focal_grad(params.fov_rad, width)

    return RenderGradients(
        d_depth_raw=d_depth_raw,
        d_quats=core.d_quats.reshape(vc, h, w, 4),
        d_log_scales=core.d_log_scales.reshape(vc, h, w, 3),
        d_opacity_logits=core.d_opacity_logits.reshape(vc, h, w),
        d_sh=core.d_sh.reshape(vc, h, w, k, 3),
        d_poses=d_poses,
        d_fov=float(d_fov),
        d_centers=d_centers,
    )


def _pose_matrix_grads_to_raw(raw: np.ndarray, d_R: np.ndarray, d_T: np.ndarray) -> np.ndarray:
    p = PoseParams6D.from_vector(raw)
    out = np.empty(10)
    out[:6] = rot6d_to_matrix_vjp(p.rot6, d_R)
    out[6:] = decode_translation_vjp(p.trans_h, d_T)
    return out


def init_scene_parameters(
    context_images: list[np.ndarray] | np.ndarray,
    target_count: int,
    K_init_mode: str | float = "image-size",
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    sh_degree: int = 0,
) -> SceneParameters:
    """Self-supervised starting point for photometric bundle adjustment.

    All poses start at the identity; the FOV starts at 2*atan(1/2) so the
    focal length equals the image width ("image-size" mode), or at an
    explicit angle in radians. Depth and opacity logits start at zero
    (mid-range depth, 0.5 opacity); scales start at the pixel footprint at
    mid depth; degree-0 SH coefficients invert the context pixel colors
    through the 0.5 offset so the initial render reproduces them.
    """
    imgs = [np.asarray(im, dtype=np.float64) for im in context_images]
    if not imgs:
        raise ValueError("need at least one context image")
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("context images must share dimensions")
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError("images must be HxWx3")
    h, w = shape[:2]
    vc = len(imgs)

    if K_init_mode == "image-size":
        fov = FOV_FOCAL_EQUALS_WIDTH
    else:
        fov = float(K_init_mode)
        if not (0.0 < fov < math.pi):
            raise ValueError(f"explicit initial fov must lie in (0, pi), got {fov}")

    focal = (w / 2.0) / math.tan(fov / 2.0)
    mid_depth = near + 0.5 * (far - near)
    k = (sh_degree + 1) ** 2

    quats = np.zeros((vc, h, w, 4))
    quats[..., 0] = 1.0
    sh = np.zeros((vc, h, w, k, 3))
    for v, im in enumerate(imgs):
        sh[v, :, :, 0, :] = (im - 0.5) / SH_C0

    poses = np.tile(PoseParams6D.identity().as_vector(), (vc + target_count, 1))
    return SceneParameters(
        depth_raw=np.zeros((vc, h, w)),
        quats=quats,
        log_scales=np.full((vc, h, w, 3), math.log(mid_depth / focal)),
        opacity_logits=np.zeros((vc, h, w)),
        sh=sh,
        poses=poses,
        fov_rad=fov,
        near=near,
        far=far,
        sh_degree=sh_degree,
    )
