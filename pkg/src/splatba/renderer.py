"""Forward splatting and the analytic backward pass.

The forward pass projects each 3D Gaussian into the image plane (EWA-style:
2D covariance via the local perspective Jacobian), sorts all primitives
front to back by camera depth with ties broken by primitive index, and
alpha-composites per pixel. Compositing uses sequential-semantics primitives
(cumulative products/sums), so results are bit-identical to a plain
per-pixel loop and independent of the tile decomposition and thread count.

Termination: a primitive is composited when the transmittance *in front of
it* is still at least ``min_transmittance``; afterwards the ray is done. A
primitive that saturates transmittance therefore still contributes.

The backward pass returns the exact gradient of ``<target_grad, color>``
with respect to every Gaussian parameter (raw, pre-activation), the target
pose (at the rotation-matrix/translation level), and the focal length.
Chaining to raw pose parameters, depth logits, and the FOV angle happens in
:mod:`splatba.scene_model`.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .gaussians import (
    GaussianSet,
    build_covariance_batch,
    build_covariance_batch_vjp,
    eval_sh_batch,
    eval_sh_batch_vjp,
    sigmoid,
)
from .geometry import CameraIntrinsics, CameraPose

THREADS_ENV_VAR = "NAS3R_THREADS"


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer constants; defaults follow common splatting practice."""

    footprint_radius: float = 3.0  # Mahalanobis cutoff radius
    density_clip: float = 1.0 / 255.0  # 2D densities below this contribute nothing
    min_transmittance: float = 1e-4  # ray terminates once T drops below this
    blur: float = 0.3  # low-pass regularizer added to cov2d, px^2
    alpha_floor: float = 1e-6  # denominator floor for expected depth
    near_clip: float = 0.01  # view-frame z at or below this is culled
    cull_margin: float = 0.3  # footprint may extend this fraction beyond bounds
    tile_size: int = 32
    threads: int = 1

    def effective_threads(self) -> int:
        cap = os.environ.get(THREADS_ENV_VAR)
        n = max(1, int(self.threads))
        if cap is not None:
            n = min(n, max(1, int(cap)))
        return n


DEFAULT_CONFIG = RenderConfig()


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) expected depth, 0 where nothing rendered
    alpha: np.ndarray  # (H, W) in [0, 1]


@dataclass
class SplatGradients:
    """Gradients of <target_grad, color>; per-primitive arrays match the
    input GaussianSet ordering, culled primitives hold zeros."""

    d_centers: np.ndarray  # (N, 3)
    d_quats: np.ndarray  # (N, 4), w.r.t. raw (unnormalized) quaternions
    d_log_scales: np.ndarray  # (N, 3)
    d_opacity_logits: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, k, 3)
    d_rotation: np.ndarray  # (3, 3), target pose rotation matrix
    d_translation: np.ndarray  # (3,), target pose translation
    d_focal: float  # focal length of the target camera


@dataclass
class _Splats:
    """Projection results for the kept primitives, in compositing order."""

    idx: np.ndarray  # (M,) indices into the original set, unique
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    conic: np.ndarray  # (M, 3): A, B, C of the inverse 2D covariance
    radius: np.ndarray
    rgb: np.ndarray  # (M, 3)
    alpha: np.ndarray  # (M,)
    # intermediates kept for the backward pass
    t: np.ndarray  # (M, 3) view-frame positions
    cov3d: np.ndarray  # (M, 3, 3) world covariances
    cov_view: np.ndarray  # (M, 3, 3)
    jac: np.ndarray  # (M, 2, 3)
    dirs: np.ndarray  # (M, 3) unit view directions for SH
    dist: np.ndarray  # (M,) norms behind dirs


def _raster_intrinsics(fov_rad: float, width: int, height: int):
    focal = (width / 2.0) / math.tan(fov_rad / 2.0)
    return focal, (width - 1) / 2.0, (height - 1) / 2.0


def _prepare(
    gaussians: GaussianSet,
    fov_rad: float,
    pose: CameraPose,
    width: int,
    height: int,
    config: RenderConfig,
) -> _Splats:
    focal, cx, cy = _raster_intrinsics(fov_rad, width, height)
    R_wv = pose.rotation.T
    cam_center = pose.translation

    t_all = (gaussians.centers - cam_center) @ R_wv.T
    in_front = t_all[:, 2] > config.near_clip

    # Culled rows get a harmless z so the vectorized projection stays finite.
    tz = np.where(in_front, t_all[:, 2], 1.0)
    u = focal * t_all[:, 0] / tz + cx
    v = focal * t_all[:, 1] / tz + cy

    cov3d = build_covariance_batch(gaussians.quats, gaussians.log_scales)
    cov_view = R_wv[None] @ cov3d @ R_wv.T[None]

    jac = np.zeros((len(gaussians), 2, 3))
    jac[:, 0, 0] = focal / tz
    jac[:, 1, 1] = focal / tz
    jac[:, 0, 2] = -focal * t_all[:, 0] / (tz * tz)
    jac[:, 1, 2] = -focal * t_all[:, 1] / (tz * tz)

    cov2d_m = jac @ cov_view @ np.transpose(jac, (0, 2, 1))
    a2 = cov2d_m[:, 0, 0] + config.blur
    b2 = cov2d_m[:, 0, 1]
    c2 = cov2d_m[:, 1, 1] + config.blur

    det = a2 * c2 - b2 * b2
    conic = np.stack([c2 / det, -b2 / det, a2 / det], axis=1)

    mid = 0.5 * (a2 + c2)
    lam_max = mid + np.sqrt(np.maximum((0.5 * (a2 - c2)) ** 2 + b2 * b2, 0.0))
    radius = config.footprint_radius * np.sqrt(np.maximum(lam_max, 0.0))

    mx = config.cull_margin * width
    my = config.cull_margin * height
    keep = (
        in_front
        & (u + radius >= -mx)
        & (u - radius <= (width - 1) + mx)
        & (v + radius >= -my)
        & (v - radius <= (height - 1) + my)
    )

    kept = np.nonzero(keep)[0]
    order = kept[np.argsort(t_all[kept, 2], kind="stable")]

    diff = gaussians.centers[order] - cam_center
    dist = np.linalg.norm(diff, axis=1)
    safe = np.maximum(dist, 1e-12)
    dirs = diff / safe[:, None]
    dirs[dist < 1e-12] = (0.0, 0.0, 1.0)
    rgb = eval_sh_batch(gaussians.sh_coeffs[order], dirs, gaussians.sh_degree)

    return _Splats(
        idx=order,
        u=u[order],
        v=v[order],
        depth=t_all[order, 2],
        conic=conic[order],
        radius=radius[order],
        rgb=rgb,
        alpha=np.asarray(sigmoid(gaussians.opacity_logits[order])),
        t=t_all[order],
        cov3d=cov3d[order],
        cov_view=cov_view[order],
        jac=jac[order],
        dirs=dirs,
        dist=dist,
    )


def _tiles(width: int, height: int, tile: int):
    return [
        (x0, min(x0 + tile, width), y0, min(y0 + tile, height))
        for y0 in range(0, height, tile)
        for x0 in range(0, width, tile)
    ]


def _tile_selection(splats: _Splats, x0, x1, y0, y1) -> np.ndarray:
    r = splats.radius
    hit = (
        (splats.u + r >= x0)
        & (splats.u - r <= x1 - 1)
        & (splats.v + r >= y0)
        & (splats.v - r <= y1 - 1)
    )
    return np.nonzero(hit)[0]


@numba.njit(cache=True, nogil=True)
def _composite_kernel(
    x0, y0, height, width,
    u, v, conic, alpha, rgb, z,
    background, cutoff, density_clip, min_transmittance, alpha_floor,
    color_out, depth_out, alpha_out,
):
    """Sequential front-to-back compositing of one tile.

    Scalar arithmetic in strict IEEE order; the brute-force oracle mirrors
    these expressions (including math.exp) so outputs match bit for bit.
    """
    m_count = u.shape[0]
    for py in range(height):
        fy = float(y0 + py)
        for px in range(width):
            fx = float(x0 + px)
            transmittance = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            alpha_acc = 0.0
            depth_acc = 0.0
            for i in range(m_count):
                if transmittance < min_transmittance:
                    break
                dx = fx - u[i]
                dy = fy - v[i]
                maha = (
                    conic[i, 0] * dx * dx
                    + 2.0 * conic[i, 1] * dx * dy
                    + conic[i, 2] * dy * dy
                )
                if maha > cutoff:
                    continue
                g = math.exp(-0.5 * maha)
                if g < density_clip:
                    continue
                a = alpha[i] * g
                if a == 0.0:
                    continue
                w = a * transmittance
                c0 += w * rgb[i, 0]
                c1 += w * rgb[i, 1]
                c2 += w * rgb[i, 2]
                alpha_acc += w
                depth_acc += w * z[i]
                transmittance = transmittance * (1.0 - a)
            color_out[py, px, 0] = c0 + (1.0 - alpha_acc) * background[0]
            color_out[py, px, 1] = c1 + (1.0 - alpha_acc) * background[1]
            color_out[py, px, 2] = c2 + (1.0 - alpha_acc) * background[2]
            alpha_out[py, px] = alpha_acc
            depth_out[py, px] = depth_acc / max(alpha_acc, alpha_floor)


@numba.njit(cache=True, nogil=True)
def _backward_kernel(
    x0, y0, height, width,
    u, v, conic, alpha, rgb, z,
    background, cutoff, density_clip, min_transmittance,
    target_grad,
    d_alpha, d_conic, d_u, d_v, d_rgb,
):
    """Exact gradient of <target_grad, color> w.r.t. the 2D splat inputs.

    Two passes per pixel: the first replays compositing to get the total
    weighted gradient mass, the second converts running prefixes into the
    suffix sums the transmittance chain needs. When an opaque primitive
    zeroes the remaining transmittance, its suffix is exactly zero, so the
    guarded division never sees 0/0.
    """
    m_count = u.shape[0]
    for py in range(height):
        fy = float(y0 + py)
        for px in range(width):
            fx = float(x0 + px)
            g0 = target_grad[py, px, 0]
            g1 = target_grad[py, px, 1]
            g2 = target_grad[py, px, 2]

            total = 0.0
            transmittance = 1.0
            for i in range(m_count):
                if transmittance < min_transmittance:
                    break
                dx = fx - u[i]
                dy = fy - v[i]
                maha = (
                    conic[i, 0] * dx * dx
                    + 2.0 * conic[i, 1] * dx * dy
                    + conic[i, 2] * dy * dy
                )
                if maha > cutoff:
                    continue
                g = math.exp(-0.5 * maha)
                if g < density_clip:
                    continue
                a = alpha[i] * g
                if a == 0.0:
                    continue
                dldw = (
                    g0 * (rgb[i, 0] - background[0])
                    + g1 * (rgb[i, 1] - background[1])
                    + g2 * (rgb[i, 2] - background[2])
                )
                total += dldw * (a * transmittance)
                transmittance = transmittance * (1.0 - a)

            prefix = 0.0
            transmittance = 1.0
            for i in range(m_count):
                if transmittance < min_transmittance:
                    break
                dx = fx - u[i]
                dy = fy - v[i]
                maha = (
                    conic[i, 0] * dx * dx
                    + 2.0 * conic[i, 1] * dx * dy
                    + conic[i, 2] * dy * dy
                )
                if maha > cutoff:
                    continue
                g = math.exp(-0.5 * maha)
                if g < density_clip:
                    continue
                a = alpha[i] * g
                if a == 0.0:
                    continue
                w = a * transmittance
                dldw = (
                    g0 * (rgb[i, 0] - background[0])
                    + g1 * (rgb[i, 1] - background[1])
                    + g2 * (rgb[i, 2] - background[2])
                )
                prefix += dldw * w
                suffix = total - prefix
                one_minus_a = 1.0 - a
                dlda = dldw * transmittance
                if suffix != 0.0 and one_minus_a > 0.0:
                    dlda -= suffix / one_minus_a
                d_alpha[i] += dlda * g
                dldm = (dlda * alpha[i]) * (-0.5) * g
                d_conic[i, 0] += dldm * dx * dx
                d_conic[i, 1] += dldm * 2.0 * dx * dy
                d_conic[i, 2] += dldm * dy * dy
                d_u[i] += dldm * (
                    -(2.0 * conic[i, 0] * dx + 2.0 * conic[i, 1] * dy)
                )
                d_v[i] += dldm * (
                    -(2.0 * conic[i, 1] * dx + 2.0 * conic[i, 2] * dy)
                )
                d_rgb[i, 0] += w * g0
                d_rgb[i, 1] += w * g1
                d_rgb[i, 2] += w * g2
                transmittance = transmittance * one_minus_a


def _tile_arrays(splats, sel):
    return (
        np.ascontiguousarray(splats.u[sel]),
        np.ascontiguousarray(splats.v[sel]),
        np.ascontiguousarray(splats.conic[sel]),
        np.ascontiguousarray(splats.alpha[sel]),
        np.ascontiguousarray(splats.rgb[sel]),
        np.ascontiguousarray(splats.depth[sel]),
    )


def _tile_forward(splats, sel, x0, x1, y0, y1, background, config):
    """Composite one tile; returns (color, depth, alpha) tile images."""
    shape = (y1 - y0, x1 - x0)
    color = np.empty(shape + (3,))
    depth = np.zeros(shape)
    alpha = np.zeros(shape)
    if sel.size == 0:
        color[:] = background
        return color, depth, alpha
    u, v, conic, al, rgb, z = _tile_arrays(splats, sel)
    _composite_kernel(
        x0, y0, shape[0], shape[1], u, v, conic, al, rgb, z,
        background, config.footprint_radius * config.footprint_radius,
        config.density_clip, config.min_transmittance, config.alpha_floor,
        color, depth, alpha,
    )
    return color, depth, alpha


def _tile_backward(splats, sel, x0, x1, y0, y1, background, config, target_grad):
    """Per-tile gradients w.r.t. (alpha, conic, u, v, rgb) of selected splats."""
    if sel.size == 0:
        return None
    u, v, conic, al, rgb, z = _tile_arrays(splats, sel)
    m = sel.size
    d_alpha = np.zeros(m)
    d_conic = np.zeros((m, 3))
    d_u = np.zeros(m)
    d_v = np.zeros(m)
    d_rgb = np.zeros((m, 3))
    _backward_kernel(
        x0, y0, y1 - y0, x1 - x0, u, v, conic, al, rgb, z,
        background, config.footprint_radius * config.footprint_radius,
        config.density_clip, config.min_transmittance,
        np.ascontiguousarray(target_grad[y0:y1, x0:x1]),
        d_alpha, d_conic, d_u, d_v, d_rgb,
    )
    return d_alpha, d_conic, d_u, d_v, d_rgb


def _run_tiles(jobs, threads: int):
    """Run tile jobs; results come back in submission order regardless of
    completion order, which keeps multi-threaded runs bit-identical."""
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _render_impl(gaussians, intrinsics, pose, width, height, background, config, target_grad):
    """Shared forward/backward driver.

    `target_grad` may be None (forward only), an (H, W, 3) array, or a
    callable mapping the RenderOutput to (aux, gradient image) so the loss
    can be computed from the very render being differentiated.
    """
    width = intrinsics.width_px if width is None else int(width)
    height = intrinsics.height_px if height is None else int(height)
    if width < 1 or height < 1:
        raise ValueError("raster dimensions must be positive")
    background = np.asarray(background, dtype=np.float64).reshape(3)
    grad_fn = target_grad if callable(target_grad) else None
    if target_grad is not None and grad_fn is None:
        target_grad = np.asarray(target_grad, dtype=np.float64)
        if target_grad.shape != (height, width, 3):
            raise ValueError(
                f"target_grad shape {target_grad.shape} does not match raster "
                f"{height}x{width}x3"
            )

    splats = _prepare(gaussians, intrinsics.fov_rad, pose, width, height, config)
    color = np.empty((height, width, 3))
    depth = np.empty((height, width))
    alpha = np.empty((height, width))

    rects = _tiles(width, height, config.tile_size)
    sels = [_tile_selection(splats, *r) for r in rects]
    want_grads = target_grad is not None
    threads = config.effective_threads()

    fwd_jobs = [
        (lambda r=rect, s=sel: _tile_forward(splats, s, *r, background, config))
        for rect, sel in zip(rects, sels)
    ]
    fwd = _run_tiles(fwd_jobs, threads)
    for (x0, x1, y0, y1), (c, d, a) in zip(rects, fwd):
        color[y0:y1, x0:x1] = c
        depth[y0:y1, x0:x1] = d
        alpha[y0:y1, x0:x1] = a
    out = RenderOutput(color=color, depth=depth, alpha=alpha)
    if not want_grads:
        return out, None, None

    aux = None
    if grad_fn is not None:
        aux, target_grad = grad_fn(out)
        target_grad = np.asarray(target_grad, dtype=np.float64)
        if target_grad.shape != (height, width, 3):
            raise ValueError("gradient callable must return an (H, W, 3) image")

    bwd_jobs = [
        (lambda r=rect, s=sel: _tile_backward(
            splats, s, *r, background, config, target_grad
        ))
        for rect, sel in zip(rects, sels)
    ]
    bwd = _run_tiles(bwd_jobs, threads)

    m = splats.idx.size
    d_alpha = np.zeros(m)
    d_conic = np.zeros((m, 3))
    d_u = np.zeros(m)
    d_v = np.zeros(m)
    d_rgb = np.zeros((m, 3))
    # Merge in fixed tile order so accumulation is thread-count invariant.
    for sel, grads in zip(sels, bwd):
        if grads is None:
            continue
        t_alpha, t_conic, t_u, t_v, t_rgb = grads
        d_alpha[sel] += t_alpha
        d_conic[sel] += t_conic
        d_u[sel] += t_u
        d_v[sel] += t_v
        d_rgb[sel] += t_rgb

    grads = _chain_to_parameters(
        gaussians, splats, pose, intrinsics.fov_rad, width, height,
        d_alpha, d_conic, d_u, d_v, d_rgb,
    )
    return out, grads, aux


def render(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    width: int | None = None,
    height: int | None = None,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
) -> RenderOutput:
    """Rasterize a GaussianSet as seen from `pose`.

    `width`/`height` default to the intrinsics' raster size; when given they
    define the raster, and the focal length is re-derived from the FOV angle
    so the same camera can be rendered at any resolution. An empty set
    renders as the background with zero alpha and depth.
    """
    out, _, _ = _render_impl(gaussians, intrinsics, pose, width, height, background, config, None)
    return out


def render_depth_only(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    width: int | None = None,
    height: int | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Expected-depth channel of `render` (shared code path)."""
    return render(gaussians, intrinsics, pose, width, height, (0.0, 0.0, 0.0), config).depth


def render_with_gradients(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    target_grad: np.ndarray,
    width: int | None = None,
    height: int | None = None,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
) -> tuple[RenderOutput, SplatGradients]:
    """Forward render plus exact gradients of <target_grad, color>.

    `target_grad` may also be a callable RenderOutput -> (aux, grad image);
    use `render_with_loss` for that form.
    """
    out, grads, _ = _render_impl(
        gaussians, intrinsics, pose, width, height, background, config, target_grad
    )
    return out, grads


def render_with_loss(
    gaussians: GaussianSet,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    loss_fn,
    width: int | None = None,
    height: int | None = None,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = DEFAULT_CONFIG,
):
    """Render, evaluate `loss_fn(output) -> (aux, grad image)`, and return
    (output, gradients, aux). The forward intermediates are reused by the
    backward pass, so the loss is differentiated against this exact render.
    """
    return _render_impl(
        gaussians, intrinsics, pose, width, height, background, config, loss_fn
    )


def project_gaussian(
    center: np.ndarray,
    cov3d: np.ndarray,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    config: RenderConfig = DEFAULT_CONFIG,
):
    """Project one Gaussian; returns (mean2d, cov2d, depth_cam) or None if culled.

    cov2d includes the low-pass blur term. Culling covers both behind-camera
    primitives and footprints fully outside the extended image bounds.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(3, 3)
    width, height = intrinsics.width_px, intrinsics.height_px
    focal, cx, cy = _raster_intrinsics(intrinsics.fov_rad, width, height)

    t = pose.rotation.T @ (center - pose.translation)
    if t[2] <= config.near_clip:
        return None
    u = focal * t[0] / t[2] + cx
    v = focal * t[1] / t[2] + cy
    J = np.array([
        [focal / t[2], 0.0, -focal * t[0] / (t[2] * t[2])],
        [0.0, focal / t[2], -focal * t[1] / (t[2] * t[2])],
    ])
    cov_view = pose.rotation.T @ cov3d @ pose.rotation
    cov2d = J @ cov_view @ J.T + config.blur * np.eye(2)

    mid = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
    lam_max = mid + math.sqrt(
        max((0.5 * (cov2d[0, 0] - cov2d[1, 1])) ** 2 + cov2d[0, 1] ** 2, 0.0)
    )
    r = config.footprint_radius * math.sqrt(max(lam_max, 0.0))
    mx, my = config.cull_margin * width, config.cull_margin * height
    if u + r < -mx or u - r > (width - 1) + mx or v + r < -my or v - r > (height - 1) + my:
        return None
    return (u, v), cov2d, float(t[2])


def _chain_to_parameters(
    gaussians, splats, pose, fov_rad, width, height,
    d_alpha, d_conic, d_u, d_v, d_rgb,
) -> SplatGradients:
    n = len(gaussians)
    k = (gaussians.sh_degree + 1) ** 2
    out = SplatGradients(
        d_centers=np.zeros((n, 3)),
        d_quats=np.zeros((n, 4)),
        d_log_scales=np.zeros((n, 3)),
        d_opacity_logits=np.zeros(n),
        d_sh=np.zeros((n, k, 3)),
        d_rotation=np.zeros((3, 3)),
        d_translation=np.zeros(3),
        d_focal=0.0,
    )
    m = splats.idx.size
    if m == 0:
        return out

    focal, _, _ = _raster_intrinsics(fov_rad, width, height)
    R_wv = pose.rotation.T
    sel_idx = splats.idx  # unique by construction

    # opacity: a = sigmoid(logit) * g
    alpha = splats.alpha
    d_logit = d_alpha * alpha * (1.0 - alpha)

    # conic -> cov2d: Q = C2^-1, so dL/dC2 = -Q (dL/dQ) Q
    dQ = np.empty((m, 2, 2))
    dQ[:, 0, 0] = d_conic[:, 0]
    dQ[:, 0, 1] = 0.5 * d_conic[:, 1]
    dQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    dQ[:, 1, 1] = d_conic[:, 2]
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0] = splats.conic[:, 0]
    Q[:, 0, 1] = splats.conic[:, 1]
    Q[:, 1, 0] = splats.conic[:, 1]
    Q[:, 1, 1] = splats.conic[:, 2]
    dC2 = -Q @ dQ @ Q

    # cov2d = J cov_view J^T + blur I
    J = splats.jac
    Mv = splats.cov_view
    dC2_sym = dC2 + np.transpose(dC2, (0, 2, 1))
    dJ = dC2_sym @ J @ Mv
    dMv = np.transpose(J, (0, 2, 1)) @ dC2 @ J

    # cov_view = R_wv cov3d R_wv^T
    dcov3d = R_wv.T[None] @ dMv @ R_wv[None]
    dMv_sym = dMv + np.transpose(dMv, (0, 2, 1))
    dRwv_cov = np.einsum("nij,njk->ik", dMv_sym, R_wv[None] @ splats.cov3d)

    d_quats_sel, d_log_scales_sel = build_covariance_batch_vjp(
        gaussians.quats[sel_idx], gaussians.log_scales[sel_idx], dcov3d
    )

    # J and (u, v) depend on the view-frame point t and the focal length.
    tx, ty, tz = splats.t[:, 0], splats.t[:, 1], splats.t[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    d_t = np.zeros((m, 3))
    d_t[:, 0] = dJ[:, 0, 2] * (-focal * inv_z2)
    d_t[:, 1] = dJ[:, 1, 2] * (-focal * inv_z2)
    d_t[:, 2] = (dJ[:, 0, 0] + dJ[:, 1, 1]) * (-focal * inv_z2) + (
        dJ[:, 0, 2] * tx + dJ[:, 1, 2] * ty
    ) * (2.0 * focal * inv_z2 * inv_z)
    d_focal = float(
        np.sum((dJ[:, 0, 0] + dJ[:, 1, 1]) * inv_z)
        - np.sum((dJ[:, 0, 2] * tx + dJ[:, 1, 2] * ty) * inv_z2)
    )

    d_t[:, 0] += d_u * focal * inv_z
    d_t[:, 1] += d_v * focal * inv_z
    d_t[:, 2] += -(d_u * tx + d_v * ty) * focal * inv_z2
    d_focal += float(np.sum((d_u * tx + d_v * ty) * inv_z))

    # SH color: rgb(dirs) with dirs = (mu - T) / |mu - T|
    d_sh_sel, d_dirs = eval_sh_batch_vjp(
        gaussians.sh_coeffs[sel_idx], splats.dirs, gaussians.sh_degree, d_rgb
    )
    safe = np.maximum(splats.dist, 1e-12)[:, None]
    d_diff = (d_dirs - splats.dirs * np.sum(splats.dirs * d_dirs, axis=1, keepdims=True)) / safe
    d_diff[splats.dist < 1e-12] = 0.0

    # t = R_wv (mu - T):  d_mu = R d_t; d_T collects -R d_t and the SH term.
    d_centers_sel = d_t @ R_wv + d_diff
    d_translation = -(np.sum(d_t, axis=0) @ R_wv) - np.sum(d_diff, axis=0)
    diff_world = gaussians.centers[sel_idx] - pose.translation
    d_R_pose = np.einsum("ni,nj->ij", diff_world, d_t) + dRwv_cov.T

    out.d_centers[sel_idx] = d_centers_sel
    out.d_quats[sel_idx] = d_quats_sel
    out.d_log_scales[sel_idx] = d_log_scales_sel
    out.d_opacity_logits[sel_idx] = d_logit
    out.d_sh[sel_idx] = d_sh_sel
    out.d_rotation = d_R_pose
    out.d_translation = d_translation
    out.d_focal = float(d_focal)
    return out
