"""Gaussian primitives: depth activation, lifting, covariance, SH color.

A GaussianSet stores raw (pre-activation) parameters: scales as logs,
opacities as logits, rotations as unnormalized quaternions. Activations are
exp for scale and sigmoid for opacity, matching the usual splatting
convention so gradients stay well-posed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import CameraIntrinsics, CameraPose, quat_to_matrix, quat_to_matrix_batch

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 100.0

# Real spherical harmonics constants, degrees 0..2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

_GAUSSIAN_MAGIC = b"GSPB"
_GAUSSIAN_VERSION = 1


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    arr = np.asarray(x, dtype=np.float64)
    a = np.atleast_1d(arr)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if arr.ndim == 0 else out


@dataclass(frozen=True)
class GaussianSet:
    """Raw per-primitive parameters; centers live in the canonical frame."""

    centers: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4), unnormalized (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray  # (N, k, 3) with k = (degree + 1)^2
    sh_degree: int = 0

    def __post_init__(self):
        n = self.centers.shape[0]
        k = (self.sh_degree + 1) ** 2
        shapes = {
            "centers": (self.centers, (n, 3)),
            "quats": (self.quats, (n, 4)),
            "log_scales": (self.log_scales, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "sh_coeffs": (self.sh_coeffs, (n, k, 3)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {want}")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)


@dataclass(frozen=True)
class DepthMap:
    """Pre-activation depth logits with near/far bounds."""

    raw: np.ndarray  # (H, W)
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    def activated(self) -> np.ndarray:
        return activate_depth(self.raw, self.near, self.far)


def activate_depth(raw, near: float, far: float):
    """Sigmoid of the logit, linearly interpolated between near and far.

    Strictly inside (near, far) and monotone increasing in the logit.
    """
    if not (0.0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near} far={far}")
    return near + sigmoid(raw) * (far - near)


def activate_depth_grad(raw, near: float, far: float):
    """d(depth)/d(raw) of the activation above."""
    if not (0.0 < near < far):
        raise ValueError(f"need 0 < near < far, got near={near} far={far}")
    s = sigmoid(raw)
    return s * (1.0 - s) * (far - near)


def pixel_rays(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """Camera-frame ray directions (H, W, 3) with unit z, one per pixel center."""
    f = intrinsics.focal_px
    cx, cy = intrinsics.principal_point
    u = (np.arange(width, dtype=np.float64) - cx) / f
    v = (np.arange(height, dtype=np.float64) - cy) / f
    rays = np.empty((height, width, 3))
    rays[..., 0] = u[None, :]
    rays[..., 1] = v[:, None]
    rays[..., 2] = 1.0
    return rays


def lift_depth_to_centers(
    depth: DepthMap, intrinsics: CameraIntrinsics, pose: CameraPose
) -> np.ndarray:
    """Unproject every pixel at its activated depth into the canonical frame.

    Returns (H, W, 3). Each center lies on its pixel's viewing ray at a
    camera-frame z strictly inside (near, far).
    """
    h, w = depth.shape
    if (w, h) != (intrinsics.width_px, intrinsics.height_px):
        raise ValueError(
            f"depth map {w}x{h} does not match intrinsics "
            f"{intrinsics.width_px}x{intrinsics.height_px}"
        )
    rays = pixel_rays(intrinsics, w, h)
    cam_points = depth.activated()[..., None] * rays
    return cam_points @ pose.rotation.T + pose.translation


def build_covariance(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 world covariance R S S^T R^T from a quaternion and log-scales."""
    R = quat_to_matrix(quat)
    s = np.exp(np.asarray(log_scale, dtype=np.float64).reshape(3))
    M = R * s[None, :]
    return M @ M.T


def build_covariance_batch(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Vectorized build_covariance: (N, 4), (N, 3) -> (N, 3, 3)."""
    R = quat_to_matrix_batch(quats)
    s = np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    M = R * s[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def build_covariance_batch_vjp(
    quats: np.ndarray, log_scales: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <d_cov, Sigma> w.r.t. raw quaternions and log-scales.

    Returns (d_quats (N,4) as matrix-level gradient to feed the quaternion
    vjp, d_log_scales (N,3)). d_cov need not be symmetric; it is symmetrized
    internally since Sigma is.
    """
    from .geometry import quat_to_matrix_batch_vjp

    R = quat_to_matrix_batch(quats)
    s = np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))
    M = R * s[:, None, :]
    g = np.asarray(d_cov, dtype=np.float64)
    sym = g + np.transpose(g, (0, 2, 1))
    d_M = sym @ M  # d<G, M M^T>/dM = (G + G^T) M
    d_R = d_M * s[:, None, :]
    d_s = np.sum(R * d_M, axis=1)  # diag of R^T d_M
    d_log_scales = d_s * s
    d_quats = quat_to_matrix_batch_vjp(quats, d_R)
    return d_quats, d_log_scales


def _sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions (..., 3) -> (..., k)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=-1)


def _sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Per-direction-component partials of the basis: (..., k, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [
            np.stack([zero, np.full_like(x, -SH_C1), zero], axis=-1),
            np.stack([zero, zero, np.full_like(x, SH_C1)], axis=-1),
            np.stack([np.full_like(x, -SH_C1), zero, zero], axis=-1),
        ]
    if degree >= 2:
        rows += [
            np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], axis=-1),
            np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], axis=-1),
            np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], axis=-1),
            np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], axis=-1),
            np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate SH color for one primitive: 0.5 + sum c * Y, clamped to [0, 1]."""
    k = (degree + 1) ** 2
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != (k, 3):
        raise ValueError(f"expected {k}x3 coefficients for degree {degree}, got {c.shape}")
    d = np.asarray(view_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    basis = _sh_basis(d, degree)
    return np.clip(0.5 + basis @ c, 0.0, 1.0)


def eval_sh_batch(coeffs: np.ndarray, view_dirs: np.ndarray, degree: int) -> np.ndarray:
    """Vectorized eval_sh: (N, k, 3) coeffs, (N, 3) unit dirs -> (N, 3) rgb."""
    basis = _sh_basis(view_dirs, degree)  # (N, k)
    return np.clip(0.5 + np.einsum("nk,nkc->nc", basis, coeffs), 0.0, 1.0)


def eval_sh_batch_vjp(
    coeffs: np.ndarray, view_dirs: np.ndarray, degree: int, d_rgb: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the clamped SH color w.r.t. coefficients and directions.

    The clamp zeroes gradients where the unclamped value left [0, 1].
    Returned direction gradient is w.r.t. the (unit) direction; callers chain
    through their own normalization.
    """
    basis = _sh_basis(view_dirs, degree)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs)
    mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    g = np.asarray(d_rgb, dtype=np.float64) * mask
    d_coeffs = basis[..., :, None] * g[..., None, :]
    bgrad = _sh_basis_grad(view_dirs, degree)  # (N, k, 3)
    # d rgb_c / d dir_a = sum_k coeffs[k, c] * bgrad[k, a]
    d_dirs = np.einsum("nkc,nka,nc->na", coeffs, bgrad, g)
    return d_coeffs, d_dirs


def save_gaussians(
    gs: GaussianSet, path, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR
) -> None:
    """Write the binary record stream plus a JSON sidecar.

    Layout (little-endian): magic "GSPB", u32 version, u64 count, u32 degree,
    then per primitive center (3 f32), quat (4 f32), log_scale (3 f32),
    opacity_logit (1 f32), sh coefficients (k*3 f32).
    """
    path = str(path)
    k = (gs.sh_degree + 1) ** 2
    with open(path, "wb") as fh:
        fh.write(_GAUSSIAN_MAGIC)
        fh.write(struct.pack("<IQI", _GAUSSIAN_VERSION, len(gs), gs.sh_degree))
        per = np.concatenate(
            [
                gs.centers,
                gs.quats,
                gs.log_scales,
                gs.opacity_logits[:, None],
                gs.sh_coeffs.reshape(len(gs), k * 3),
            ],
            axis=1,
        ).astype("<f4")
        fh.write(per.tobytes())
    with open(path + ".json", "w") as fh:
        json.dump({"sh_degree": gs.sh_degree, "near": near, "far": far}, fh, indent=2)


def load_gaussians(path) -> tuple[GaussianSet, dict]:
    """Read a gaussian record stream; returns (set, sidecar metadata)."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _GAUSSIAN_MAGIC:
        raise ParseError("bad magic in gaussian file", path, 0)
    try:
        version, count, degree = struct.unpack_from("<IQI", data, 4)
    except struct.error as e:
        raise ParseError(f"truncated header: {e}", path, 4) from e
    if version != _GAUSSIAN_VERSION:
        raise ParseError(f"unsupported version {version}", path, 4)
    k = (degree + 1) ** 2
    stride = (3 + 4 + 3 + 1 + k * 3) * 4
    body = data[20:]
    if len(body) != count * stride:
        raise ParseError(
            f"expected {count * stride} record bytes, found {len(body)}",
            path,
            20 + min(len(body), count * stride),
        )
    per = np.frombuffer(body, dtype="<f4").reshape(count, stride // 4).astype(np.float64)
    gs = GaussianSet(
        centers=per[:, 0:3],
        quats=per[:, 3:7],
        log_scales=per[:, 7:10],
        opacity_logits=per[:, 10],
        sh_coeffs=per[:, 11:].reshape(count, k, 3),
        sh_degree=int(degree),
    )
    meta = {"sh_degree": int(degree), "near": DEFAULT_NEAR, "far": DEFAULT_FAR}
    try:
        with open(path + ".json") as fh:
            meta.update(json.load(fh))
    except FileNotFoundError:
        pass
    return gs, meta
