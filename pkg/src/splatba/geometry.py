"""Camera geometry: intrinsics, poses, rotation parameterizations, projection.

Conventions used throughout the package:

* The canonical frame is the camera frame of the first view. A pose maps
  view-camera coordinates into the canonical frame, ``X_canon = R @ X_view + T``;
  rendering a view therefore applies the inverse transform.
* A single field-of-view angle is shared by both axes; the focal length in
  pixels is derived from the image width. The principal point sits at the
  exact image center ``((W-1)/2, (H-1)/2)`` with pixel centers at integer
  coordinates.
* The camera looks down +z in its own frame; +x is right and +y is down in
  image coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError

# Degeneracy guards (see module tests for boundary behavior).
EPS_GRAM_SCHMIDT = 1e-8
EPS_HOMOGENEOUS = 1e-8
EPS_TRANSLATION_NORM = 1e-8
EPS_BEHIND_CAMERA = 1e-8

_ORTHONORMALITY_TOL = 1e-6


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with one FOV angle shared by x and y."""

    fov_rad: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not (0.0 < self.fov_rad < math.pi):
            raise ValueError(f"fov_rad must lie in (0, pi), got {self.fov_rad}")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def focal_px(self) -> float:
        return fov_to_focal(self.fov_rad, self.width_px)

    @property
    def principal_point(self) -> tuple[float, float]:
        return ((self.width_px - 1) / 2.0, (self.height_px - 1) / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """Rigid transform mapping this view's camera frame to the canonical frame."""

    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        T = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHONORMALITY_TOL:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(R) - 1.0) > _ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-6")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(T))

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def inverse(self) -> "CameraPose":
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Returns self ∘ other: first apply `other`, then `self`."""
        return CameraPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from this view's frame to the canonical frame."""
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PoseParams6D:
    """Raw pose parameterization: 6D rotation plus homogeneous translation.

    rot6 holds two 3-vectors orthonormalized by Gram-Schmidt; trans_h holds
    four reals decoded as T = trans_h[:3] / trans_h[3].
    """

    rot6: np.ndarray  # (6,)
    trans_h: np.ndarray  # (4,)

    def __post_init__(self):
        r = np.asarray(self.rot6, dtype=np.float64).reshape(6)
        t = np.asarray(self.trans_h, dtype=np.float64).reshape(4)
        object.__setattr__(self, "rot6", _readonly(r))
        object.__setattr__(self, "trans_h", _readonly(t))

    @staticmethod
    def identity() -> "PoseParams6D":
        return PoseParams6D(np.array([1.0, 0, 0, 0, 1.0, 0]), np.array([0.0, 0, 0, 1.0]))

    @staticmethod
    def from_pose(pose: CameraPose) -> "PoseParams6D":
        """Encode a pose; rot6 takes the first two rotation columns."""
        R = pose.rotation
        return PoseParams6D(
            np.concatenate([R[:, 0], R[:, 1]]),
            np.concatenate([pose.translation, [1.0]]),
        )

    def decode(self) -> CameraPose:
        return CameraPose(rot6d_to_matrix(self.rot6), decode_translation(self.trans_h))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot6, self.trans_h])

    @staticmethod
    def from_vector(v: np.ndarray) -> "PoseParams6D":
        v = np.asarray(v, dtype=np.float64).reshape(10)
        return PoseParams6D(v[:6], v[6:])


def fov_to_focal(fov_rad: float, width_px: int) -> float:
    """Focal length in pixels for a given FOV angle and image width."""
    if not (0.0 < fov_rad < math.pi):
        raise ValueError(f"fov_rad must lie in (0, pi), got {fov_rad}")
    if width_px < 1:
        raise ValueError("width_px must be >= 1")
    return (width_px / 2.0) / math.tan(fov_rad / 2.0)


def fov_to_focal_grad(fov_rad: float, width_px: int) -> float:
    """d(focal)/d(fov) for the mapping above."""
    s = math.sin(fov_rad / 2.0)
    return -(width_px / 4.0) / (s * s)


def rot6d_to_matrix(rot6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into an orthonormal rotation matrix.

    The two input vectors become (after orthonormalization) the first two
    columns; the third column is their cross product.
    """
    r = np.asarray(rot6, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= EPS_GRAM_SCHMIDT:
        raise DegenerateInputError("first rotation vector has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 <= EPS_GRAM_SCHMIDT:
        raise DegenerateInputError("rotation vectors are parallel or second is near-zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rot6d_to_matrix_vjp(rot6: np.ndarray, d_matrix: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the rotation matrix back to the 6 raw inputs."""
    r = np.asarray(rot6, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2

    g = np.asarray(d_matrix, dtype=np.float64)
    d_b1 = g[:, 0].copy()
    d_b2 = g[:, 1].copy()
    d_b3 = g[:, 2]
    # b3 = b1 x b2
    d_b1 += np.cross(b2, d_b3)
    d_b2 += np.cross(d_b3, b1)
    # b2 = u2 / |u2|
    d_u2 = (d_b2 - (b2 @ d_b2) * b2) / n2
    # u2 = a2 - (b1.a2) b1
    d_a2 = d_u2 - (b1 @ d_u2) * b1
    d_b1 += -(d_u2 @ b1) * a2 - (b1 @ a2) * d_u2
    # b1 = a1 / |a1|
    d_a1 = (d_b1 - (b1 @ d_b1) * b1) / n1
    return np.concatenate([d_a1, d_a2])


def decode_translation(trans_h: np.ndarray) -> np.ndarray:
    """Homogeneous 4-vector to 3-vector translation; fails loudly near w = 0."""
    t = np.asarray(trans_h, dtype=np.float64).reshape(4)
    if abs(t[3]) <= EPS_HOMOGENEOUS:
        raise DegenerateInputError(
            f"homogeneous translation w-coordinate {t[3]!r} is below the 1e-8 guard"
        )
    return t[:3] / t[3]


def decode_translation_vjp(trans_h: np.ndarray, d_translation: np.ndarray) -> np.ndarray:
    t = np.asarray(trans_h, dtype=np.float64).reshape(4)
    g = np.asarray(d_translation, dtype=np.float64).reshape(3)
    w = t[3]
    out = np.empty(4)
    out[:3] = g / w
    out[3] = -(t[:3] @ g) / (w * w)
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) to rotation matrix; normalizes internally."""
    qv = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(qv)
    if n <= EPS_GRAM_SCHMIDT:
        raise DegenerateInputError("near-zero quaternion")
    w, x, y, z = qv / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_matrix for (N, 4) input, (N, 3, 3) output."""
    qv = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    n = np.linalg.norm(qv, axis=1)
    if np.any(n <= EPS_GRAM_SCHMIDT):
        raise DegenerateInputError("near-zero quaternion in batch")
    w, x, y, z = (qv / n[:, None]).T
    R = np.empty((qv.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_batch_vjp(q: np.ndarray, d_matrix: np.ndarray) -> np.ndarray:
    """Pull (N, 3, 3) matrix gradients back to raw (N, 4) quaternions.

    Chains through the internal normalization, so the returned gradient is
    w.r.t. the unnormalized input.
    """
    qv = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    n = np.linalg.norm(qv, axis=1)
    qn = qv / n[:, None]
    w, x, y, z = qn.T
    g = np.asarray(d_matrix, dtype=np.float64)

    zeros = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz (per-entry partials of the matrix above).
    dRdw = 2 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=1)
    dRdx = 2 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1),
    ], axis=1)
    dRdy = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1),
    ], axis=1)
    dRdz = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1),
    ], axis=1)

    d_qn = np.stack([
        np.sum(g * dRdw, axis=(1, 2)),
        np.sum(g * dRdx, axis=(1, 2)),
        np.sum(g * dRdy, axis=(1, 2)),
        np.sum(g * dRdz, axis=(1, 2)),
    ], axis=1)
    # Normalization: d_q = (I - qn qn^T) d_qn / |q|
    return (d_qn - np.sum(qn * d_qn, axis=1, keepdims=True) * qn) / n[:, None]


def normalize_poses(poses: list[CameraPose]) -> list[CameraPose]:
    """Re-express all poses relative to the first; output[0] is the identity.

    Pairwise relative transforms are preserved exactly.
    """
    if not poses:
        raise ValueError("pose list must be non-empty")
    inv0 = poses[0].inverse()
    out = [CameraPose.identity()]
    out.extend(inv0.compose(p) for p in poses[1:])
    return out


def unproject(
    pixel: tuple[float, float],
    depth: float,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
) -> np.ndarray:
    """Lift a pixel at a camera-frame depth to a canonical-frame 3D point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    f = intrinsics.focal_px
    cx, cy = intrinsics.principal_point
    u, v = pixel
    ray = np.array([(u - cx) / f, (v - cy) / f, 1.0])
    return pose.rotation @ (depth * ray) + pose.translation


def project(
    point: np.ndarray,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
) -> tuple[tuple[float, float], float] | None:
    """Project a canonical-frame point; None signals behind-camera (caller culls)."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    t = pose.rotation.T @ (p - pose.translation)
    if t[2] <= EPS_BEHIND_CAMERA:
        return None
    f = intrinsics.focal_px
    cx, cy = intrinsics.principal_point
    return (f * t[0] / t[2] + cx, f * t[1] / t[2] + cy), float(t[2])


def rotation_angle_deg(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_angular_errors(pred: CameraPose, gt: CameraPose) -> tuple[float, float]:
    """(rotation error, translation direction error), both in degrees.

    Translation error is the unsigned angle between direction vectors; no
    sign folding is applied since poses are regressed rather than recovered
    from an essential matrix. Near-zero translations: both below the 1e-8
    norm guard compare as 0°, exactly one as 90°.
    """
    rot_err = rotation_angle_deg(pred.rotation, gt.rotation)
    np_pred = np.linalg.norm(pred.translation)
    np_gt = np.linalg.norm(gt.translation)
    if np_pred < EPS_TRANSLATION_NORM and np_gt < EPS_TRANSLATION_NORM:
        trans_err = 0.0
    elif np_pred < EPS_TRANSLATION_NORM or np_gt < EPS_TRANSLATION_NORM:
        trans_err = 90.0
    else:
        c = float(pred.translation @ gt.translation) / (np_pred * np_gt)
        trans_err = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return rot_err, trans_err


def poses_to_json(poses: list[CameraPose]) -> str:
    """Serialize poses as a JSON array of rotation/translation objects."""
    records = [
        {"rotation": p.rotation.reshape(9).tolist(), "translation": p.translation.tolist()}
        for p in poses
    ]
    return json.dumps(records, indent=2)


def poses_from_json(text: str) -> list[CameraPose]:
    records = json.loads(text)
    if not isinstance(records, list):
        raise ValueError("pose file must contain a JSON array")
    poses = []
    for i, rec in enumerate(records):
        try:
            R = np.array(rec["rotation"], dtype=np.float64).reshape(3, 3)
            T = np.array(rec["translation"], dtype=np.float64).reshape(3)
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed pose record {i}: {e}") from e
        poses.append(CameraPose(R, T))
    return poses


def intrinsics_to_json(intrinsics: CameraIntrinsics) -> str:
    return json.dumps(
        {
            "fov_deg": math.degrees(intrinsics.fov_rad),
            "width": intrinsics.width_px,
            "height": intrinsics.height_px,
        },
        indent=2,
    )


def intrinsics_from_json(text: str) -> CameraIntrinsics:
    rec = json.loads(text)
    try:
        return CameraIntrinsics(math.radians(rec["fov_deg"]), int(rec["width"]), int(rec["height"]))
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed intrinsics record: {e}") from e
