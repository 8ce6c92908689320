"""Synthetic ground-truth scenes, view sampling, and dataset I/O.

Scenes are generated directly in the canonical frame: camera 0 sits at the
origin looking down +z, so the first pose is the identity by construction.
Ground-truth images come from the package's own renderer and are quantized
to the 8-bit grid at generation time, which makes saving and reloading a
sequence lossless.

Sequence directory layout (little-endian binary formats):

    frames/%06d.png      8-bit color frames
    depth/%06d.pfm       float32 depth maps (optional)
    poses.json           camera-to-canonical poses
    intrinsics.json      shared FOV intrinsics
    gaussians.bin(.json) ground-truth Gaussian primitives (optional)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParseError, SamplingError
from .gaussians import GaussianSet, SH_C0, load_gaussians, save_gaussians
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    intrinsics_from_json,
    intrinsics_to_json,
    poses_from_json,
    poses_to_json,
)
from .imgio import quantize_u8, read_pfm, read_png, write_pfm, write_png
from .renderer import DEFAULT_CONFIG, RenderConfig, render

SCENE_KINDS = ("gaussian-cloud", "textured-plane", "box-room")
TRAJECTORIES = ("arc", "line", "orbit")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "gaussian-cloud"
    n_primitives: int = 300
    extent: float = 3.0
    texture_seed: int = 0
    trajectory: str = "arc"
    trajectory_span: float = 25.0  # degrees for arc/orbit, scene units for line
    n_frames: int = 5
    width: int = 32
    height: int = 32
    fov_deg: float = math.degrees(2.0 * math.atan(0.5))
    near: float = 0.1
    far: float = 100.0
    min_coverage: float = 0.5

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        if self.n_primitives < 1 or self.extent <= 0:
            raise ValueError("need positive primitive count and extent")
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError("fov_deg must lie in (0, 180)")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(math.radians(self.fov_deg), self.width, self.height)


@dataclass(frozen=True)
class MultiViewSample:
    context: tuple[int, ...]
    target: tuple[int, ...]
    sequence_id: str = ""

    def __post_init__(self):
        ctx, tgt = tuple(self.context), tuple(self.target)
        if any(b <= a for a, b in zip(ctx, ctx[1:])) or any(
            b <= a for a, b in zip(tgt, tgt[1:])
        ):
            raise ValueError("indices must be strictly increasing")
        if set(ctx) & set(tgt):
            raise ValueError("context and target indices must be disjoint")
        if ctx and min(ctx) < 0 or tgt and min(tgt) < 0:
            raise ValueError("indices must be non-negative")
        object.__setattr__(self, "context", ctx)
        object.__setattr__(self, "target", tgt)


@dataclass
class GeneratedScene:
    spec: SceneSpec
    seed: int
    gaussians: GaussianSet
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    images: np.ndarray  # (F, H, W, 3), 8-bit-grid values
    depths: np.ndarray  # (F, H, W)

    @property
    def scene_scale(self) -> float:
        """Median rendered depth; the unit for relative perturbations."""
        valid = self.depths[self.depths > 0]
        return float(np.median(valid)) if valid.size else 1.0


def _look_at(position: np.ndarray, target: np.ndarray) -> CameraPose:
    """Pose whose camera at `position` looks at `target` (+z forward, +y down)."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    down_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(down_world, forward)
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight up/down: pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    down = np.cross(forward, right)
    return CameraPose(np.stack([right, down, forward], axis=1), position)


def _trajectory(spec: SceneSpec, center_dist: float) -> list[CameraPose]:
    center = np.array([0.0, 0.0, center_dist])
    poses = []
    if spec.trajectory in ("arc", "orbit"):
        if spec.trajectory == "arc":
            span = math.radians(spec.trajectory_span)
            angles = [span * v / max(spec.n_frames - 1, 1) for v in range(spec.n_frames)]
        else:
            step = math.radians(spec.trajectory_span) / spec.n_frames
            angles = [step * v for v in range(spec.n_frames)]
        for th in angles:
            pos = center + center_dist * np.array([math.sin(th), 0.0, -math.cos(th)])
            poses.append(_look_at(pos, center))
    else:  # line
        step = spec.trajectory_span / max(spec.n_frames - 1, 1)
        for v in range(spec.n_frames):
            poses.append(_look_at(np.array([v * step, 0.0, 0.0]), center))
    return poses


def _smooth_field(points_2d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Band-limited random color field over 2D coordinates, in [0.1, 0.9]."""
    n_waves = 6
    freq = rng.uniform(0.5, 3.0, (n_waves, 2)) * rng.choice([-1.0, 1.0], (n_waves, 2))
    phase = rng.uniform(0.0, 2.0 * math.pi, (n_waves, 3))
    amp = rng.uniform(0.3, 1.0, (n_waves, 3))
    arg = points_2d @ freq.T  # (N, n_waves)
    # sum_w amp[w, c] * sin(arg[n, w] + phase[w, c])
    val = np.einsum("nwc,wc->nc", np.sin(arg[:, :, None] + phase[None, :, :]), amp)
    val = val / np.max(np.abs(val)) if np.max(np.abs(val)) > 0 else val
    return 0.5 + 0.4 * val


def _grid_on_plane(n: int, extent: float, rng: np.random.Generator):
    g = int(math.ceil(math.sqrt(n)))
    xs = (np.arange(g) + 0.5) / g * extent - extent / 2.0
    xx, yy = np.meshgrid(xs, xs)
    pts = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)[:n]
    jitter = rng.uniform(-0.25, 0.25, pts.shape) * (extent / g)
    return pts + jitter, extent / g


def _build_primitives(spec: SceneSpec, center_dist: float, rng_geom, rng_color) -> GaussianSet:
    focal = spec.intrinsics().focal_px
    if spec.kind == "gaussian-cloud":
        n = spec.n_primitives
        centers = np.column_stack([
            rng_geom.uniform(-spec.extent / 2, spec.extent / 2, n),
            rng_geom.uniform(-spec.extent / 2, spec.extent / 2, n),
            center_dist + rng_geom.uniform(-spec.extent / 2, spec.extent / 2, n),
        ])
        quats = rng_geom.normal(size=(n, 4))
        sigma_px = rng_geom.uniform(0.7, 1.8, (n, 3))
        log_scales = np.log(sigma_px * center_dist / focal)
        opacity = rng_geom.uniform(0.5, 2.5, n)
        rgb = rng_color.uniform(0.1, 0.9, (n, 3))
    else:
        if spec.kind == "textured-plane":
            pts, spacing = _grid_on_plane(spec.n_primitives, spec.extent, rng_geom)
            centers = np.column_stack([pts[:, 0], pts[:, 1], np.full(len(pts), center_dist)])
            rgb = _smooth_field(pts / spec.extent, rng_color)
        else:  # box-room: back wall plus floor/ceiling/side walls
            per = max(spec.n_primitives // 5, 1)
            half = spec.extent / 2.0
            z0, z1 = center_dist - half, center_dist + half
            faces = []
            colors = []
            for fi in range(5):
                pts, spacing = _grid_on_plane(per, spec.extent, rng_geom)
                uv = pts  # reuse grid coords per face
                if fi == 0:  # back wall
                    xyz = np.column_stack([uv[:, 0], uv[:, 1], np.full(per, z1)])
                elif fi == 1:  # floor (+y is down in camera coords)
                    xyz = np.column_stack([uv[:, 0], np.full(per, half), center_dist + uv[:, 1]])
                elif fi == 2:  # ceiling
                    xyz = np.column_stack([uv[:, 0], np.full(per, -half), center_dist + uv[:, 1]])
                elif fi == 3:  # left wall
                    xyz = np.column_stack([np.full(per, -half), uv[:, 0], center_dist + uv[:, 1]])
                else:  # right wall
                    xyz = np.column_stack([np.full(per, half), uv[:, 0], center_dist + uv[:, 1]])
                faces.append(xyz)
                colors.append(_smooth_field(uv / spec.extent + fi, rng_color))
            centers = np.concatenate(faces)[: spec.n_primitives]
            rgb = np.concatenate(colors)[: spec.n_primitives]
        n = centers.shape[0]
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        log_scales = np.full((n, 3), math.log(0.7 * spacing))
        opacity = np.full(n, 2.0)

    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    return GaussianSet(centers, quats, log_scales, opacity, sh, 0)


def _coverage(gaussians: GaussianSet, intrinsics, pose) -> float:
    t = (gaussians.centers - pose.translation) @ pose.rotation
    f = intrinsics.focal_px
    cx, cy = intrinsics.principal_point
    front = t[:, 2] > 0
    z = np.where(front, t[:, 2], 1.0)
    u = f * t[:, 0] / z + cx
    v = f * t[:, 1] / z + cy
    inside = front & (u >= 0) & (u <= intrinsics.width_px - 1) & (v >= 0) & (v <= intrinsics.height_px - 1)
    return float(np.mean(inside))


def generate_scene(
    spec: SceneSpec,
    seed: int,
    render_config: RenderConfig = DEFAULT_CONFIG,
    background=(0.0, 0.0, 0.0),
) -> GeneratedScene:
    """Deterministic ground-truth scene: primitives, trajectory, renders.

    All randomness flows from (seed, spec.texture_seed) through spawned
    numpy SeedSequence children. Images are quantized to the 8-bit grid so
    the saved sequence round-trips losslessly; depths are the renderer's
    expected-depth output, unquantized.
    """
    root = np.random.SeedSequence((seed, spec.texture_seed))
    child_geom, child_color = root.spawn(2)
    rng_geom = np.random.default_rng(child_geom)
    rng_color = np.random.default_rng(child_color)

    center_dist = 2.0 * spec.extent
    gaussians = _build_primitives(spec, center_dist, rng_geom, rng_color)
    poses = _trajectory(spec, center_dist)
    intrinsics = spec.intrinsics()

    for i, pose in enumerate(poses):
        cov = _coverage(gaussians, intrinsics, pose)
        if cov < spec.min_coverage:
            raise GenerationError(
                f"frame {i} sees only {cov:.0%} of primitives "
                f"(need >= {spec.min_coverage:.0%}); widen the FOV or shrink "
                f"the trajectory span"
            )

    images = np.empty((spec.n_frames, spec.height, spec.width, 3))
    depths = np.empty((spec.n_frames, spec.height, spec.width))
    for i, pose in enumerate(poses):
        out = render(gaussians, intrinsics, pose, background=background, config=render_config)
        images[i] = quantize_u8(out.color)
        depths[i] = out.depth
    return GeneratedScene(spec, seed, gaussians, poses, intrinsics, images, depths)


@dataclass(frozen=True)
class CurriculumSchedule:
    start: int
    end: int
    ramp_steps: int
    shape: str = "linear"  # linear | staircase

    def __post_init__(self):
        if not (1 <= self.start <= self.end):
            raise ValueError("need 1 <= start <= end")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")
        if self.shape not in ("linear", "staircase"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")


def curriculum_interval(step: int, schedule: CurriculumSchedule) -> int:
    """Frame interval at a training step; monotone, clamped to [start, end]."""
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = min(step / schedule.ramp_steps, 1.0)
    span = schedule.end - schedule.start
    if schedule.shape == "linear":
        value = schedule.start + int(math.floor(frac * span + 0.5))
    else:
        value = schedule.start + int(math.floor(frac * span))
    return min(max(value, schedule.start), schedule.end)


def sample_context_target(
    seq_len: int,
    interval: int,
    n_context: int,
    n_target: int,
    rng: np.random.Generator,
    sequence_id: str = "",
) -> MultiViewSample:
    """Fixed-endpoint context sampling with targets strictly between.

    The first and last context frames span interval*(n_context-1) frames
    (clamped to the sequence); intermediate context views are evenly spaced
    between the endpoints; targets are drawn uniformly without replacement
    from the remaining strictly-interior frames.
    """
    if n_context < 2 or n_target < 1:
        raise ValueError("need n_context >= 2 and n_target >= 1")
    if interval < 1:
        raise ValueError("interval must be >= 1")
    if seq_len < (n_context - 1) + 2:
        raise ValueError(f"sequence of {seq_len} frames is too short")

    span = min(interval * (n_context - 1), seq_len - 1)
    first = int(rng.integers(0, seq_len - span))
    last = first + span
    context = tuple(
        first + int(round(k * span / (n_context - 1))) for k in range(n_context)
    )
    pool = [i for i in range(first + 1, last) if i not in context]
    if len(pool) < n_target:
        raise SamplingError(
            f"no admissible target frames between contexts {context} "
            f"(need {n_target}, have {len(pool)})"
        )
    target = tuple(sorted(int(i) for i in rng.choice(pool, n_target, replace=False)))
    return MultiViewSample(context, target, sequence_id)


@dataclass
class LoadedSequence:
    images: np.ndarray  # (F, H, W, 3)
    poses: list[CameraPose] | None
    depths: np.ndarray | None
    intrinsics: CameraIntrinsics | None
    gaussians: GaussianSet | None = None
    gaussian_meta: dict | None = None


def save_sequence(directory, scene: GeneratedScene) -> None:
    """Write a generated scene in the documented sequence layout."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    for i in range(scene.images.shape[0]):
        write_png(root / "frames" / f"{i:06d}.png", scene.images[i])
        write_pfm(root / "depth" / f"{i:06d}.pfm", scene.depths[i])
    (root / "poses.json").write_text(poses_to_json(scene.poses))
    (root / "intrinsics.json").write_text(intrinsics_to_json(scene.intrinsics))
    save_gaussians(scene.gaussians, root / "gaussians.bin",
                   near=scene.spec.near, far=scene.spec.far)


def load_sequence(directory) -> LoadedSequence:
    """Load a sequence directory; optional files yield None, never defaults."""
    root = Path(directory)
    frame_dir = root / "frames"
    if not frame_dir.is_dir():
        raise ParseError("missing frames/ directory", str(root))
    frame_files = sorted(frame_dir.glob("*.png"))
    if not frame_files:
        raise ParseError("no frames found", str(frame_dir))
    images = np.stack([read_png(p) for p in frame_files])

    poses = None
    if (root / "poses.json").exists():
        try:
            poses = poses_from_json((root / "poses.json").read_text())
        except ValueError as e:
            raise ParseError(f"bad poses.json: {e}", str(root / "poses.json")) from e

    intrinsics = None
    if (root / "intrinsics.json").exists():
        try:
            intrinsics = intrinsics_from_json((root / "intrinsics.json").read_text())
        except ValueError as e:
            raise ParseError(f"bad intrinsics.json: {e}", str(root / "intrinsics.json")) from e

    depths = None
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        depth_files = sorted(depth_dir.glob("*.pfm"))
        if depth_files:
            if len(depth_files) != len(frame_files):
                raise ParseError(
                    f"{len(depth_files)} depth maps for {len(frame_files)} frames",
                    str(depth_dir),
                )
            depths = np.stack([read_pfm(p) for p in depth_files])

    gaussians = meta = None
    if (root / "gaussians.bin").exists():
        gaussians, meta = load_gaussians(root / "gaussians.bin")
    return LoadedSequence(images, poses, depths, intrinsics, gaussians, meta)
