"""Photometric bundle adjustment over cameras, depth maps, and Gaussians.

The loop minimizes the rendering loss on target views by first-order
optimization (Adam) of every unfrozen parameter class: depth logits,
per-pixel Gaussian parameters, per-view raw poses, and the shared FOV. The
first view stays pinned as the canonical frame throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, DivergenceError
from .gaussians import activate_depth
from .geometry import CameraPose, PoseParams6D, normalize_poses, pose_angular_errors
from .metrics import depth_metrics, psnr
from .renderer import DEFAULT_CONFIG, RenderConfig
from .scene_model import RenderGradients, SceneParameters, init_scene_parameters, render_backward

GAUSSIAN_CLASSES = ("quat", "scale", "opacity", "sh")
PARAM_CLASSES = ("depth",) + GAUSSIAN_CLASSES + ("pose", "fov")

_CLASS_TO_FIELD = {
    "depth": "depth_raw",
    "quat": "quats",
    "scale": "log_scales",
    "opacity": "opacity_logits",
    "sh": "sh",
    "pose": "poses",
}
_GRAD_FIELD = {
    "depth": "d_depth_raw",
    "quat": "d_quats",
    "scale": "d_log_scales",
    "opacity": "d_opacity_logits",
    "sh": "d_sh",
    "pose": "d_poses",
}


@dataclass
class BAConfig:
    """Optimization settings; the initial learning rate and perceptual weight
    follow the training conventions this package replicates (1e-4 and 0.05).

    The learning rate decays along `lr_schedule` ("cosine" by default,
    "constant" available): constant-rate Adam oscillates across the narrow
    photometric valleys near the optimum instead of descending them.
    """

    learning_rate: float = 1e-4  # initial rate
    max_steps: int = 2000
    gamma: float = 0.05  # perceptual term weight (inactive unless a plug-in is set)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0  # global-norm clip per parameter class; <=0 disables
    convergence_window: int = 100
    convergence_rtol: float = 1e-9
    freeze: tuple[str, ...] = ()  # subset of PARAM_CLASSES, or "gaussians"
    lr_pose: float = 1.0  # per-class learning-rate multipliers
    lr_fov: float = 0.1
    lr_depth: float = 1.0
    lr_gaussian: float = 1.0
    lr_schedule: str = "cosine"  # cosine | constant
    lr_floor: float = 0.01  # cosine decays to lr_floor * learning_rate

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        known = set(PARAM_CLASSES) | {"gaussians", "context-pose", "target-pose"}
        unknown = set(self.freeze) - known
        if unknown:
            raise ValueError(f"unknown freeze classes: {sorted(unknown)}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def frozen_classes(self) -> set[str]:
        out = set(self.freeze)
        if "gaussians" in out:
            out.discard("gaussians")
            out.update(GAUSSIAN_CLASSES)
        if {"context-pose", "target-pose"} <= out:
            out.add("pose")
        return out

    def lr_for(self, cls: str, step: int = 0) -> float:
        mult = {
            "pose": self.lr_pose,
            "fov": self.lr_fov,
            "depth": self.lr_depth,
        }.get(cls, self.lr_gaussian)
        base = self.learning_rate * mult
        if self.lr_schedule == "constant" or self.max_steps <= 0:
            return base
        frac = min(max(step / self.max_steps, 0.0), 1.0)
        decay = self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (
            1.0 + math.cos(math.pi * frac)
        )
        return base * decay


@dataclass
class GroundTruth:
    """Reference values used for evaluation only, never for optimization."""

    poses: list[CameraPose] | None = None  # all views, context first
    depths: np.ndarray | None = None  # (Vc, H, W) activated depths
    depth_valid: np.ndarray | None = None  # (Vc, H, W) bool, None = all valid
    fov_rad: float | None = None


@dataclass
class StepRecord:
    step: int
    loss: float
    psnr: float
    rot_err_deg: float | None
    trans_err_deg: float | None
    fov_deg: float
    depth_rel: float | None = None


@dataclass
class BAHistory:
    records: list[StepRecord] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss", "psnr", "rot_err_deg", "trans_err_deg", "fov_deg"])
        for r in self.records:
            writer.writerow([
                r.step,
                repr(r.loss),
                repr(r.psnr),
                "" if r.rot_err_deg is None else repr(r.rot_err_deg),
                "" if r.trans_err_deg is None else repr(r.trans_err_deg),
                repr(r.fov_deg),
            ])
        return buf.getvalue()

    @property
    def final(self) -> StepRecord:
        return self.records[-1]


def rendering_loss(
    rendered: np.ndarray,
    target: np.ndarray,
    gamma: float = 0.0,
    perceptual=None,
) -> tuple[float, np.ndarray]:
    """Mean squared error plus an optional weighted perceptual term.

    Returns the scalar loss and its gradient image w.r.t. `rendered`.
    Averaging over target views is the caller's job.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    n = diff.size
    loss = float(np.mean(diff * diff))
    grad = (2.0 / n) * diff
    if perceptual is not None and gamma != 0.0:
        p_val, p_grad = perceptual(rendered, target)
        loss += gamma * p_val
        grad = grad + gamma * p_grad
    return loss, grad


def pose_supervision_loss(pred: CameraPose, gt: CameraPose) -> float:
    """Geodesic rotation error (radians, weight 0.1) plus L2 translation
    error (weight 0.01)."""
    c = (np.trace(pred.rotation.T @ gt.rotation) - 1.0) / 2.0
    angle = math.acos(min(1.0, max(-1.0, float(c))))
    return 0.1 * angle + 0.01 * float(np.linalg.norm(pred.translation - gt.translation))


def pose_supervision_loss_grad(raw: PoseParams6D, gt: CameraPose) -> tuple[float, np.ndarray]:
    """pose_supervision_loss evaluated at decoded raw parameters, plus its
    gradient w.r.t. the raw 10-vector. The rotation term's derivative
    vanishes at the (non-differentiable) endpoints 0 and pi."""
    from .geometry import decode_translation_vjp, rot6d_to_matrix_vjp

    pred = raw.decode()
    c = float((np.trace(pred.rotation.T @ gt.rotation) - 1.0) / 2.0)
    c_cl = min(1.0, max(-1.0, c))
    angle = math.acos(c_cl)
    t_diff = pred.translation - gt.translation
    t_norm = float(np.linalg.norm(t_diff))
    loss = 0.1 * angle + 0.01 * t_norm

    if 1.0 - c_cl * c_cl > 1e-12:
        d_R = 0.1 * (-1.0 / math.sqrt(1.0 - c_cl * c_cl)) * 0.5 * gt.rotation
    else:
        d_R = np.zeros((3, 3))
    d_T = 0.01 * (t_diff / t_norm) if t_norm > 1e-12 else np.zeros(3)

    grad = np.empty(10)
    grad[:6] = rot6d_to_matrix_vjp(raw.rot6, d_R)
    grad[6:] = decode_translation_vjp(raw.trans_h, d_T)
    return loss, grad


def normalize_scale(
    depth_maps: list[np.ndarray],
    translations: list[np.ndarray] | np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Divide depths and translations by the median of all valid depths.

    Valid means finite and positive. Idempotent up to floating point: the
    median of the scaled depths is 1.
    """
    maps = [np.asarray(d, dtype=np.float64) for d in depth_maps]
    pool = np.concatenate([d.reshape(-1) for d in maps]) if maps else np.array([])
    pool = pool[np.isfinite(pool) & (pool > 0)]
    if pool.size == 0:
        raise ValueError("no valid depth values to normalize by")
    factor = float(np.median(pool))
    scaled_maps = [d / factor for d in maps]
    scaled_trans = [np.asarray(t, dtype=np.float64) / factor for t in translations]
    return scaled_maps, scaled_trans, factor


class _Adam:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _clip(grad: np.ndarray, limit: float) -> np.ndarray:
    if limit <= 0:
        return grad
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > limit:
        return grad * (limit / norm)
    return grad


def _check_finite(loss: float, grads: RenderGradients) -> None:
    if not math.isfinite(loss):
        for cls, attr in _GRAD_FIELD.items():
            if not np.all(np.isfinite(getattr(grads, attr))):
                raise DivergenceError(
                    f"non-finite loss with non-finite {cls} gradients", cls
                )
        raise DivergenceError("loss became non-finite", "loss")
    for cls, attr in _GRAD_FIELD.items():
        if not np.all(np.isfinite(getattr(grads, attr))):
            raise DivergenceError(f"non-finite gradient in class {cls!r}", cls)
    if not math.isfinite(grads.d_fov):
        raise DivergenceError("non-finite gradient in class 'fov'", "fov")


def _pose_errors_vs_gt(params: SceneParameters, gt_poses: list[CameraPose]):
    pred = normalize_poses(params.decode_poses())
    ref = normalize_poses(gt_poses)
    rot = trans = 0.0
    for v in range(1, len(ref)):
        r, t = pose_angular_errors(pred[v], ref[v])
        rot = max(rot, r)
        trans = max(trans, t)
    return rot, trans


def run_photometric_ba(
    context_images: np.ndarray,
    target_images: np.ndarray,
    config: BAConfig,
    gt: GroundTruth | None = None,
    initial: SceneParameters | None = None,
    render_config: RenderConfig = DEFAULT_CONFIG,
    background=(0.0, 0.0, 0.0),
    perceptual=None,
    step_callback=None,
) -> tuple[SceneParameters, BAHistory]:
    """Optimize scene parameters so rendered target views match the images.

    Returns the best-loss iterate and the per-step history. Raises
    DivergenceError (naming the offending parameter class) if the loss or
    any gradient becomes non-finite, or a pose/fov decode degenerates.
    """
    context_images = np.asarray(context_images, dtype=np.float64)
    target_images = np.asarray(target_images, dtype=np.float64)
    if context_images.ndim != 4 or target_images.ndim != 4:
        raise ValueError("context/target images must be stacked (V, H, W, 3)")
    if context_images.shape[0] < 1 or target_images.shape[0] < 1:
        raise ValueError("need at least one context and one target image")
    if context_images.shape[1:] != target_images.shape[1:]:
        raise ValueError("context and target images must share dimensions")

    n_ctx = context_images.shape[0]
    n_tgt = target_images.shape[0]
    params = initial.copy() if initial is not None else init_scene_parameters(
        list(context_images), n_tgt
    )
    if params.n_context != n_ctx or params.n_views != n_ctx + n_tgt:
        raise ValueError("initial parameters do not match the image counts")

    frozen = config.frozen_classes()
    h_img, w_img = target_images.shape[1:3]

    adams = {
        cls: _Adam(getattr(params, _CLASS_TO_FIELD[cls]).shape,
                   config.beta1, config.beta2, config.eps)
        for cls in PARAM_CLASSES if cls != "fov"
    }
    adams["fov"] = _Adam((), config.beta1, config.beta2, config.eps)

    history = BAHistory()
    best_loss = math.inf
    best = params.copy()
    losses: list[float] = []

    def evaluate(p: SceneParameters):
        """Loss over all targets plus merged gradients (fixed view order)."""
        from .scene_model import render_scene_with_loss

        total_loss = 0.0
        total: RenderGradients | None = None
        psnrs = []
        for i in range(n_tgt):
            view = n_ctx + i

            def view_loss(out, i=i):
                loss_v, grad_img = rendering_loss(
                    out.color, target_images[i], config.gamma, perceptual
                )
                return loss_v, grad_img / n_tgt

            out, grads, loss_v = render_scene_with_loss(
                p, view, view_loss, w_img, h_img, background, render_config
            )
            total_loss += loss_v / n_tgt
            psnrs.append(psnr(out.color, target_images[i]))
            total = grads if total is None else _merge_grads(total, grads)
        return total_loss, total, float(np.mean(psnrs))

    step = 0
    while True:
        try:
            loss, grads, mean_psnr = evaluate(params)
        except DegenerateInputError as e:
            raise DivergenceError(f"parameter decode degenerated: {e}", "pose") from e
        _check_finite(loss, grads)

        rot_err = trans_err = None
        depth_rel = None
        if gt is not None and gt.poses is not None:
            rot_err, trans_err = _pose_errors_vs_gt(params, gt.poses)
        if gt is not None and gt.depths is not None:
            pred_depth = activate_depth(params.depth_raw, params.near, params.far)
            depth_rel = depth_metrics(
                pred_depth, gt.depths, valid_mask=gt.depth_valid, align=True
            )[0]
        history.records.append(StepRecord(
            step=step,
            loss=loss,
            psnr=mean_psnr,
            rot_err_deg=rot_err,
            trans_err_deg=trans_err,
            fov_deg=math.degrees(params.fov_rad),
            depth_rel=depth_rel,
        ))
        losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = params.copy()
        if step_callback is not None:
            step_callback(step, params, history.records[-1])

        if loss == 0.0:
            history.stop_reason = "loss reached zero"
            break
        if step >= config.max_steps:
            history.stop_reason = "max steps"
            break
        win = config.convergence_window
        if win > 0 and len(losses) >= 2 * win:
            recent = min(losses[-win:])
            earlier = min(losses[:-win])
            if recent >= earlier * (1.0 - config.convergence_rtol):
                history.stop_reason = "converged"
                break

        _apply_updates(params, grads, adams, config, frozen, step)
        step += 1

    return best, history


def _render_view(p, view, width, height, background, render_config):
    from .scene_model import render_scene

    return render_scene(p, view, width, height, background, render_config)


def _merge_grads(a: RenderGradients, b: RenderGradients) -> RenderGradients:
    return RenderGradients(
        d_depth_raw=a.d_depth_raw + b.d_depth_raw,
        d_quats=a.d_quats + b.d_quats,
        d_log_scales=a.d_log_scales + b.d_log_scales,
        d_opacity_logits=a.d_opacity_logits + b.d_opacity_logits,
        d_sh=a.d_sh + b.d_sh,
        d_poses=a.d_poses + b.d_poses,
        d_fov=a.d_fov + b.d_fov,
        d_centers=a.d_centers + b.d_centers,
    )


def _apply_updates(params, grads, adams, config, frozen, step):
    for cls in PARAM_CLASSES:
        if cls in frozen:
            continue
        lr = config.lr_for(cls, step)
        if cls == "fov":
            g = _clip(np.asarray(grads.d_fov), config.grad_clip)
            params.fov_rad = float(params.fov_rad + adams["fov"].step(g, lr))
            continue
        g = getattr(grads, _GRAD_FIELD[cls]).copy()
        if cls == "pose":
            g[0] = 0.0  # canonical frame stays pinned
            if "context-pose" in frozen:
                g[: params.n_context] = 0.0
            if "target-pose" in frozen:
                g[params.n_context :] = 0.0
        g = _clip(g, config.grad_clip)
        arr = getattr(params, _CLASS_TO_FIELD[cls])
        arr += adams[cls].step(g, lr)
