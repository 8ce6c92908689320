"""Evaluation metrics: PSNR, SSIM, relative-pose AUC, depth accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: Sentinel for "images identical" (MSE = 0); JSON reports map it to "exact".
PSNR_EXACT = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class PoseErrorSample:
    rot_err_deg: float
    trans_err_deg: float

    def __post_init__(self):
        if self.rot_err_deg < 0 or self.trans_err_deg < 0:
            raise ValueError("pose errors must be non-negative")

    @property
    def overall_deg(self) -> float:
        return max(self.rot_err_deg, self.trans_err_deg)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for intensities in [0, 1]; PSNR_EXACT when MSE = 0."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_EXACT
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / np.sum(w)


def _corr_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2D array with a 1D window."""
    k = w.size
    out = np.zeros((x.shape[0], x.shape[1] - k + 1))
    for i in range(k):
        out += w[i] * x[:, i : i + out.shape[1]]
    out2 = np.zeros((x.shape[0] - k + 1, out.shape[1]))
    for i in range(k):
        out2 += w[i] * out[i : i + out2.shape[0], :]
    return out2


def _corr_adjoint(g: np.ndarray, w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _corr_valid: scatter window-level gradients back to pixels."""
    k = w.size
    out = np.zeros((shape[0], g.shape[1]))
    for i in range(k):
        out[i : i + g.shape[0], :] += w[i] * g
    out2 = np.zeros(shape)
    for i in range(k):
        out2[:, i : i + g.shape[1]] += w[i] * out
    return out2


def _ssim_channel(x: np.ndarray, y: np.ndarray, with_grad: bool):
    """Mean SSIM of one channel; optionally also d(mean SSIM)/dx."""
    w = _gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    mu_x = _corr_valid(x, w)
    mu_y = _corr_valid(y, w)
    mu_xx = _corr_valid(x * x, w)
    mu_yy = _corr_valid(y * y, w)
    mu_xy = _corr_valid(x * y, w)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    n1 = 2.0 * mu_x * mu_y + c1
    d1 = mu_x * mu_x + mu_y * mu_y + c1
    n2 = 2.0 * cov + c2
    d2 = var_x + var_y + c2
    s = (n1 * n2) / (d1 * d2)
    value = float(np.mean(s))
    if not with_grad:
        return value, None

    q = s.size
    # Partials of s w.r.t. the windowed moments.
    ds_dmux = (2.0 * mu_y * n2) / (d1 * d2) - s * (2.0 * mu_x) / d1
    ds_dvarx = -s / d2
    ds_dcov = 2.0 * n1 / (d1 * d2)
    # Moments are linear in x, x^2, and x*y.
    g_mux = ds_dmux + ds_dvarx * (-2.0 * mu_x) + ds_dcov * (-mu_y)
    grad = (
        _corr_adjoint(g_mux, w, x.shape)
        + 2.0 * x * _corr_adjoint(ds_dvarx, w, x.shape)
        + y * _corr_adjoint(ds_dcov, w, x.shape)
    ) / q
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Computed per channel over valid windows and averaged.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    vals = [_ssim_channel(a[..., c], b[..., c], False)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_gradient(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM plus its analytic gradient w.r.t. the first image."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]
    nch = a.shape[2]
    vals = []
    grad = np.zeros_like(a)
    for c in range(nch):
        v, g = _ssim_channel(a[..., c], b[..., c], True)
        vals.append(v)
        grad[..., c] = g / nch
    value = float(np.mean(vals))
    return value, (grad[..., 0] if squeeze else grad)


def ssim_dissimilarity(rendered: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - SSIM with gradient; the built-in perceptual plug-in for the
    rendering loss (lower is better, like a distance)."""
    v, g = ssim_with_gradient(rendered, target)
    return 1.0 - v, -g


def pose_auc(samples: list[PoseErrorSample], thresholds_deg: list[float]) -> list[float]:
    """Area under the cumulative curve of max(rot, trans) errors.

    Exact integral of the empirical step function: each sample contributes
    max(0, t - e)/t, averaged over samples, for every threshold t.
    """
    if not samples:
        raise ValueError("need at least one pose error sample")
    if any(t <= 0 for t in thresholds_deg):
        raise ValueError("thresholds must be positive")
    errs = np.array([s.overall_deg for s in samples], dtype=np.float64)
    return [float(np.mean(np.clip(t - errs, 0.0, t)) / t) for t in thresholds_deg]


def depth_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid_mask: np.ndarray | None = None,
    align: bool = True,
) -> tuple[float, float]:
    """(rel, tau): mean |pred-gt|/gt and the inlier fraction at ratio 1.25.

    With `align` (default, since predicted depths are up to scale), pred is
    first rescaled by median(gt)/median(pred) over valid pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if valid_mask is None:
        valid_mask = np.ones(pred.shape, dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != pred.shape:
        raise ValueError("valid_mask shape mismatch")
    if not np.any(valid_mask):
        raise ValueError("no valid pixels")
    p = pred[valid_mask]
    g = gt[valid_mask]
    if np.any(g <= 0):
        raise ValueError("ground-truth depth must be positive on valid pixels")
    if align:
        med_p = np.median(p)
        if med_p <= 0:
            raise ValueError("median of predicted depth must be positive to align")
        p = p * (np.median(g) / med_p)
    rel = float(np.mean(np.abs(p - g) / g))
    p_safe = np.where(p > 0, p, 1.0)
    ratio = np.where(p > 0, np.maximum(p / g, g / p_safe), np.inf)
    tau = float(np.mean(ratio < 1.25))
    return rel, tau
