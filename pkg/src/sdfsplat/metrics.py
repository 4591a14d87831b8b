"""Image and geometry quality metrics."""

from __future__ import annotations

import numpy as np

from .losses import ssim


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask) > 0.5
    if not m.any():
        raise ValueError("metric mask is empty")
    return m


def psnr(render, gt, mask=None) -> float:
    """10 log10(1 / MSE) over (masked) pixels, values in [0, 1]."""
    r = np.asarray(render, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    m = _mask(mask, r.shape[:2])
    mse = float(np.mean((r[m] - g[m]) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def metric_ssim(render, gt) -> float:
    return ssim(render, gt)


def normal_mae(n, n_gt, mask) -> float:
    """Mean angular error in degrees over masked pixels."""
    m = _mask(mask, np.shape(n)[:2])
    c = np.clip(np.sum(np.asarray(n)[m] * np.asarray(n_gt)[m], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)).mean())


def mask_iou(alpha, gt_mask, threshold: float = 0.5) -> float:
    a = np.asarray(alpha) > threshold
    b = np.asarray(gt_mask) > threshold
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def channel_rescale(render_lin, ref_lin, mask=None) -> np.ndarray:
    """Per-channel scale k minimising |k * render - ref|^2 over masked pixels."""
    m = _mask(mask, np.shape(render_lin)[:2])
    r = np.asarray(render_lin)[m]
    g = np.asarray(ref_lin)[m]
    den = (r * r).sum(0)
    return np.where(den > 0, (r * g).sum(0) / np.maximum(den, 1e-30), 1.0)
