"""Training objectives. Every loss returns its value together with the
gradient(s) with respect to its image-like inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
GAMMA = 2.2
BCE_CLAMP = 1e-6
SMOOTH_EPS = 1e-12


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term


# --- tone mapping --------------------------------------------------------------

def tonemap(x):
    """Clamp to [0, 1] and gamma-encode."""
    return np.clip(x, 0.0, 1.0) ** (1.0 / GAMMA)


def tonemap_grad(x):
    # cut off the (integrable but unbounded) slope at the black end
    x = np.asarray(x)
    inside = (x > 1e-4) & (x < 1.0)
    return np.where(inside, (1.0 / GAMMA) * np.where(inside, x, 1.0) ** (1.0 / GAMMA - 1.0), 0.0)


# --- SSIM ----------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _blur(img):
    """Separable Gaussian over the two spatial axes with zero padding. The
    window is symmetric, so this operator is its own adjoint."""
    w = gaussian_window()
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    return x, y


def ssim(x, y, return_grad: bool = False):
    """Mean SSIM over pixels and channels; optionally d(ssim)/dx."""
    x, y = _check_pair(x, y)
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    A1 = 2.0 * mx * my + SSIM_C1
    A2 = 2.0 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    val = float(S.mean())
    if not return_grad:
        return val
    n = S.size
    dS_dmx = (2.0 * my * A2 / (B1 * B2) - S * 2.0 * mx / B1) / n
    dS_dsxy = (2.0 * A1 / (B1 * B2)) / n
    dS_dsxx = (-S / B2) / n
    # chain through the variance definitions
    g_mx = dS_dmx - 2.0 * mx * dS_dsxx - my * dS_dsxy
    grad = _blur(g_mx) + 2.0 * x * _blur(dS_dsxx) + y * _blur(dS_dsxy)
    return val, grad


# --- individual losses -----------------------------------------------------------

def color_loss(render, gt, lam: float = 0.8):
    """lam * L1 + (1 - lam) * (1 - SSIM) on already tone-mapped images.
    Returns (value, d/d render)."""
    r, g = _check_pair(render, gt)
    d = r - g
    l1 = float(np.abs(d).mean())
    s, gs = ssim(r, g, return_grad=True)
    value = lam * l1 + (1.0 - lam) * (1.0 - s)
    grad = lam * np.sign(d) / d.size - (1.0 - lam) * gs
    return value, grad.reshape(np.shape(render))


def normal_loss(n_hat, n, valid):
    """Mean over valid pixels of |n_hat - n|^2. Returns
    (value, d/d n_hat, d/d n, empty_flag)."""
    n_hat = np.asarray(n_hat, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if n_hat.shape != n.shape:
        raise ValueError(f"normal map shapes differ: {n_hat.shape} vs {n.shape}")
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        z = np.zeros_like(n)
        return 0.0, z, z.copy(), True
    d = np.where(valid[..., None], n_hat - n, 0.0)
    value = float((d * d).sum() / count)
    g = 2.0 * d / count
    return value, g, -g, False


def covered_mask(alpha, threshold: float = 1e-3):
    return np.asarray(alpha) > threshold


def distortion_loss(distortion, alpha):
    """Mean per-pixel distortion over covered pixels. Returns (value, d/d distortion)."""
    cov = covered_mask(alpha)
    count = int(cov.sum())
    if count == 0:
        return 0.0, np.zeros_like(distortion)
    return float(distortion[cov].sum() / count), cov / count


def image_gradient(img):
    """Forward differences with replicate border (last row/column get 0)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1] = img[1:] - img[:-1]
    return dx, dy


def _image_gradient_adjoint(gdx, gdy):
    g = np.zeros_like(gdx)
    g[:, 1:] += gdx[:, :-1]
    g[:, :-1] -= gdx[:, :-1]
    g[1:] += gdy[:-1]
    g[:-1] -= gdy[:-1]
    return g


def edge_weight(gt):
    dx, dy = image_gradient(gt)
    return np.exp(-np.sqrt((dx * dx + dy * dy).sum(-1)))


def smoothness_loss(maps, gt, valid):
    """Edge-aware total variation summed over attribute maps, averaged over
    valid pixels. `maps` is a sequence of (H, W) or (H, W, C) arrays.
    Returns (value, [gradient per map])."""
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    grads = [np.zeros(np.shape(m)) for m in maps]
    if count == 0:
        return 0.0, grads
    wgt = edge_weight(gt) * valid
    value = 0.0
    for i, m in enumerate(maps):
        dx, dy = image_gradient(m)
        q = (dx * dx + dy * dy).sum(-1)
        mag = np.sqrt(q + SMOOTH_EPS)
        value += float((wgt * (mag - math.sqrt(SMOOTH_EPS))).sum())
        c = (wgt / mag / count)[..., None]
        g = _image_gradient_adjoint(c * dx, c * dy)
        grads[i] = g.reshape(np.shape(m))
    return value / count, grads


def mask_loss(alpha, mask):
    """Mean binary cross-entropy of accumulated alpha against the mask.
    Returns (value, d/d alpha)."""
    A = np.asarray(alpha, dtype=np.float64)
    M = np.asarray(mask, dtype=np.float64)
    Ac = np.clip(A, BCE_CLAMP, 1.0 - BCE_CLAMP)
    val = -(M * np.log(Ac) + (1.0 - M) * np.log(1.0 - Ac))
    inside = (A > BCE_CLAMP) & (A < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (Ac - M) / (Ac * (1.0 - Ac)), 0.0) / A.size
    return float(val.mean()), grad


# --- weighting -----------------------------------------------------------------

@dataclass
class LossWeights:
    color: float = 1.0
    normal: float = 0.2
    distortion: float = 2000.0
    median: float = 1.0
    projection: float = 10.0
    smoothness: float = 0.05
    mask: float = 0.2
    ssim_mix: float = 0.8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def terms(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ssim_mix"}


TERMS = ("color", "normal", "distortion", "median", "projection", "smoothness", "mask")


@dataclass
class LossReport:
    raw: dict
    weighted: dict
    total: float
    gates: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {}
        for t in TERMS:
            out[t] = self.raw.get(t, 0.0)
            out[f"w_{t}"] = self.weighted.get(t, 0.0)
        out["total"] = self.total
        return out


def total_loss(terms: dict, weights: LossWeights, gates: dict | None = None) -> LossReport:
    """Weighted sum of the raw terms; a term whose gate is False contributes 0."""
    gates = gates or {}
    w = weights.terms()
    raw, weighted = {}, {}
    for name, value in terms.items():
        if name not in w:
            raise KeyError(f"unknown loss term '{name}'")
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteLoss(name, value)
        raw[name] = value
        weighted[name] = w[name] * value if gates.get(name, True) else 0.0
    return LossReport(raw, weighted, float(sum(weighted.values())), dict(gates))
