"""Projection-based consistency between the discrete SDF samples and the
splatted surface: each visible primitive is moved onto the zero level set
along its normal, and the depth of that point is compared with the blended
depth map at its pixel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .gaussians import GaussianCloud

EPSILON = 0.05
WARMUP_ITERS = 1000
ALPHA_VALID = 0.5


@dataclass
class RegularizerConfig:
    epsilon: float = EPSILON
    warmup_iters: int = WARMUP_ITERS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def project_to_zero_level(mu, s, n, tol: float = 1e-4):
    """mu - s * n for unit normals n (broadcasts over leading axes)."""
    n = np.asarray(n, dtype=np.float64)
    err = np.abs(np.linalg.norm(n, axis=-1) - 1.0)
    if np.any(err > tol):
        raise ValueError(f"normal is not unit length (deviation {float(np.max(err)):.2e})")
    return np.asarray(mu, dtype=np.float64) - np.asarray(s, dtype=np.float64)[..., None] * n


def bilinear_sample(img, x, y):
    """Sample a map at continuous pixel coordinates (pixel centres at i + 0.5).
    Returns (values, tap indices (n, 4), tap weights (n, 4), d/dx, d/dy)."""
    H, W = img.shape
    u = x - 0.5
    v = y - 0.5
    j0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    i0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fu = u - j0
    fv = v - i0
    idx = np.stack([i0 * W + j0, i0 * W + j0 + 1, (i0 + 1) * W + j0, (i0 + 1) * W + j0 + 1], -1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], -1)
    t = img.reshape(-1)[idx]
    val = (wts * t).sum(-1)
    dx = (1 - fv) * (t[:, 1] - t[:, 0]) + fv * (t[:, 3] - t[:, 2])
    dy = (1 - fu) * (t[:, 2] - t[:, 0]) + fu * (t[:, 3] - t[:, 1])
    return val, idx, wts, dx, dy


@dataclass
class ProjectionBatch:
    index: np.ndarray  # primitive indices, ascending
    mu: np.ndarray
    s: np.ndarray
    normal: np.ndarray  # unit SDF gradient direction (the surfel normal)
    mu_proj: np.ndarray
    p_cam: np.ndarray
    pixel: np.ndarray  # (n, 2) continuous pixel coordinates
    d_proj: np.ndarray
    d_agg: np.ndarray
    residual: np.ndarray
    taps: np.ndarray
    tap_weights: np.ndarray
    dd_dpix: np.ndarray  # (n, 2) gradient of the sampled depth w.r.t. pixel position
    shape: tuple

    def __len__(self):
        return len(self.index)

    def inliers(self, epsilon: float = EPSILON) -> np.ndarray:
        return self.residual <= epsilon


def projection_residuals(cloud: GaussianCloud, gb, cam: Camera,
                         alpha_threshold: float = ALPHA_VALID) -> ProjectionBatch:
    """Residuals |D_agg(pixel(mu_proj)) - depth(mu_proj)| for every primitive
    blended into at least one pixel of this view. Primitives whose projected
    point leaves the image, lies behind the camera, or whose four bilinear
    taps are not all covered (A >= alpha_threshold) are left out."""
    H, W = gb.depth.shape
    if gb.e_prim is None:
        raise ValueError("forward pass not retained")
    idx = np.unique(gb.e_prim)
    mu = cloud.positions[idx]
    s = cloud.sdf_values[idx]
    n = cloud.normals[idx]
    mp = project_to_zero_level(mu, s, n)
    pc = cam.to_camera(mp)
    z = pc[:, 2]
    front = z > cam.near
    zs = np.where(front, z, 1.0)
    px = cam.fx * pc[:, 0] / zs + cam.cx
    py = cam.fy * pc[:, 1] / zs + cam.cy
    inside = front & (px >= 0.5) & (px <= W - 0.5) & (py >= 0.5) & (py <= H - 0.5)
    inside &= (W >= 2) & (H >= 2)
    keep = np.flatnonzero(inside)
    d, taps, wts, ddx, ddy = bilinear_sample(gb.depth, px[keep], py[keep])
    covered = (gb.alpha.reshape(-1)[taps] >= alpha_threshold).all(-1)
    keep = keep[covered]
    d, taps, wts, ddx, ddy = d[covered], taps[covered], wts[covered], ddx[covered], ddy[covered]
    return ProjectionBatch(idx[keep], mu[keep], s[keep], n[keep], mp[keep], pc[keep],
                           np.stack([px[keep], py[keep]], -1), z[keep], d, np.abs(d - z[keep]),
                           taps, wts, np.stack([ddx, ddy], -1), (H, W))


@dataclass
class ProjectionGrad:
    index: np.ndarray
    mu: np.ndarray
    s: np.ndarray
    normal: np.ndarray
    depth_map: np.ndarray  # gradient on the blended depth map


def projection_loss(batch: ProjectionBatch, cam: Camera, epsilon: float = EPSILON):
    """Mean over all batch entries of the residual, with residuals above
    epsilon counted as zero. Returns (value, ProjectionGrad); the inlier set is
    held fixed under differentiation."""
    H, W = batch.shape
    n = len(batch)
    zero = ProjectionGrad(batch.index, np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                          np.zeros((H, W)))
    if n == 0:
        return 0.0, zero
    inl = batch.inliers(epsilon)
    value = float(np.where(inl, batch.residual, 0.0).sum() / n)
    sign = np.sign(batch.d_agg - batch.d_proj) * inl / n
    # residual = |D(px(p), py(p)) - z(p)| with p the camera-space projected point
    x, y, z = batch.p_cam.T
    dpx = np.stack([cam.fx / z, np.zeros(n), -cam.fx * x / z**2], -1)
    dpy = np.stack([np.zeros(n), cam.fy / z, -cam.fy * y / z**2], -1)
    g_pc = sign[:, None] * (batch.dd_dpix[:, :1] * dpx + batch.dd_dpix[:, 1:] * dpy
                            - np.array([0.0, 0.0, 1.0]))
    g_mp = g_pc @ cam.rotation  # R^T applied to row vectors
    g_depth = np.zeros(H * W)
    np.add.at(g_depth, batch.taps.ravel(), (batch.tap_weights * sign[:, None]).ravel())
    return value, ProjectionGrad(batch.index, g_mp, -(g_mp * batch.normal).sum(1),
                                 -batch.s[:, None] * g_mp, g_depth.reshape(H, W))
