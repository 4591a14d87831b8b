"""Gaussian surfel cloud carrying one discrete SDF sample per primitive.

Opacity is never a free parameter here: it is derived from the per-primitive
signed distance through a bell-shaped transform whose sharpness is a single
global scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

# -ln(3 - 2*sqrt(2)): the value of gamma*s at which the transform equals 0.5
HALF_OPACITY_GS = -math.log(3.0 - 2.0 * math.sqrt(2.0))


class InvalidSDFSample(ValueError):
    pass


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(s, gamma):
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)) or not np.all(np.isfinite(gamma)):
        raise InvalidSDFSample("invalid SDF sample: non-finite input")
    if np.any(np.asarray(gamma) <= 0):
        raise InvalidSDFSample("invalid SDF sample: gamma must be positive")
    return s


def sdf_to_opacity(s, gamma):
    """Map signed distance to opacity: 4 e^{-gs} / (1 + e^{-gs})^2.

    Evaluated through t = exp(-gamma*|s|) so large |gamma*s| cannot overflow;
    the bell is even in s, so using |s| is exact.
    """
    s = _check_finite(s, gamma)
    t = np.exp(-gamma * np.abs(s))
    # rounding can land one ulp above 1 for t just below 1
    out = np.minimum(4.0 * t / (1.0 + t) ** 2, 1.0)
    return out if out.ndim else float(out)


def sdf_to_opacity_grad(s, gamma):
    """Partial derivatives (do/ds, do/dgamma) of the SDF-to-opacity map."""
    s = _check_finite(s, gamma)
    a = np.abs(s)
    t = np.exp(-gamma * a)
    o = 4.0 * t / (1.0 + t) ** 2
    # d o / d(x) with x = gamma*|s|:  -o * (1 - t) / (1 + t)
    do_dx = -o * (1.0 - t) / (1.0 + t)
    do_ds = do_dx * gamma * np.sign(s)
    do_dg = do_dx * a
    if do_ds.ndim == 0:
        return float(do_ds), float(do_dg)
    return do_ds, do_dg


def opacity_to_abs_sdf(opacity, gamma):
    """Inverse of the transform on s >= 0: the distance at which opacity is reached."""
    o = np.asarray(opacity, dtype=np.float64)
    if np.any((o <= 0) | (o > 1)):
        raise ValueError("opacity must lie in (0, 1]")
    # 4t/(1+t)^2 = o  ->  o t^2 + (2o - 4) t + o = 0, smaller root
    t = ((2.0 - o) - 2.0 * np.sqrt(1.0 - o)) / o
    out = -np.log(t) / gamma
    return out if out.ndim else float(out)


def unsigned_distance_median(sdf_values) -> float:
    """Median of |s|; the lower of the two middle elements for even counts."""
    a = np.abs(np.asarray(sdf_values, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("median of an empty cloud")
    k = (a.size - 1) // 2
    return float(np.partition(a, k)[k])


def gamma_median(s_med: float) -> float:
    if not s_med > 0:
        raise ValueError(f"degenerate median: |s|_m = {s_med!r} must be positive")
    return HALF_OPACITY_GS / s_med


def median_loss(gamma: float, gamma_m: float) -> tuple[float, float]:
    """Hinge max(gamma_m - gamma, 0) and its derivative w.r.t. gamma."""
    if gamma < gamma_m:
        return gamma_m - gamma, -1.0
    return 0.0, 0.0


# --------------------------------------------------------------------------
# quaternions, (w, x, y, z) convention


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Rotation matrices (..., 3, 3) to unit quaternions with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    q = np.empty((m.shape[0], 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    for i in range(m.shape[0]):
        r = m[i]
        if tr[i] > 0:
            S = math.sqrt(tr[i] + 1.0) * 2
            q[i] = (0.25 * S, (r[2, 1] - r[1, 2]) / S, (r[0, 2] - r[2, 0]) / S, (r[1, 0] - r[0, 1]) / S)
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            S = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q[i] = ((r[2, 1] - r[1, 2]) / S, 0.25 * S, (r[0, 1] + r[1, 0]) / S, (r[0, 2] + r[2, 0]) / S)
        elif r[1, 1] > r[2, 2]:
            S = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q[i] = ((r[0, 2] - r[2, 0]) / S, (r[0, 1] + r[1, 0]) / S, 0.25 * S, (r[1, 2] + r[2, 1]) / S)
        else:
            S = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q[i] = ((r[1, 0] - r[0, 1]) / S, (r[0, 2] + r[2, 0]) / S, (r[1, 2] + r[2, 1]) / S, 0.25 * S)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(R.shape[:-2] + (4,))


def rotmat_grad_to_quat(q, dR):
    """Backpropagate dL/dR (..., 3, 3) to the (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    nq = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / nq
    w, x, y, z = np.moveaxis(u, -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    return (du - u * np.sum(du * u, axis=-1, keepdims=True)) / nq


def gaussian_normal(rotation, tol: float = 1e-4):
    """Disk normal t_u x t_v, i.e. the third column of the rotation matrix."""
    q = np.asarray(rotation, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("gaussian_normal expects unit quaternions")
    return quat_to_rotmat(q)[..., :, 2]


# --------------------------------------------------------------------------


@dataclass
class GaussianCloud:
    """Array-of-attributes container.

    Bounded quantities are stored unconstrained: log-scales, logits for the
    PBR attributes and log(gamma). The activated values are exposed as
    properties.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions
    log_scales: np.ndarray  # (N, 2)
    sdf_values: np.ndarray  # (N,)
    albedo_logit: np.ndarray  # (N, 3)
    roughness_logit: np.ndarray  # (N,)
    metallic_logit: np.ndarray  # (N,)
    log_gamma: float = field(default=math.log(10.0))

    ARRAY_FIELDS = ("positions", "rotations", "log_scales", "sdf_values",
                    "albedo_logit", "roughness_logit", "metallic_logit")

    def __post_init__(self):
        for name in self.ARRAY_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.log_gamma = float(self.log_gamma)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def gamma(self) -> float:
        return math.exp(self.log_gamma)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def albedo(self) -> np.ndarray:
        return sigmoid(self.albedo_logit)

    @property
    def roughness(self) -> np.ndarray:
        return sigmoid(self.roughness_logit)

    @property
    def metallic(self) -> np.ndarray:
        return sigmoid(self.metallic_logit)

    @property
    def opacity(self) -> np.ndarray:
        return np.asarray(sdf_to_opacity(self.sdf_values, self.gamma)).reshape(-1)

    @property
    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations)

    @property
    def normals(self) -> np.ndarray:
        return self.rotation_matrices[:, :, 2]

    @classmethod
    def from_attributes(cls, positions, rotations, scales, sdf_values, albedo,
                        roughness, metallic, gamma) -> "GaussianCloud":
        eps = 1e-6
        return cls(
            positions=positions,
            rotations=np.asarray(rotations, dtype=np.float64),
            log_scales=np.log(np.asarray(scales, dtype=np.float64)),
            sdf_values=sdf_values,
            albedo_logit=_logit(np.clip(albedo, eps, 1 - eps)),
            roughness_logit=_logit(np.clip(roughness, eps, 1 - eps)),
            metallic_logit=_logit(np.clip(metallic, eps, 1 - eps)),
            log_gamma=math.log(gamma),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{f.name: (np.copy(getattr(self, f.name)) if f.name != "log_gamma"
                                         else self.log_gamma) for f in fields(self)})

    def subset(self, index) -> "GaussianCloud":
        kw = {name: getattr(self, name)[index] for name in self.ARRAY_FIELDS}
        return GaussianCloud(log_gamma=self.log_gamma, **kw)

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def check_invariants(self, tol: float = 1e-6) -> None:
        n = len(self)
        shapes = {"positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 2),
                  "sdf_values": (n,), "albedo_logit": (n, 3), "roughness_logit": (n,),
                  "metallic_logit": (n,)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise AssertionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise AssertionError(f"{name} contains non-finite values")
        if n and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > tol:
            raise AssertionError("rotations are not unit quaternions")
        if not (np.isfinite(self.log_gamma) and self.gamma > 0):
            raise AssertionError("gamma must be positive and finite")
        if n and not np.all(self.scales > 0):
            raise AssertionError("scales must be positive")


def tangent_frame(normals: np.ndarray) -> np.ndarray:
    """Deterministic rotation matrices whose third column is the given normal."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    ref = np.tile([0.0, 0.0, 1.0], (n.shape[0], 1))
    ref[np.abs(n[:, 2]) > 0.9] = (1.0, 0.0, 0.0)
    tu = np.cross(ref, n)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(n, tu)
    return np.stack([tu, tv, n], axis=2)


def spherical_init(count: int, radius: float = 1.0, seed: int = 0, *,
                   sdf_value: float = 0.0, gamma: float = 10.0) -> GaussianCloud:
    """Disks spread uniformly over a sphere, each facing radially outward."""
    if count <= 0:
        raise ValueError("count must be positive")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    R = tangent_frame(d)
    quats = rotmat_to_quat(R)
    scale = radius * math.sqrt(4.0 * math.pi / count)
    return GaussianCloud(
        positions=radius * d,
        rotations=quats,
        log_scales=np.full((count, 2), math.log(scale)),
        sdf_values=np.full(count, float(sdf_value)),
        albedo_logit=np.zeros((count, 3)),
        roughness_logit=np.full(count, float(_logit(0.8))),
        # a logistic map cannot reach 0; 0.01 is the stand-in for "non-metal"
        metallic_logit=np.full(count, float(_logit(0.01))),
        log_gamma=math.log(gamma),
    )
