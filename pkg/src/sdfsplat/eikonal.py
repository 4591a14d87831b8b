"""Analytic scalar fields and the numerical check that projecting along the
normalised gradient lands on the zero set exactly when |grad f| = 1, with a
quadratic residual otherwise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sphere_sdf(x, radius: float = 1.0):
    return np.linalg.norm(x, axis=-1) - radius


def scaled_sphere(x, scale: float = 2.0):
    """scale * (|x| - 1): the right zero set but gradient magnitude `scale`."""
    return scale * (np.linalg.norm(x, axis=-1) - 1.0)


def quadratic_sphere(x):
    """(|x|^2 - 1) / 2: smooth, unit gradient only on the zero set."""
    return 0.5 * ((x * x).sum(-1) - 1.0)


def torus_sdf(x, major: float = 1.0, minor: float = 0.35):
    q = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2) - major
    return np.sqrt(q * q + x[..., 2] ** 2) - minor


def box_sdf(x, half=(0.8, 0.6, 0.5)):
    q = np.abs(x) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(-1), 0.0)
    return outside + inside


FIELDS = {
    "sphere": sphere_sdf,
    "scaled-sphere": scaled_sphere,
    "quadratic-sphere": quadratic_sphere,
    "torus": torus_sdf,
    "box": box_sdf,
}


def central_gradient(f, x, h: float = 1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        g[..., k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


@dataclass
class EikonalStats:
    f: np.ndarray
    grad_norm: np.ndarray
    f_proj: np.ndarray

    def table(self) -> list[tuple[str, float]]:
        af = np.abs(self.f_proj)
        return [
            ("samples", float(len(self.f))),
            ("mean |grad f|", float(self.grad_norm.mean())),
            ("max ||grad f| - 1|", float(np.abs(self.grad_norm - 1.0).max())),
            ("mean |f(mu)|", float(np.abs(self.f).mean())),
            ("mean |f(mu_proj)|", float(af.mean())),
            ("max |f(mu_proj)|", float(af.max())),
        ]

    def loglog_slope(self, min_abs: float = 1e-12) -> float:
        """Least-squares slope of log|f(mu_proj)| against log|f(mu)|; NaN when
        fewer than two residuals exceed min_abs (an exact distance field)."""
        a = np.abs(self.f)
        b = np.abs(self.f_proj)
        ok = (a > min_abs) & (b > min_abs)
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(a[ok]), np.log(b[ok]), 1)[0])


def eikonal_residual_oracle(f, points, h: float = 1e-5) -> EikonalStats:
    """Project each sample with mu_proj = mu - f(mu) grad f / |grad f| and
    report f before and after, along with |grad f|."""
    x = np.asarray(points, dtype=np.float64)
    g = central_gradient(f, x, h)
    gn = np.linalg.norm(g, axis=-1)
    fx = f(x)
    proj = x - (fx / np.maximum(gn, 1e-300))[:, None] * g
    return EikonalStats(fx, gn, f(proj))


def shell_samples(count: int, r_min: float, r_max: float, seed: int = 0) -> np.ndarray:
    """Points with uniformly random directions and radii in [r_min, r_max]."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * rng.uniform(r_min, r_max, count)[:, None]
