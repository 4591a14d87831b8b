"""Image-based lighting: split-sum deferred shading and its Monte-Carlo reference.

BRDF: Lambert diffuse scaled by (1 - m) plus a GGX specular lobe with
height-correlated Smith visibility and Schlick Fresnel,
F0 = 0.04 (1 - m) + m a. GGX alpha is roughness squared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
import scipy.sparse as sp

from . import envmap
from .camera import Camera

NOV_MIN = 1e-4
COVERED_ALPHA = 1e-3
IRRADIANCE_RES = 16
DEFAULT_LEVELS = 6


def ggx_alpha(roughness):
    return np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, 1e-6)


def hammersley(n: int) -> np.ndarray:
    """(n, 2) Hammersley points: (i/n, radical inverse base 2)."""
    i = np.arange(n, dtype=np.uint64)
    b = i.copy()
    b = ((b << np.uint64(16)) | (b >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    b = ((b & np.uint64(0x55555555)) << np.uint64(1)) | ((b & np.uint64(0xAAAAAAAA)) >> np.uint64(1))
    b = ((b & np.uint64(0x33333333)) << np.uint64(2)) | ((b & np.uint64(0xCCCCCCCC)) >> np.uint64(2))
    b = ((b & np.uint64(0x0F0F0F0F)) << np.uint64(4)) | ((b & np.uint64(0xF0F0F0F0)) >> np.uint64(4))
    b = ((b & np.uint64(0x00FF00FF)) << np.uint64(8)) | ((b & np.uint64(0xFF00FF00)) >> np.uint64(8))
    return np.stack([i / n, b.astype(np.float64) / 2.0**32], -1)


def ggx_half_vectors(xi: np.ndarray, alpha) -> np.ndarray:
    """Tangent-space GGX half vectors (z = normal) from uniforms (..., 2)."""
    a2 = np.asarray(alpha, dtype=np.float64) ** 2
    phi = 2.0 * np.pi * xi[..., 1]
    cos_t = np.sqrt((1.0 - xi[..., 0]) / (1.0 + (a2 - 1.0) * xi[..., 0]))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], -1)


def orthonormal_basis(n: np.ndarray):
    """Branchless tangent frame (Duff et al.) for unit vectors (..., 3)."""
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], -1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], -1)
    return t, bt


def smith_visibility(nol, nov, alpha):
    """Height-correlated Smith G / (4 NoL NoV)."""
    a2 = alpha * alpha
    gv = nol * np.sqrt(nov * nov * (1.0 - a2) + a2)
    gl = nov * np.sqrt(nol * nol * (1.0 - a2) + a2)
    return 0.5 / (gv + gl)


# --- DFG table ---------------------------------------------------------------

def dfg_integrate(nov, roughness, samples: int = 1024) -> np.ndarray:
    """The two split-sum scalars (F1, F2) for arrays of NoV and roughness,
    integrated with a Hammersley GGX sample set. Returns (..., 2)."""
    nov = np.asarray(nov, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64)
    nov, r = np.broadcast_arrays(nov, r)
    alpha = ggx_alpha(r)[..., None]
    xi = hammersley(samples)
    a2 = alpha**2
    cos_t = np.sqrt((1.0 - xi[:, 0]) / (1.0 + (a2 - 1.0) * xi[:, 0]))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    hx = sin_t * np.cos(2.0 * np.pi * xi[:, 1])
    v = nov[..., None]
    vx = np.sqrt(np.maximum(0.0, 1.0 - v * v))
    voh = vx * hx + v * cos_t
    nol = 2.0 * voh * cos_t - v
    noh = cos_t
    ok = (nol > 0.0) & (voh > 0.0)
    nol_c = np.where(ok, nol, 1.0)
    g = smith_visibility(nol_c, v, alpha) * 4.0 * voh * nol_c / noh
    g = np.where(ok, g, 0.0)
    fc = (1.0 - np.clip(voh, 0.0, 1.0)) ** 5
    return np.stack([((1.0 - fc) * g).mean(-1), (fc * g).mean(-1)], -1)


@lru_cache(maxsize=4)
def _dfg_cached(resolution: int, samples: int) -> np.ndarray:
    c = (np.arange(resolution) + 0.5) / resolution
    N, R = np.meshgrid(c, c, indexing="ij")
    # both scalars are bounded by the directional albedo (<= 1); clip the
    # quadrature error of small sample sets
    lut = np.clip(dfg_integrate(N, R, samples), 0.0, 1.0)
    lut.setflags(write=False)
    return lut


def precompute_dfg_lut(resolution: int = 64, samples: int = 1024) -> np.ndarray:
    """Table of (F1, F2) indexed [NoV cell, roughness cell] at cell centres."""
    if resolution < 16 or samples < 256:
        raise ValueError("DFG table needs resolution >= 16 and samples >= 256")
    return _dfg_cached(int(resolution), int(samples))


def _grid_weights(x, res):
    """Linear interpolation coordinates over cell centres with clamping."""
    u = np.asarray(x) * res - 0.5
    inside = (u > 0.0) & (u < res - 1.0)
    u = np.clip(u, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    return i0, u - i0, inside * float(res)


def sample_dfg(lut, nov, roughness):
    """Bilinear (F1, F2) plus their partials w.r.t. NoV and roughness."""
    res = lut.shape[0]
    i0, fi, di = _grid_weights(nov, res)
    j0, fj, dj = _grid_weights(roughness, res)
    a = lut[i0, j0]
    b = lut[i0, j0 + 1]
    c = lut[i0 + 1, j0]
    d = lut[i0 + 1, j0 + 1]
    fi_, fj_ = fi[..., None], fj[..., None]
    val = (1 - fi_) * (1 - fj_) * a + (1 - fi_) * fj_ * b + fi_ * (1 - fj_) * c + fi_ * fj_ * d
    d_nov = ((1 - fj_) * (c - a) + fj_ * (d - b)) * di[..., None]
    d_r = ((1 - fi_) * (b - a) + fi_ * (d - c)) * dj[..., None]
    return val, d_nov, d_r


# --- environment prefiltering ------------------------------------------------

def level_resolutions(res: int, levels: int) -> list[int]:
    if res < 8 or res & (res - 1):
        raise ValueError(f"cubemap resolution must be a power of two >= 8, got {res}")
    return [max(res >> k, 8) for k in range(levels)]


def prefilter_operator(out_res: int, roughness: float, samples: int,
                       seed: int = 0) -> sp.csr_matrix:
    """Sparse GGX prefilter (normal = view = reflection direction) on an
    out_res cubemap; the full-resolution radiance is box-reduced to out_res
    before it is applied. Rows sum to one."""
    N = envmap.texel_directions(out_res).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    xi = np.mod(hammersley(samples)[None, :, :] + rng.random((len(N), 1, 2)), 1.0)
    h = ggx_half_vectors(xi, float(ggx_alpha(roughness)))
    t, b = orthonormal_basis(N)
    H = h[..., 0:1] * t[:, None] + h[..., 1:2] * b[:, None] + h[..., 2:3] * N[:, None]
    noh = np.einsum("nsk,nk->ns", H, N)
    L = 2.0 * noh[..., None] * H - N[:, None]
    nol = 2.0 * noh**2 - 1.0
    w = np.where(nol > 0.0, nol, 0.0)
    w /= w.sum(1, keepdims=True)
    lk = envmap.cube_lookup(out_res, L.reshape(-1, 3))
    rows = np.repeat(np.arange(len(N)), samples * 4)
    vals = (lk.weight * w.reshape(-1, 1)).ravel()
    return sp.csr_matrix((vals, (rows, lk.index.ravel())), shape=(len(N), 6 * out_res**2))


def irradiance_operator(res: int, sub: int = 4) -> np.ndarray:
    """Dense map from a res-resolution cubemap to cosine-weighted irradiance at
    res texel directions, integrating each source texel on a sub x sub grid."""
    out = envmap.texel_directions(res).reshape(-1, 3)
    s, t = envmap._face_grid(res, sub)
    x0 = np.linspace(-1.0, 1.0, res * sub + 1)
    X0, Y0 = np.meshgrid(x0[:-1], x0[:-1])
    X1, Y1 = np.meshgrid(x0[1:], x0[1:])
    A = envmap._area
    dw = A(X0, Y0) - A(X0, Y1) - A(X1, Y0) + A(X1, Y1)
    M = np.zeros((len(out), 6 * res * res))
    for f in range(6):
        d = envmap.face_directions(f, s, t)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        cos = np.maximum(out @ d.reshape(-1, 3).T, 0.0) * dw.ravel()  # (n_out, (res*sub)^2)
        cos = cos.reshape(len(out), res, sub, res, sub).sum(axis=(2, 4))
        M[:, f * res * res:(f + 1) * res * res] = cos.reshape(len(out), -1)
    return M


@dataclass(frozen=True)
class PrefilterOps:
    res: int
    level_res: tuple
    # level k = specular[k] @ boxes[k] applied to the base cubemap; None = identity
    specular: tuple
    boxes: tuple
    irr_box: sp.csr_matrix | None
    irr_res: int
    irradiance: np.ndarray


@lru_cache(maxsize=4)
def prefilter_ops(res: int, levels: int = DEFAULT_LEVELS, samples: int = 256,
                  seed: int = 0) -> PrefilterOps:
    lres = level_resolutions(res, levels)
    ops, boxes = [], []
    for k, r_out in enumerate(lres):
        rough = k / (levels - 1)
        ops.append(None if k == 0 else prefilter_operator(r_out, rough, samples, seed + k))
        boxes.append(envmap.box_matrix(res, r_out) if r_out != res else None)
    irr_res = min(IRRADIANCE_RES, res)
    box = envmap.box_matrix(res, irr_res) if irr_res != res else None
    return PrefilterOps(res, tuple(lres), tuple(ops), tuple(boxes), box, irr_res,
                        irradiance_operator(irr_res))


def _apply(op, x):
    return x if op is None else op @ x


def _apply_t(op, x):
    return x if op is None else op.T @ x


@dataclass
class EnvironmentLight:
    """Cubemap radiance (6, R, R, 3) with its split-sum precomputations."""
    radiance: np.ndarray
    levels: int = DEFAULT_LEVELS
    samples: int = 256
    seed: int = 0
    specular: list | None = None
    irradiance: np.ndarray | None = None
    dfg: np.ndarray = field(default_factory=precompute_dfg_lut)

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if self.radiance.ndim != 4 or self.radiance.shape[0] != 6 or self.radiance.shape[-1] != 3:
            raise ValueError(f"radiance must be (6, R, R, 3), got {self.radiance.shape}")

    @property
    def resolution(self) -> int:
        return self.radiance.shape[1]

    @classmethod
    def constant(cls, res: int, value=1.0, **kw) -> "EnvironmentLight":
        v = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.broadcast_to(v, (6, res, res, 3)).copy(), **kw)

    @property
    def prefiltered(self) -> bool:
        return self.specular is not None and self.irradiance is not None

    def ops(self) -> PrefilterOps:
        return prefilter_ops(self.resolution, self.levels, self.samples, self.seed)

    def prefilter(self) -> "EnvironmentLight":
        """Fill the specular mip chain and irradiance map from the radiance."""
        if not (np.all(np.isfinite(self.radiance)) and self.radiance.min() >= 0.0):
            raise ValueError("environment radiance must be finite and non-negative")
        ops = self.ops()
        flat = self.radiance.reshape(-1, 3)
        self.specular = [_apply(op, _apply(box, flat)).reshape(6, r, r, 3)
                         for op, box, r in zip(ops.specular, ops.boxes, ops.level_res)]
        low = _apply(ops.irr_box, flat)
        self.irradiance = (ops.irradiance @ low).reshape(6, ops.irr_res, ops.irr_res, 3)
        return self

    def radiance_grad(self, g_specular: list, g_irradiance: np.ndarray) -> np.ndarray:
        """Pull gradients on the mip chain and irradiance map back to radiance."""
        ops = self.ops()
        g = np.zeros((6 * self.resolution**2, 3))
        for op, box, gs in zip(ops.specular, ops.boxes, g_specular):
            if gs is None:
                continue
            g += _apply_t(box, _apply_t(op, gs.reshape(-1, 3)))
        if g_irradiance is not None:
            gl = ops.irradiance.T @ g_irradiance.reshape(-1, 3)
            g += _apply_t(ops.irr_box, gl)
        return g.reshape(self.radiance.shape)

    def copy(self) -> "EnvironmentLight":
        return EnvironmentLight(self.radiance.copy(), self.levels, self.samples, self.seed,
                                None if self.specular is None else [s.copy() for s in self.specular],
                                None if self.irradiance is None else self.irradiance.copy(),
                                self.dfg)


def prefilter_environment(radiance, mip_levels: int = DEFAULT_LEVELS, samples: int = 256,
                          seed: int = 0) -> EnvironmentLight:
    return EnvironmentLight(radiance, mip_levels, samples, seed).prefilter()


# --- split-sum shading -------------------------------------------------------

@dataclass
class ShadeCache:
    mask: np.ndarray  # flat indices of covered pixels
    view: np.ndarray
    nov_raw: np.ndarray
    refl: np.ndarray
    irr: object
    irr_val: np.ndarray
    spec_lk: list
    spec_val: list
    k0: np.ndarray
    frac: np.ndarray
    spec: np.ndarray
    F: np.ndarray
    dF_nov: np.ndarray
    dF_r: np.ndarray
    color: np.ndarray
    background: np.ndarray | None


def _view_dirs(cam: Camera) -> np.ndarray:
    _, d = cam.world_rays()
    return -d.reshape(-1, 3)


def shade_points(albedo, roughness, metallic, normal, view, env: EnvironmentLight,
                 printed_form: bool = False):
    """Split-sum shade for flat arrays of surface points. Returns (rgb, cache)."""
    if not env.prefiltered:
        env.prefilter()
    n = np.asarray(normal, dtype=np.float64)
    v = np.asarray(view, dtype=np.float64)
    a = np.asarray(albedo, dtype=np.float64)
    r = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0)
    m = np.asarray(metallic, dtype=np.float64)
    nov_raw = np.einsum("nk,nk->n", n, v)
    nov = np.maximum(nov_raw, NOV_MIN)
    refl = 2.0 * nov_raw[:, None] * n - v

    irr_lk = envmap.cube_lookup(env.irradiance.shape[1], n)
    irr = irr_lk.apply(env.irradiance)

    L = env.levels
    lev = r * (L - 1)
    k0 = np.minimum(np.floor(lev).astype(np.int64), L - 2)
    frac = lev - k0
    spec = np.zeros((len(n), 3))
    lks, vals = [], []
    for k in range(L):
        sel = (k0 == k) | (k0 + 1 == k)
        lk = envmap.cube_lookup(env.specular[k].shape[1], refl) if sel.any() else None
        val = lk.apply(env.specular[k]) if lk is not None else None
        lks.append(lk)
        vals.append(val)
        if lk is None:
            continue
        wk = np.where(k0 == k, 1.0 - frac, 0.0) + np.where(k0 + 1 == k, frac, 0.0)
        spec += wk[:, None] * val

    F, dF_nov, dF_r = sample_dfg(env.dfg, nov, r)
    F0 = 0.04 * (1.0 - m[:, None]) + m[:, None] * a
    diffuse = a * (1.0 - m[:, None]) / np.pi * irr
    if printed_form:
        specular = spec * F0 * F[:, 0:1] + F[:, 1:2]
    else:
        specular = spec * (F0 * F[:, 0:1] + F[:, 1:2])
    color = diffuse + specular
    cache = ShadeCache(np.arange(len(n)), v, nov_raw, refl, irr_lk, irr, lks, vals, k0, frac,
                       spec, F, dF_nov, dF_r, color, None)
    return color, cache


def shade_points_adjoint(albedo, roughness, metallic, normal, env: EnvironmentLight,
                         cache: ShadeCache, g_color, printed_form: bool = False):
    """Reverse of shade_points. Returns (g_albedo, g_roughness, g_metallic,
    g_normal, g_specular_levels, g_irradiance)."""
    a = np.asarray(albedo, dtype=np.float64)
    r = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0)
    m = np.asarray(metallic, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    g = np.asarray(g_color, dtype=np.float64)
    v = cache.view
    F = cache.F
    m1 = m[:, None]
    F0 = 0.04 * (1.0 - m1) + m1 * a
    spec = cache.spec

    g_a = g * (1.0 - m1) / np.pi * cache.irr_val
    g_m = -(g * a / np.pi * cache.irr_val).sum(1)
    g_irr = g * a * (1.0 - m1) / np.pi
    if printed_form:
        g_spec = g * F0 * F[:, 0:1]
        g_F0 = g * spec * F[:, 0:1]
        g_F1 = (g * spec * F0).sum(1)
        g_F2 = g.sum(1)
    else:
        g_spec = g * (F0 * F[:, 0:1] + F[:, 1:2])
        g_F0 = g * spec * F[:, 0:1]
        g_F1 = (g * spec * F0).sum(1)
        g_F2 = (g * spec).sum(1)
    g_a += g_F0 * m1
    g_m += (g_F0 * (a - 0.04)).sum(1)

    L = env.levels
    g_r = np.zeros(len(n))
    g_refl = np.zeros((len(n), 3))
    g_levels = [None] * L
    for k in range(L):
        lk = cache.spec_lk[k]
        if lk is None:
            continue
        wk = np.where(cache.k0 == k, 1.0 - cache.frac, 0.0) + np.where(cache.k0 + 1 == k, cache.frac, 0.0)
        dwk = np.where(cache.k0 == k, -1.0, 0.0) + np.where(cache.k0 + 1 == k, 1.0, 0.0)
        g_r += (L - 1) * dwk * (g_spec * cache.spec_val[k]).sum(1)
        g_refl += wk[:, None] * np.einsum("nc,ncd->nd", g_spec, lk.direction_grad(env.specular[k]))
        g_levels[k] = lk.adjoint(wk[:, None] * g_spec)
    # roughness outside [0, 1] is clamped
    rr = np.asarray(roughness, dtype=np.float64)
    g_r = np.where((rr >= 0.0) & (rr <= 1.0), g_r, 0.0)

    g_F = np.stack([g_F1, g_F2], -1)
    g_nov = (g_F * cache.dF_nov).sum(1) * (cache.nov_raw > NOV_MIN)
    g_r += (g_F * cache.dF_r).sum(1) * ((rr >= 0.0) & (rr <= 1.0))

    nov_raw = cache.nov_raw
    g_n = g_nov[:, None] * v
    g_n += 2.0 * nov_raw[:, None] * g_refl + 2.0 * np.einsum("nk,nk->n", g_refl, n)[:, None] * v
    g_n += np.einsum("nc,ncd->nd", g_irr, cache.irr.direction_grad(env.irradiance))
    g_irr_tex = cache.irr.adjoint(g_irr)
    return g_a, g_r, g_m, g_n, g_levels, g_irr_tex


def shade_deferred(gb, env: EnvironmentLight, cam: Camera, background=None,
                   printed_form: bool = False, return_cache: bool = False):
    """Shade a GBuffer into a linear HDR image (H, W, 3).

    background: None for black, "env" to show the environment behind the
    object, or an (H, W, 3) image.
    """
    H, W = gb.alpha.shape
    A = gb.alpha.reshape(-1)
    covered = np.flatnonzero(A > COVERED_ALPHA)
    view = _view_dirs(cam)
    color, cache = shade_points(gb.albedo.reshape(-1, 3)[covered], gb.roughness.reshape(-1)[covered],
                                gb.metallic.reshape(-1)[covered], gb.normal.reshape(-1, 3)[covered],
                                view[covered], env, printed_form)
    cache.mask = covered
    out = np.zeros((H * W, 3))
    out[covered] = A[covered, None] * color
    if background is not None:
        if isinstance(background, str) and background == "env":
            bg = envmap.sample_cube(env.radiance, -view)
        else:
            bg = np.asarray(background, dtype=np.float64).reshape(-1, 3)
        cache.background = bg
        out += (1.0 - A[:, None]) * bg
    out = out.reshape(H, W, 3)
    return (out, cache) if return_cache else out


def shade_adjoint(gb, env: EnvironmentLight, cam: Camera, g_image, cache: ShadeCache | None = None,
                  background=None, printed_form: bool = False):
    """Gradients of sum(g_image * shade_deferred(...)).

    Returns (channel gradients dict for rasterize_adjoint, radiance gradient
    (6, R, R, 3)). Environment gradients flow through the prefilter and
    irradiance operators to the base cubemap texels.
    """
    if cache is None:
        _, cache = shade_deferred(gb, env, cam, background, printed_form, return_cache=True)
    H, W = gb.alpha.shape
    g = np.asarray(g_image, dtype=np.float64).reshape(-1, 3)
    A = gb.alpha.reshape(-1)
    cov = cache.mask
    g_alpha = np.zeros(H * W)
    g_alpha[cov] = (g[cov] * cache.color).sum(1)
    g_env = np.zeros_like(env.radiance)
    if cache.background is not None:
        g_alpha -= (g * cache.background).sum(1)
        if isinstance(background, str) and background == "env":
            lk = envmap.cube_lookup(env.resolution, -_view_dirs(cam))
            g_env += lk.adjoint((1.0 - A[:, None]) * g)
    ga, gr, gm, gn, g_levels, g_irr = shade_points_adjoint(
        gb.albedo.reshape(-1, 3)[cov], gb.roughness.reshape(-1)[cov], gb.metallic.reshape(-1)[cov],
        gb.normal.reshape(-1, 3)[cov], env, cache, A[cov, None] * g[cov], printed_form)
    chans = {
        "albedo": np.zeros((H * W, 3)), "roughness": np.zeros(H * W),
        "metallic": np.zeros(H * W), "normal": np.zeros((H * W, 3)),
    }
    chans["albedo"][cov] = ga
    chans["roughness"][cov] = gr
    chans["metallic"][cov] = gm
    chans["normal"][cov] = gn
    out = {k: v.reshape(H, W, *v.shape[1:]) for k, v in chans.items()}
    out["alpha"] = g_alpha.reshape(H, W)
    g_env += env.radiance_grad(g_levels, g_irr)
    return out, g_env


# --- Monte-Carlo reference ---------------------------------------------------

_FACE_TABLE = np.array([
    [0, 1, 2, -1, 1, -1],
    [0, -1, 2, 1, 1, -1],
    [1, 1, 0, 1, 2, 1],
    [1, -1, 0, 1, 2, -1],
    [2, 1, 0, 1, 1, -1],
    [2, -1, 0, -1, 1, -1],
], dtype=np.int64)


@numba.njit(cache=True)
def _cube_fetch(tex, table, x, y, z, out):
    d = (x, y, z)
    ax, ay, az = abs(x), abs(y), abs(z)
    if ax >= ay and ax >= az:
        f = 0 if x >= 0 else 1
    elif ay >= az:
        f = 2 if y >= 0 else 3
    else:
        f = 4 if z >= 0 else 5
    ma = d[table[f, 0]] * table[f, 1]
    s = d[table[f, 2]] * table[f, 3] / ma
    t = d[table[f, 4]] * table[f, 5] / ma
    R = tex.shape[1]
    u = min(max((s + 1.0) * 0.5 * R - 0.5, 0.0), R - 1.0)
    v = min(max((t + 1.0) * 0.5 * R - 0.5, 0.0), R - 1.0)
    j0 = min(int(math.floor(u)), R - 2)
    i0 = min(int(math.floor(v)), R - 2)
    fu = u - j0
    fv = v - i0
    for c in range(3):
        out[c] = ((1 - fu) * (1 - fv) * tex[f, i0, j0, c] + fu * (1 - fv) * tex[f, i0, j0 + 1, c]
                  + (1 - fu) * fv * tex[f, i0 + 1, j0, c] + fu * fv * tex[f, i0 + 1, j0 + 1, c])


@numba.njit(cache=True, inline="always")
def _splitmix(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15))
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, parallel=True)
def _mc_kernel(albedo, rough, metal, normal, view, tex, table, samples, seed, lobes, out):
    """lobes: 0 both, 1 diffuse only, 2 specular only."""
    for p in numba.prange(albedo.shape[0]):
        state = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + np.uint64(p) * np.uint64(0xD1B54A32D192ED03)
        nx, ny, nz = normal[p, 0], normal[p, 1], normal[p, 2]
        vx, vy, vz = view[p, 0], view[p, 1], view[p, 2]
        nov = max(nx * vx + ny * vy + nz * vz, 1e-4)
        sign = 1.0 if nz >= 0.0 else -1.0
        a_ = -1.0 / (sign + nz)
        b_ = nx * ny * a_
        tx, ty, tz = 1.0 + sign * nx * nx * a_, sign * b_, -sign * nx
        bx, by, bz = b_, sign + ny * ny * a_, -ny
        alpha = max(rough[p] * rough[p], 1e-6)
        a2 = alpha * alpha
        m = metal[p]
        kd = np.empty(3)
        f0 = np.empty(3)
        for c in range(3):
            kd[c] = albedo[p, c] * (1.0 - m) / math.pi
            f0[c] = 0.04 * (1.0 - m) + m * albedo[p, c]
        if lobes == 2:
            for c in range(3):
                kd[c] = 0.0
        acc = np.zeros(3)
        Le = np.empty(3)
        for i in range(samples):
            for strategy in range(2):
                state, u1 = _splitmix(state)
                state, u2 = _splitmix(state)
                phi = 2.0 * math.pi * u2
                if strategy == 0:
                    r = math.sqrt(u1)
                    lx_, ly_, lz_ = r * math.cos(phi), r * math.sin(phi), math.sqrt(max(0.0, 1.0 - u1))
                    lx = lx_ * tx + ly_ * bx + lz_ * nx
                    ly = lx_ * ty + ly_ * by + lz_ * ny
                    lz = lx_ * tz + ly_ * bz + lz_ * nz
                else:
                    ct = math.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
                    st = math.sqrt(max(0.0, 1.0 - ct * ct))
                    hx_, hy_ = st * math.cos(phi), st * math.sin(phi)
                    hx = hx_ * tx + hy_ * bx + ct * nx
                    hy = hx_ * ty + hy_ * by + ct * ny
                    hz = hx_ * tz + hy_ * bz + ct * nz
                    voh = vx * hx + vy * hy + vz * hz
                    lx = 2.0 * voh * hx - vx
                    ly = 2.0 * voh * hy - vy
                    lz = 2.0 * voh * hz - vz
                nol = lx * nx + ly * ny + lz * nz
                if nol <= 0.0:
                    continue
                hx, hy, hz = lx + vx, ly + vy, lz + vz
                hn = math.sqrt(hx * hx + hy * hy + hz * hz)
                if hn < 1e-12:
                    continue
                hx /= hn
                hy /= hn
                hz /= hn
                noh = max(hx * nx + hy * ny + hz * nz, 0.0)
                voh = max(hx * vx + hy * vy + hz * vz, 1e-12)
                dd = noh * noh * (a2 - 1.0) + 1.0
                D = a2 / (math.pi * dd * dd)
                gv = nol * math.sqrt(nov * nov * (1.0 - a2) + a2)
                gl = nov * math.sqrt(nol * nol * (1.0 - a2) + a2)
                vis = 0.5 / (gv + gl)
                pdf = nol / math.pi + D * noh / (4.0 * voh)
                fc = (1.0 - voh) ** 5
                _cube_fetch(tex, table, lx, ly, lz, Le)
                for c in range(3):
                    fs = 0.0
                    if lobes != 1:
                        fs = D * vis * (f0[c] + (1.0 - f0[c]) * fc)
                    acc[c] += (kd[c] + fs) * Le[c] * nol / pdf
        for c in range(3):
            out[p, c] = acc[c] / samples


def mc_reference_points(albedo, roughness, metallic, normal, view, radiance, samples: int = 4096,
                        seed: int = 0, lobes: str = "both") -> np.ndarray:
    """Monte-Carlo rendering-equation estimate for many points at once,
    multiple-importance combining cosine and GGX sampling (balance heuristic,
    one sample of each per iteration). Deterministic for a given seed,
    independent of thread count."""
    code = {"both": 0, "diffuse": 1, "specular": 2}[lobes]
    albedo = np.ascontiguousarray(np.atleast_2d(albedo), dtype=np.float64)
    n = len(albedo)
    bc = lambda x, shape: np.ascontiguousarray(np.broadcast_to(np.asarray(x, np.float64), shape))
    nrm = bc(normal, (n, 3))
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    vw = bc(view, (n, 3))
    vw = vw / np.linalg.norm(vw, axis=1, keepdims=True)
    out = np.zeros((n, 3))
    _mc_kernel(albedo, bc(roughness, (n,)), bc(metallic, (n,)), nrm, vw,
               np.ascontiguousarray(radiance, dtype=np.float64), _FACE_TABLE,
               int(samples), int(seed) & 0xFFFFFFFF, code, out)
    return out


def mc_reference_shade(albedo, roughness, metallic, normal, view, radiance, samples: int = 4096,
                       seed: int = 0, lobes: str = "both") -> np.ndarray:
    """Monte-Carlo shade of a single point; see mc_reference_points."""
    if samples < 1024:
        raise ValueError("the Monte-Carlo reference needs at least 1024 samples")
    return mc_reference_points(np.reshape(albedo, (1, 3)), [roughness], [metallic],
                               np.reshape(normal, (1, 3)), np.reshape(view, (1, 3)), radiance,
                               samples, seed, lobes)[0]
