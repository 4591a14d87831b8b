"""Cubemap plumbing: face mapping, texel geometry, bilinear lookup with
gradients, box pyramids and equirectangular conversion.

Faces follow the OpenGL order and orientation (+X, -X, +Y, -Y, +Z, -Z). The
world is z-up; cubemaps are indexed directly by world direction. Texel
(row i, col j) of an R x R face covers face coordinates s in
[2j/R - 1, 2(j+1)/R - 1] and t likewise for rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")


def face_directions(face: int, s, t):
    """Unnormalised world direction for face coordinates s, t in [-1, 1]."""
    one = np.ones_like(s)
    if face == 0:
        return np.stack([one, -t, -s], -1)
    if face == 1:
        return np.stack([-one, -t, s], -1)
    if face == 2:
        return np.stack([s, one, t], -1)
    if face == 3:
        return np.stack([s, -one, -t], -1)
    if face == 4:
        return np.stack([s, -t, one], -1)
    return np.stack([-s, -t, -one], -1)


def _face_grid(res: int, sub: int = 1):
    c = (np.arange(res * sub) + 0.5) / (res * sub) * 2.0 - 1.0
    s, t = np.meshgrid(c, c)  # s varies along columns, t along rows
    return s, t


def texel_directions(res: int) -> np.ndarray:
    """Unit directions through texel centres, shape (6, res, res, 3)."""
    s, t = _face_grid(res)
    d = np.stack([face_directions(f, s, t) for f in range(6)])
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _area(x, y):
    return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))


def texel_solid_angles(res: int) -> np.ndarray:
    """Exact solid angle of each texel, shape (6, res, res); sums to 4 pi."""
    e = np.linspace(-1.0, 1.0, res + 1)
    x0, y0 = np.meshgrid(e[:-1], e[:-1])
    x1, y1 = np.meshgrid(e[1:], e[1:])
    w = _area(x0, y0) - _area(x0, y1) - _area(x1, y0) + _area(x1, y1)
    return np.broadcast_to(w, (6, res, res)).copy()


def direction_to_face(d):
    """Face index and face coordinates (s, t) in [-1, 1] for directions (n, 3),
    plus the Jacobians ds/dd and dt/dd (n, 3)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    face = np.where((ax >= ay) & (ax >= az), np.where(x >= 0, 0, 1),
                    np.where(ay >= az, np.where(y >= 0, 2, 3), np.where(z >= 0, 4, 5)))
    n = len(d)
    # per face: (major axis, sign), (sc axis, sign), (tc axis, sign)
    table = np.array([
        [0, 1, 2, -1, 1, -1],
        [0, -1, 2, 1, 1, -1],
        [1, 1, 0, 1, 2, 1],
        [1, -1, 0, 1, 2, -1],
        [2, 1, 0, 1, 1, -1],
        [2, -1, 0, -1, 1, -1],
    ])
    T = table[face]
    rows = np.arange(n)
    ma = d[rows, T[:, 0]] * T[:, 1]  # positive
    ma = np.maximum(ma, 1e-300)
    sc = d[rows, T[:, 2]] * T[:, 3]
    tc = d[rows, T[:, 4]] * T[:, 5]
    s = sc / ma
    t = tc / ma
    ds = np.zeros((n, 3))
    dt = np.zeros((n, 3))
    ds[rows, T[:, 2]] += T[:, 3] / ma
    ds[rows, T[:, 0]] += -s / ma * T[:, 1]
    dt[rows, T[:, 4]] += T[:, 5] / ma
    dt[rows, T[:, 0]] += -t / ma * T[:, 1]
    return face, s, t, ds, dt


@dataclass
class CubeLookup:
    """Bilinear footprint of a batch of cubemap queries: four flat texel
    indices and weights per query, plus the derivative of the weights with
    respect to the query direction (for gradients through the lookup)."""
    res: int
    index: np.ndarray  # (n, 4) flat texel index into (6 * res * res)
    weight: np.ndarray  # (n, 4)
    dweight: np.ndarray  # (n, 4, 3)

    def apply(self, tex: np.ndarray) -> np.ndarray:
        flat = tex.reshape(6 * self.res * self.res, -1)
        return np.einsum("nk,nkc->nc", self.weight, flat[self.index])

    def direction_grad(self, tex: np.ndarray) -> np.ndarray:
        """d(value)/d(direction), shape (n, channels, 3)."""
        flat = tex.reshape(6 * self.res * self.res, -1)
        return np.einsum("nkd,nkc->ncd", self.dweight, flat[self.index])

    def adjoint(self, grad_values: np.ndarray) -> np.ndarray:
        """Scatter per-query value gradients back to texels, shape (6, R, R, C)."""
        C = grad_values.shape[1]
        out = np.zeros((6 * self.res * self.res, C))
        contrib = self.weight[:, :, None] * grad_values[:, None, :]
        for c in range(C):
            out[:, c] = np.bincount(self.index.ravel(), contrib[:, :, c].ravel(),
                                    minlength=len(out))
        return out.reshape(6, self.res, self.res, C)

    def matrix(self) -> sp.csr_matrix:
        n = len(self.index)
        rows = np.repeat(np.arange(n), 4)
        return sp.csr_matrix((self.weight.ravel(), (rows, self.index.ravel())),
                             shape=(n, 6 * self.res * self.res))


def cube_lookup(res: int, dirs) -> CubeLookup:
    """Bilinear lookup footprint for directions (n, 3), clamped at face edges."""
    face, s, t, ds, dt = direction_to_face(dirs)
    u = (s + 1.0) * 0.5 * res - 0.5  # continuous texel column (centres at integers)
    v = (t + 1.0) * 0.5 * res - 0.5
    du = ds * (0.5 * res)
    dv = dt * (0.5 * res)
    hi = res - 1.0
    mu = (u > 0.0) & (u < hi)
    mv = (v > 0.0) & (v < hi)
    u = np.clip(u, 0.0, hi)
    v = np.clip(v, 0.0, hi)
    du = du * mu[:, None]
    dv = dv * mv[:, None]
    if res == 1:
        i0 = np.zeros(len(u), dtype=np.int64)
        j0 = i0
        fu = fv = np.zeros(len(u))
        i1 = j1 = i0
    else:
        j0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        i0 = np.minimum(np.floor(v).astype(np.int64), res - 2)
        fu = u - j0
        fv = v - i0
        j1 = j0 + 1
        i1 = i0 + 1
    base = face * res * res
    index = np.stack([base + i0 * res + j0, base + i0 * res + j1,
                      base + i1 * res + j0, base + i1 * res + j1], -1)
    weight = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], -1)
    dweight = np.stack([
        -du * (1 - fv)[:, None] - dv * (1 - fu)[:, None],
        du * (1 - fv)[:, None] - dv * fu[:, None],
        -du * fv[:, None] + dv * (1 - fu)[:, None],
        du * fv[:, None] + dv * fu[:, None],
    ], 1)
    return CubeLookup(res, index, weight, dweight)


def sample_cube(tex: np.ndarray, dirs) -> np.ndarray:
    """Bilinear radiance lookup; tex is (6, R, R, C), dirs (..., 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    lead = dirs.shape[:-1]
    lk = cube_lookup(tex.shape[1], dirs.reshape(-1, 3))
    return lk.apply(tex).reshape(*lead, tex.shape[-1])


def downsample(tex: np.ndarray) -> np.ndarray:
    """2 x 2 box reduction of every face."""
    f, r, _, c = tex.shape
    return tex.reshape(f, r // 2, 2, r // 2, 2, c).mean(axis=(2, 4))


def box_matrix(res: int, out_res: int) -> sp.csr_matrix:
    """Sparse operator averaging res-resolution texels into out_res texels."""
    if res % out_res:
        raise ValueError(f"cannot box-reduce {res} to {out_res}")
    k = res // out_res
    f, i, j = np.meshgrid(np.arange(6), np.arange(res), np.arange(res), indexing="ij")
    src = (f * res * res + i * res + j).ravel()
    dst = (f * out_res * out_res + (i // k) * out_res + (j // k)).ravel()
    return sp.csr_matrix((np.full(src.size, 1.0 / (k * k)), (dst, src)),
                         shape=(6 * out_res * out_res, 6 * res * res))


def cube_energy(tex: np.ndarray) -> np.ndarray:
    """Integral of radiance over the sphere, per channel."""
    w = texel_solid_angles(tex.shape[1])
    return np.einsum("fij,fijc->c", w, tex)


# --- equirectangular <-> cubemap -------------------------------------------
# Equirect rows run from +z (top) to -z; columns run in azimuth
# phi = atan2(y, x) from 0 at the left edge to 2 pi at the right.

def equirect_directions(height: int, width: int) -> np.ndarray:
    theta = (np.arange(height) + 0.5) / height * np.pi
    phi = (np.arange(width) + 0.5) / width * 2.0 * np.pi
    P, T = np.meshgrid(phi, theta)
    return np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)


def sample_equirect(img: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear lookup in an equirect image, wrapping in azimuth."""
    H, W = img.shape[:2]
    d = dirs.reshape(-1, 3)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * np.pi)
    v = np.clip(theta / np.pi * H - 0.5, 0.0, H - 1.0)
    u = phi / (2.0 * np.pi) * W - 0.5
    i0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    fv = v - i0
    i1 = np.minimum(i0 + 1, H - 1)
    j0f = np.floor(u)
    fu = u - j0f
    j0 = np.mod(j0f.astype(np.int64), W)
    j1 = np.mod(j0 + 1, W)
    out = ((1 - fu)[:, None] * (1 - fv)[:, None] * img[i0, j0]
           + fu[:, None] * (1 - fv)[:, None] * img[i0, j1]
           + (1 - fu)[:, None] * fv[:, None] * img[i1, j0]
           + fu[:, None] * fv[:, None] * img[i1, j1])
    return out.reshape(*dirs.shape[:-1], img.shape[-1])


def equirect_to_cube(img: np.ndarray, res: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return sample_equirect(img, texel_directions(res))


def cube_to_equirect(tex: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    width = 2 * height if width is None else width
    return sample_cube(tex, equirect_directions(height, width))


def rotate_cube(tex: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Environment rotated by R: new(d) = old(R^T d)."""
    d = texel_directions(tex.shape[1]) @ R  # row-vector form of R^T d
    return sample_cube(tex, d)
