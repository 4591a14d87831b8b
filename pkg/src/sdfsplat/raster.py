"""Differentiable 2D-Gaussian (surfel) rasterizer with deferred-shading outputs.

Forward: project disks, bin them into 16x16 tiles sorted by centre depth,
blend front to back per pixel and retain every contributor. Backward: exact
reverse accumulation over the retained contributors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .camera import Camera
from .gaussians import GaussianCloud, rotmat_grad_to_quat, sdf_to_opacity_grad

TILE = 8
# entry-buffer size that sufficed last time, per image size; results never depend on it
_capacity_hint: dict = {}
MODES = ("deferred-pbr", "forward-color")
DISTORTION_FORMS = ("abs", "ndc-sq")
# depth range of the "ndc-sq" distortion mapping
DISTORTION_NEAR = 0.2
DISTORTION_FAR = 100.0


class ForwardNotRetained(RuntimeError):
    pass


@dataclass
class SplatScreen:
    """Screen-space footprints of the primitives that survived culling."""

    index: np.ndarray  # (M,) index into the cloud
    p: np.ndarray  # (M, 3) camera-space centre
    tu: np.ndarray  # (M, 3) camera-space tangent axes
    tv: np.ndarray
    n: np.ndarray  # (M, 3) tu x tv in camera space
    su: np.ndarray
    sv: np.ndarray
    depth: np.ndarray  # view-space centre depth
    center_px: np.ndarray  # (M, 2) projected centre, continuous pixel coordinates
    bbox: np.ndarray  # (M, 4) xmin, xmax, ymin, ymax in continuous pixel coordinates

    def __len__(self):
        return self.index.shape[0]


def project_gaussians(cloud: GaussianCloud, cam: Camera) -> SplatScreen:
    R = cloud.rotation_matrices
    scales = cloud.scales
    p = cam.to_camera(cloud.positions)
    tu = R[:, :, 0] @ cam.rotation.T
    tv = R[:, :, 1] @ cam.rotation.T
    keep = p[:, 2] > cam.near
    keep &= np.all(scales > 1e-9, axis=1)

    # 3-sigma rectangle corners of every disk
    cu = 3.0 * scales[:, :1] * tu
    cv = 3.0 * scales[:, 1:] * tv
    corners = np.stack([p + cu + cv, p + cu - cv, p - cu + cv, p - cu - cv], axis=1)
    cz = corners[..., 2]
    safe = np.all(cz > 1e-6, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cx = cam.fx * corners[..., 0] / cz + cam.cx
        cy = cam.fy * corners[..., 1] / cz + cam.cy
    ctr = np.zeros((p.shape[0], 2))
    ctr[keep] = cam.project(p[keep])
    lp = 3.0 * math.sqrt(K.LOWPASS_SIGMA2)
    bbox = np.empty((p.shape[0], 4))
    bbox[:, 0] = np.where(safe, np.min(cx, axis=1), -np.inf)
    bbox[:, 1] = np.where(safe, np.max(cx, axis=1), np.inf)
    bbox[:, 2] = np.where(safe, np.min(cy, axis=1), -np.inf)
    bbox[:, 3] = np.where(safe, np.max(cy, axis=1), np.inf)
    bbox[:, 0] = np.minimum(bbox[:, 0], ctr[:, 0] - lp)
    bbox[:, 1] = np.maximum(bbox[:, 1], ctr[:, 0] + lp)
    bbox[:, 2] = np.minimum(bbox[:, 2], ctr[:, 1] - lp)
    bbox[:, 3] = np.maximum(bbox[:, 3], ctr[:, 1] + lp)
    keep &= (bbox[:, 1] >= 0.5) & (bbox[:, 0] <= cam.width - 0.5)
    keep &= (bbox[:, 3] >= 0.5) & (bbox[:, 2] <= cam.height - 0.5)

    idx = np.flatnonzero(keep)
    tu, tv = tu[idx], tv[idx]
    return SplatScreen(
        index=idx, p=p[idx], tu=tu, tv=tv, n=np.cross(tu, tv),
        su=scales[idx, 0].copy(), sv=scales[idx, 1].copy(), depth=p[idx, 2].copy(),
        center_px=ctr[idx], bbox=bbox[idx],
    )


def ray_splat_intersect(splat: SplatScreen, k: int, direction, pixel=None):
    """Intersect one camera-space ray (through the camera centre) with splat k.

    Returns (u, v, D, g) with g the raw Gaussian response, or None when the
    ray is parallel to the disk, hits behind the near plane, or the disk is
    degenerate. `pixel`, when given, is only used to report the low-pass
    merged response as a fifth value.
    """
    d = np.asarray(direction, dtype=np.float64)
    if splat.su[k] <= 1e-9 or splat.sv[k] <= 1e-9:
        return None
    nrm = splat.n[k]
    M = nrm @ d
    if abs(M) < 1e-8:
        return None
    t = (nrm @ splat.p[k]) / M
    if t <= 0:
        return None
    X = t * d
    e = X - splat.p[k]
    u = e @ splat.tu[k] / splat.su[k]
    v = e @ splat.tv[k] / splat.sv[k]
    D = X[2]
    g = math.exp(-0.5 * (u * u + v * v))
    if pixel is None:
        return u, v, D, g
    r2 = float(np.sum((np.asarray(pixel) - splat.center_px[k]) ** 2))
    g_screen = math.exp(-0.5 * r2 / K.LOWPASS_SIGMA2)
    return u, v, D, g, max(g, g_screen)


@dataclass
class GBuffer:
    width: int
    height: int
    albedo: np.ndarray  # (H, W, 3), sum_i w_i a_i
    roughness: np.ndarray  # (H, W)
    metallic: np.ndarray
    normal: np.ndarray  # (H, W, 3) world space, renormalised
    normal_raw: np.ndarray  # unnormalised sum_i w_i n_i
    depth: np.ndarray  # normalised expected depth
    depth_sum: np.ndarray  # sum_i w_i D_i
    alpha: np.ndarray
    distortion: np.ndarray
    mode: str = "deferred-pbr"
    # contributor lists: pixel p owns entries starts[p] : starts[p] + counts[p],
    # front to back
    starts: np.ndarray | None = None
    counts: np.ndarray | None = None
    e_pixel: np.ndarray | None = None
    e_prim: np.ndarray | None = None  # index into the cloud
    e_splat: np.ndarray | None = None  # index into `splats`
    e_weight: np.ndarray | None = None
    e_alpha: np.ndarray | None = None
    e_T: np.ndarray | None = None
    e_depth: np.ndarray | None = None
    e_branch: np.ndarray | None = None
    e_u: np.ndarray | None = None
    e_v: np.ndarray | None = None
    e_G: np.ndarray | None = None
    e_dist_dw: np.ndarray | None = None
    e_dist_dD: np.ndarray | None = None
    splats: SplatScreen | None = None
    normal_sign: np.ndarray | None = None  # per splat, +1/-1 to face the camera
    extra: dict = field(default_factory=dict)

    @property
    def color(self) -> np.ndarray:
        return self.albedo

    @property
    def retained(self) -> bool:
        return self.starts is not None

    def contributors(self) -> np.ndarray:
        """Sorted unique indices of primitives that reached at least one pixel."""
        if not self.retained:
            raise ForwardNotRetained("forward pass not retained")
        return np.unique(self.e_prim)


def _bin_tiles(splats: SplatScreen, width: int, height: int):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    b = splats.bbox
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(b[:, 0] - 0.5), 0, width - 1).astype(np.int64)
        x1 = np.clip(np.floor(b[:, 1] - 0.5), 0, width - 1).astype(np.int64)
        y0 = np.clip(np.ceil(b[:, 2] - 0.5), 0, height - 1).astype(np.int64)
        y1 = np.clip(np.floor(b[:, 3] - 0.5), 0, height - 1).astype(np.int64)
    ok = (x1 >= x0) & (y1 >= y0)
    tx0, tx1, ty0, ty1 = x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE
    nx = np.where(ok, tx1 - tx0 + 1, 0)
    ny = np.where(ok, ty1 - ty0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    owner = np.repeat(np.arange(len(splats)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    tile_id = ty * tiles_x + tx
    order = np.lexsort((owner, splats.depth[owner], tile_id))
    tile_prims = owner[order].astype(np.int64)
    tile_offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=tile_offsets[1:])
    return tile_offsets, tile_prims


def _entry_order(starts, counts):
    """Entry indices listed pixel by pixel (pixel-major order)."""
    total = int(counts.sum())
    first = np.repeat(starts, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return first + local


def _attributes(cloud: GaussianCloud, splats: SplatScreen):
    """Per-splat blendable attributes: albedo(3), roughness, metallic, normal(3)."""
    R = cloud.rotation_matrices[splats.index]
    # normals are flipped to face the viewer
    sign = np.where(np.sum(splats.n * splats.p, axis=1) > 0, -1.0, 1.0)
    idx = splats.index
    attr = np.concatenate([cloud.albedo[idx], cloud.roughness[idx, None],
                           cloud.metallic[idx, None], R[:, :, 2] * sign[:, None]], axis=1)
    return np.ascontiguousarray(attr), sign, R


def _ndc_depth(D):
    """Reference mapping m = f/(f-n) (1 - n/D), n = 0.2, f = 100, and dm/dD."""
    n, f = DISTORTION_NEAR, DISTORTION_FAR
    k = f / (f - n)
    return k * (1.0 - n / D), k * n / (D * D)


def _distortion_ndc_sq(starts, counts, e_w, e_D):
    """sum_{i,j} w_i w_j (m_i - m_j)^2 = 2 (W Q - S^2) per pixel, with
    W = sum w, S = sum w m, Q = sum w m^2, plus partials in w_i and D_i."""
    npix = len(starts)
    m, dm = _ndc_depth(e_D)
    e_pix = np.empty(len(e_D), dtype=np.int64)
    e_pix[_entry_order(starts, counts)] = np.repeat(np.arange(npix), counts)
    Wp = np.bincount(e_pix, e_w, npix)
    Sp = np.bincount(e_pix, e_w * m, npix)
    Qp = np.bincount(e_pix, e_w * m * m, npix)
    dist = 2.0 * (Wp * Qp - Sp * Sp)
    W, S, Q = Wp[e_pix], Sp[e_pix], Qp[e_pix]
    d_w = 2.0 * (Q + W * m * m - 2.0 * m * S)
    d_D = 4.0 * e_w * (W * m - S) * dm
    return np.maximum(dist, 0.0), d_w, d_D


def rasterize(cloud: GaussianCloud, cam: Camera, mode: str = "deferred-pbr",
              retain: bool = True, distortion: str = "abs") -> GBuffer:
    """Project, sort and blend the cloud into a G-buffer.

    `distortion` selects the per-pixel distortion measure: "abs" is
    sum_{i,j} w_i w_j |D_i - D_j| on view depth; "ndc-sq" is the surfel
    splatting reference form, squared differences of the NDC-mapped depth
    m = f/(f-n) (1 - n/D) with n = 0.2, f = 100.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if distortion not in DISTORTION_FORMS:
        raise ValueError(f"unknown distortion form {distortion!r}; expected one of {DISTORTION_FORMS}")
    W, H = cam.width, cam.height
    splats = project_gaussians(cloud, cam)
    opac = np.ascontiguousarray(cloud.opacity[splats.index])
    attr, sign, _ = _attributes(cloud, splats)
    tile_offsets, tile_prims = _bin_tiles(splats, W, H)

    npix = W * H
    starts = np.zeros(npix, dtype=np.int64)
    counts = np.zeros(npix, dtype=np.int64)
    packed = np.concatenate([splats.p, splats.tu, splats.tv, splats.n, splats.su[:, None],
                             splats.sv[:, None], splats.center_px, splats.bbox,
                             opac[:, None], attr], axis=1)
    rows = np.ascontiguousarray(packed[tile_prims])
    boxes = np.ascontiguousarray(splats.bbox[tile_prims])
    args = (W, H, TILE, cam.fx, cam.fy, cam.cx, cam.cy, cam.near, attr.shape[1], rows, boxes,
            tile_offsets, tile_prims)
    cap = max(4096, _capacity_hint.get((W, H), 32 * npix))
    while True:
        e_splat = np.empty(cap, dtype=np.int64)
        e_alpha, e_T, e_D = np.empty(cap), np.empty(cap), np.empty(cap)
        e_branch = np.empty(cap, dtype=np.int8)
        e_u, e_v, e_G = np.empty(cap), np.empty(cap), np.empty(cap)
        sums = np.zeros((npix, attr.shape[1] + 2))
        E = K.blend(*args, starts, counts, e_splat, e_alpha, e_T, e_D, e_branch,
                    e_u, e_v, e_G, sums)
        if E >= 0:
            break
        cap *= 2
    _capacity_hint[(W, H)] = int(1.25 * E) + 1024
    e_splat, e_alpha, e_T, e_D = e_splat[:E], e_alpha[:E], e_T[:E], e_D[:E]
    e_branch, e_u, e_v, e_G = e_branch[:E], e_u[:E], e_v[:E], e_G[:E]
    e_w = e_alpha * e_T
    if distortion == "abs":
        dist = np.empty(npix)
        d_w, d_D = np.empty(E), np.empty(E)
        K.distortion_pass(starts, counts, e_w, e_D, dist, d_w, d_D)
    else:
        dist, d_w, d_D = _distortion_ndc_sq(starts, counts, e_w, e_D)

    alpha = sums[:, 9]
    nraw = sums[:, 5:8]
    nlen = np.linalg.norm(nraw, axis=1, keepdims=True)
    normal = np.where(nlen > 1e-12, nraw / np.maximum(nlen, 1e-12), 0.0)
    depth_sum = sums[:, 8]
    gb = GBuffer(
        width=W, height=H,
        albedo=sums[:, 0:3].reshape(H, W, 3),
        roughness=sums[:, 3].reshape(H, W),
        metallic=sums[:, 4].reshape(H, W),
        normal=normal.reshape(H, W, 3),
        normal_raw=nraw.reshape(H, W, 3),
        depth=(depth_sum / (alpha + 1e-8)).reshape(H, W),
        depth_sum=depth_sum.reshape(H, W),
        alpha=alpha.reshape(H, W),
        distortion=dist.reshape(H, W),
        mode=mode,
    )
    if retain:
        gb.starts = starts
        gb.counts = counts
        e_pixel = np.empty(E, dtype=np.int64)
        e_pixel[_entry_order(starts, counts)] = np.repeat(np.arange(npix), counts)
        gb.e_pixel = e_pixel
        gb.e_prim = splats.index[e_splat]
        gb.e_splat = e_splat
        gb.e_weight = e_w
        gb.e_alpha = e_alpha
        gb.e_T = e_T
        gb.e_depth = e_D
        gb.e_branch = e_branch
        gb.e_u = e_u
        gb.e_v = e_v
        gb.e_G = e_G
        gb.e_dist_dw = d_w
        gb.e_dist_dD = d_D
        gb.splats = splats
        gb.normal_sign = sign
        gb.extra["opacity"] = opac
        gb.extra["attr"] = attr
    return gb


GRAD_CHANNELS = ("albedo", "roughness", "metallic", "normal", "depth", "alpha", "distortion")


@dataclass
class CloudGrad:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sdf_values: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    gamma: float
    screen: np.ndarray  # per-primitive screen-space (NDC) position-gradient norm

    @classmethod
    def zeros(cls, n: int) -> "CloudGrad":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), np.zeros(n), 0.0, np.zeros(n))

    def __iadd__(self, other: "CloudGrad"):
        for name in ("positions", "rotations", "scales", "sdf_values", "albedo",
                     "roughness", "metallic", "screen"):
            getattr(self, name).__iadd__(getattr(other, name))
        self.gamma += other.gamma
        return self


def rasterize_adjoint(cloud: GaussianCloud, cam: Camera, gb: GBuffer,
                      upstream: dict) -> CloudGrad:
    """Reverse-mode pass of `rasterize`.

    `upstream` maps GBuffer channel names (see GRAD_CHANNELS) to arrays of
    the channel's shape; missing channels count as zero. The normal channel
    refers to the renormalised normal, depth to the normalised depth.
    """
    if not gb.retained:
        raise ForwardNotRetained("forward pass not retained")
    unknown = set(upstream) - set(GRAD_CHANNELS)
    if unknown:
        raise KeyError(f"unknown GBuffer channels {sorted(unknown)}")
    N = len(cloud)
    H, W = gb.height, gb.width
    npix = H * W
    splats = gb.splats
    M = len(splats)
    out = CloudGrad.zeros(N)
    if gb.e_splat.shape[0] == 0:
        return out

    def up(name, shape):
        g = upstream.get(name)
        return np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)

    g_nrm = up("normal", (npix, 3))
    g_depth = up("depth", (npix,))
    g_A = up("alpha", (npix,)).copy()
    g_dist = up("distortion", (npix,))

    # through the normal renormalisation
    nraw = gb.normal_raw.reshape(npix, 3)
    nlen = np.linalg.norm(nraw, axis=1, keepdims=True)
    nhat = gb.normal.reshape(npix, 3)
    g_nraw = np.where(nlen > 1e-12,
                      (g_nrm - nhat * np.sum(nhat * g_nrm, axis=1, keepdims=True))
                      / np.maximum(nlen, 1e-12), 0.0)
    # through D = S / (A + 1e-8)
    A = gb.alpha.reshape(npix)
    S = gb.depth_sum.reshape(npix)
    g_S = g_depth / (A + 1e-8)
    g_A -= g_depth * S / (A + 1e-8) ** 2

    g_attr_pix = np.ascontiguousarray(np.concatenate([
        up("albedo", (npix, 3)), up("roughness", (npix, 1)), up("metallic", (npix, 1)),
        g_nraw], axis=1))
    attr = gb.extra["attr"]
    E = gb.e_splat.shape[0]
    g_attr = np.zeros((M, attr.shape[1]))
    g_opac = np.zeros(M)
    g_p = np.zeros((M, 3))
    g_a = np.zeros((M, 3))
    g_b = np.zeros((M, 3))
    g_su = np.zeros(M)
    g_sv = np.zeros(M)
    K.raster_backward(W, cam.fx, cam.fy, cam.cx, cam.cy, gb.starts, gb.counts, gb.e_splat, gb.e_alpha,
                      gb.e_T, gb.e_depth, gb.e_branch, gb.e_u, gb.e_v, gb.e_G, gb.e_dist_dw,
                      gb.e_dist_dD, attr, gb.extra["opacity"], splats.p, splats.tu, splats.tv,
                      splats.n, splats.su, splats.sv, g_attr_pix, g_S, g_A, g_dist,
                      g_attr, g_opac, g_p, g_a, g_b, g_su, g_sv, np.empty(E), np.empty(E))

    idx = splats.index
    Rw = cloud.rotation_matrices[idx]
    Rc = cam.rotation
    g_tu = g_a @ Rc
    g_tv = g_b @ Rc
    # normal attribute n = sign * (t_u x t_v) in world space
    gn_w = g_attr[:, 5:8] * gb.normal_sign[:, None]
    tu_w, tv_w = Rw[:, :, 0], Rw[:, :, 1]
    g_tu += np.cross(tv_w, gn_w)
    g_tv += np.cross(gn_w, tu_w)
    dR = np.zeros((M, 3, 3))
    dR[:, :, 0] = g_tu
    dR[:, :, 1] = g_tv

    out.positions[idx] = g_p @ Rc
    out.rotations[idx] = rotmat_grad_to_quat(cloud.rotations[idx], dR)
    out.scales[idx, 0] = g_su
    out.scales[idx, 1] = g_sv
    out.albedo[idx] = g_attr[:, 0:3]
    out.roughness[idx] = g_attr[:, 3]
    out.metallic[idx] = g_attr[:, 4]
    do_ds, do_dg = sdf_to_opacity_grad(cloud.sdf_values[idx], cloud.gamma)
    out.sdf_values[idx] = g_opac * do_ds
    out.gamma = float(np.sum(g_opac * do_dg))
    # NDC-space gradient of the projected centre, for densification
    z = splats.p[:, 2]
    gx = g_p[:, 0] * z / cam.fx * 0.5 * W
    gy = g_p[:, 1] * z / cam.fy * 0.5 * H
    out.screen[idx] = np.hypot(gx, gy)
    return out


def normal_from_depth(depth, alpha, cam: Camera, threshold: float = 0.5):
    """Camera-space normals from central differences of the unprojected depth.

    Normals are oriented toward the camera; pixels whose stencil touches an
    invalid or out-of-image neighbour get a zero normal. Returns
    (normals (H, W, 3), valid mask (H, W)).
    """
    n, valid, _ = _normal_from_depth(depth, alpha, cam, threshold)
    return n, valid


def _normal_from_depth(depth, alpha, cam, threshold):
    H, W = depth.shape
    dirs = cam.pixel_directions()
    X = depth[..., None] * dirs
    ok = alpha > threshold
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2]
                         & ok[2:, 1:-1] & ok[:-2, 1:-1])
    dx = np.zeros((H, W, 3))
    dy = np.zeros((H, W, 3))
    dx[:, 1:-1] = X[:, 2:] - X[:, :-2]
    dy[1:-1, :] = X[2:, :] - X[:-2, :]
    c = np.cross(dx, dy)
    clen = np.linalg.norm(c, axis=-1, keepdims=True)
    valid &= clen[..., 0] > 1e-20
    nhat = np.where(valid[..., None], c / np.maximum(clen, 1e-30), 0.0)
    flip = np.where(np.sum(nhat * X, axis=-1) > 0, -1.0, 1.0)
    n = nhat * flip[..., None]
    return n, valid, (dirs, dx, dy, c, clen, nhat, flip)


def normal_from_depth_adjoint(depth, alpha, cam: Camera, g_normal, threshold: float = 0.5):
    """Gradient of sum(g_normal * normal_from_depth(depth)) w.r.t. the depth map."""
    H, W = depth.shape
    _, valid, (dirs, dx, dy, c, clen, nhat, flip) = _normal_from_depth(depth, alpha, cam,
                                                                      threshold)
    g = np.where(valid[..., None], g_normal * flip[..., None], 0.0)
    g_c = (g - nhat * np.sum(nhat * g, axis=-1, keepdims=True)) / np.maximum(clen, 1e-30)
    g_c = np.where(valid[..., None], g_c, 0.0)
    g_dx = np.cross(dy, g_c)
    g_dy = np.cross(g_c, dx)
    g_X = np.zeros((H, W, 3))
    g_X[:, 2:] += g_dx[:, 1:-1]
    g_X[:, :-2] -= g_dx[:, 1:-1]
    g_X[2:, :] += g_dy[1:-1, :]
    g_X[:-2, :] -= g_dy[1:-1, :]
    return np.sum(g_X * dirs, axis=-1)
