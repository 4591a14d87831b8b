"""Ray-traced ground truth for desk-scale experiments: analytic spheres lit by
an environment map, shaded with the Monte-Carlo reference BRDF."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import envmap
from .camera import Camera
from .dataset import write_manifest
from .images import atomic_write_bytes, load_environment, save_environment, write_png
from .losses import tonemap
from .shading import mc_reference_points


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    roughness: float
    metallic: float


@dataclass
class SceneSpec:
    kind: str = "sphere"
    spheres: list = field(default_factory=list)

    @classmethod
    def make(cls, kind: str = "sphere", albedo=(0.80, 0.45, 0.25), roughness: float = 0.6,
             metallic: float = 0.0, radius: float = 1.2) -> "SceneSpec":
        if kind == "sphere":
            return cls(kind, [Sphere((0.0, 0.0, 0.0), radius, tuple(albedo), roughness, metallic)])
        if kind == "two-spheres":
            k = radius / 1.2
            return cls(kind, [
                Sphere((-0.6 * k, 0.0, 0.0), 0.65 * k, tuple(albedo), roughness, metallic),
                Sphere((0.6 * k, 0.0, 0.05 * k), 0.55 * k, (0.9, 0.9, 0.9), 0.3, 1.0),
            ])
        raise ValueError(f"unknown scene kind {kind!r}; expected 'sphere' or 'two-spheres'")


# --- environments --------------------------------------------------------------

def gradient_environment(res: int = 64) -> np.ndarray:
    """Top-lit sky: warm bright zenith fading to a dim bluish ground."""
    d = envmap.texel_directions(res)
    t = ((d[..., 2] + 1.0) * 0.5)[..., None]
    top = np.array([1.6, 1.45, 1.2])
    bottom = np.array([0.08, 0.1, 0.16])
    return bottom + (top - bottom) * t**2


def side_environment(res: int = 64) -> np.ndarray:
    """Relighting target: a cool key light from +x, warm fill from -y."""
    d = envmap.texel_directions(res)
    key = np.clip(d[..., 0], 0.0, None)[..., None] ** 3 * np.array([0.6, 1.0, 1.9])
    fill = ((1.0 - d[..., 1]) * 0.5)[..., None] ** 2 * np.array([0.7, 0.4, 0.15])
    return 0.05 + key + fill


def random_environment(res: int = 64, seed: int = 0, lobes: int = 6) -> np.ndarray:
    """Smooth random HDR light: coloured exponential lobes over a dim floor."""
    rng = np.random.default_rng(seed)
    d = envmap.texel_directions(res)
    out = np.full(d.shape, 0.05)
    for _ in range(lobes):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        sharp = rng.uniform(2.0, 12.0)
        col = rng.uniform(0.2, 1.0, 3) * rng.uniform(0.5, 3.0)
        out += np.exp(sharp * (d @ c - 1.0))[..., None] * col
    return out


ENVIRONMENTS = {"gradient": gradient_environment, "side": side_environment}


# --- cameras -----------------------------------------------------------------------

def orbit_cameras(count: int, distance: float = 4.5, width: int = 128, fov_x: float = 0.7,
                  offset: float = 0.0, elevation=(-25.0, 65.0)) -> list[Camera]:
    """Cameras on a golden-angle spiral between two elevations, looking at the origin."""
    out = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    lo, hi = np.radians(elevation)
    for i in range(count):
        t = (i + 0.5) / count
        el = math.asin(math.sin(lo) + t * (math.sin(hi) - math.sin(lo)))
        az = golden * i + offset
        eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                                   math.sin(el)])
        out.append(Camera.look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], width, width, fov_x))
    return out


# --- ray tracing ------------------------------------------------------------------

@dataclass
class GroundTruth:
    linear: np.ndarray  # (H, W, 3) linear radiance over black
    mask: np.ndarray
    normal: np.ndarray  # world space, zero outside the mask
    depth: np.ndarray  # camera z, zero outside the mask


def trace(spec: SceneSpec, cam: Camera):
    """Nearest sphere hit per pixel-centre ray: (hit mask, sphere id, points, normals, depth)."""
    o, d = cam.world_rays()
    d = d.reshape(-1, 3)
    n = len(d)
    best = np.full(n, np.inf)
    sid = np.full(n, -1)
    for k, s in enumerate(spec.spheres):
        oc = o - np.asarray(s.center)
        b = d @ oc
        c = oc @ oc - s.radius**2
        disc = b * b - c
        ok = disc >= 0.0
        t = np.where(ok, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        t = np.where(t > cam.near, t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        sid = np.where(closer, k, sid)
    hit = np.isfinite(best)
    p = o + d * np.where(hit, best, 0.0)[:, None]
    nrm = np.zeros((n, 3))
    for k, s in enumerate(spec.spheres):
        sel = sid == k
        nrm[sel] = (p[sel] - np.asarray(s.center)) / s.radius
    depth = np.where(hit, cam.to_camera(p)[:, 2], 0.0)
    return hit, sid, p, nrm, d, depth


def render_ground_truth(spec: SceneSpec, cam: Camera, radiance: np.ndarray, samples: int = 4096,
                        seed: int = 0) -> GroundTruth:
    hit, sid, _, nrm, d, depth = trace(spec, cam)
    H, W = cam.height, cam.width
    idx = np.flatnonzero(hit)
    mats = spec.spheres
    alb = np.array([mats[k].albedo for k in sid[idx]]).reshape(-1, 3)
    rough = np.array([mats[k].roughness for k in sid[idx]])
    metal = np.array([mats[k].metallic for k in sid[idx]])
    lin = np.zeros((H * W, 3))
    if len(idx):
        lin[idx] = mc_reference_points(alb, rough, metal, nrm[idx], -d[idx], radiance, samples, seed)
    return GroundTruth(lin.reshape(H, W, 3), hit.reshape(H, W).astype(np.float64),
                       nrm.reshape(H, W, 3), depth.reshape(H, W))


def _save_npy(path: Path, arr) -> None:
    import io
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr))
    atomic_write_bytes(path, buf.getvalue())


def generate_synthetic_scene(out_dir, kind: str = "sphere", views: int = 16, resolution: int = 128,
                             roughness: float = 0.6, metallic: float = 0.0,
                             albedo=(0.80, 0.45, 0.25), env: str = "gradient",
                             relight_env: str = "side", test_views: int = 4, samples: int = 4096,
                             env_resolution: int = 64, fov_x: float = 0.7, distance: float = 4.5,
                             radius: float = 1.2, seed: int = 0) -> Path:
    """Write a dataset directory: train/test manifests and RGBA images,
    world-space normal and depth maps (.npy), relit test images and both
    environments as equirect HDR files.

    The default scale follows the usual object-centric layout: the object
    (radius 1.2) encloses the unit sphere used for initialization and the
    cameras orbit at 4.5 units with a 0.7 rad field of view.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec.make(kind, albedo, roughness, metallic, radius)
    # round-trip the lights through their files so the ground truth uses
    # exactly what a user passes back on the command line
    save_environment(out / "env_train.hdr", ENVIRONMENTS[env](env_resolution))
    save_environment(out / "env_relight.hdr", ENVIRONMENTS[relight_env](env_resolution))
    L_train = load_environment(out / "env_train.hdr", env_resolution)
    L_relit = load_environment(out / "env_relight.hdr", env_resolution)

    splits = {
        "train": orbit_cameras(views, distance, resolution, fov_x),
        "test": orbit_cameras(test_views, distance, resolution, fov_x, offset=1.1,
                              elevation=(-15.0, 55.0)),
    }
    for split, cams in splits.items():
        frames, relit = [], []
        for i, cam in enumerate(cams):
            name = f"{split}/r_{i}"
            gt = render_ground_truth(spec, cam, L_train, samples, seed * 100003 + hash_split(split, i))
            rgba = np.concatenate([tonemap(gt.linear), gt.mask[..., None]], -1)
            write_png(out / f"{name}.png", rgba)
            _save_npy(out / "normals" / f"{split}_r_{i}.npy", gt.normal)
            _save_npy(out / "depth" / f"{split}_r_{i}.npy", gt.depth)
            frames.append((name, cam))
            if split == "test":
                rl = render_ground_truth(spec, cam, L_relit, samples,
                                         seed * 100003 + hash_split("relit", i))
                write_png(out / f"test_relit/r_{i}.png",
                          np.concatenate([tonemap(rl.linear), rl.mask[..., None]], -1))
                relit.append((f"test_relit/r_{i}", cam))
        write_manifest(out / f"transforms_{split}.json", fov_x, frames)
        if split == "test":
            write_manifest(out / "transforms_test_relit.json", fov_x, relit,
                           environment="env_relight.hdr")
    meta = {"kind": kind, "spheres": [asdict(s) for s in spec.spheres], "views": views,
            "test_views": test_views, "resolution": resolution, "samples": samples,
            "env": env, "relight_env": relight_env, "distance": distance, "fov_x": fov_x,
            "seed": seed}
    atomic_write_bytes(out / "scene.json", json.dumps(meta, indent=2).encode())
    return out


def hash_split(split: str, i: int) -> int:
    return {"train": 1, "test": 2, "relit": 3}[split] * 1000 + i
