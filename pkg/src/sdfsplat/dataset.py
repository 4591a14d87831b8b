"""Camera manifests in the `transforms_<split>.json` layout.

A manifest holds `camera_angle_x` (horizontal field of view, radians) and a
list of `frames`, each with a `file_path` (relative, extension optional)
and a row-major 4 x 4 camera-to-world `transform_matrix` in the OpenGL
camera convention (x right, y up, looking down -z).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera
from .images import ImageError, read_image

log = logging.getLogger(__name__)

GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(ValueError):
    pass


@dataclass
class DatasetView:
    image: np.ndarray  # (H, W, 4) display-space RGBA in [0, 1]
    camera: Camera
    name: str

    @property
    def rgb(self) -> np.ndarray:
        return self.image[..., :3]

    @property
    def mask(self) -> np.ndarray:
        return self.image[..., 3]


def camera_from_c2w(c2w, width: int, height: int, fov_x: float) -> Camera:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DatasetError(f"transform_matrix must be 4x4, got {c2w.shape}")
    if abs(np.linalg.det(c2w[:3, :3])) < 1e-9:
        raise DatasetError("transform_matrix is not invertible")
    w2c = np.linalg.inv(c2w @ GL_TO_CV)
    return Camera.from_fov(width, height, fov_x, w2c)


def c2w_from_camera(cam: Camera) -> np.ndarray:
    return np.linalg.inv(cam.world_to_camera) @ GL_TO_CV


def _resolve(root: Path, rel: str) -> Path:
    p = root / rel
    if p.suffix:
        return p
    for ext in (".png", ".jpg", ".jpeg"):
        if p.with_suffix(ext).exists():
            return p.with_suffix(ext)
    return p.with_suffix(".png")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"camera manifest {path} not found")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid JSON ({e})") from None
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DatasetError(f"{path}: missing key '{key}'")
    if not isinstance(meta["frames"], list):
        raise DatasetError(f"{path}: key 'frames' must be a list")
    for i, fr in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in fr:
                raise DatasetError(f"{path}: frame {i} is missing key '{key}'")
    return meta


def manifest_cameras(path, width: int | None = None, height: int | None = None) -> list[tuple[str, Camera]]:
    """Cameras of a manifest; image size from `w`/`h` keys, the arguments, or
    the referenced images."""
    path = Path(path)
    meta = read_manifest(path)
    out = []
    for i, fr in enumerate(meta["frames"]):
        W = meta.get("w", width)
        H = meta.get("h", height)
        if W is None or H is None:
            img = read_image(_resolve(path.parent, fr["file_path"]))
            H, W = img.shape[:2]
        try:
            cam = camera_from_c2w(fr["transform_matrix"], int(W), int(H), float(meta["camera_angle_x"]))
        except (DatasetError, ValueError) as e:
            raise DatasetError(f"{path}: frame {i}: {e}") from None
        out.append((Path(fr["file_path"]).stem, cam))
    return out


def load_dataset(root, split: str = "train") -> list[DatasetView]:
    root = Path(root)
    manifest = root / f"transforms_{split}.json"
    meta = read_manifest(manifest)
    fov = float(meta["camera_angle_x"])
    views = []
    for i, fr in enumerate(meta["frames"]):
        fp = _resolve(root, fr["file_path"])
        try:
            img = read_image(fp)
        except ImageError as e:
            raise DatasetError(str(e)) from None
        if img.shape[2] == 3:
            log.warning("%s has no alpha channel; using an all-ones mask", fp)
            img = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=-1)
        H, W = img.shape[:2]
        try:
            cam = camera_from_c2w(fr["transform_matrix"], W, H, fov)
        except (DatasetError, ValueError) as e:
            raise DatasetError(f"{manifest}: frame {i} ({fp}): {e}") from None
        views.append(DatasetView(img, cam, fp.stem))
    return views


def write_manifest(path, fov_x: float, frames: list[tuple[str, Camera]], **extra) -> None:
    from .images import atomic_write_bytes
    meta = {"camera_angle_x": fov_x, **extra,
            "frames": [{"file_path": name, "transform_matrix": c2w_from_camera(cam).tolist()}
                       for name, cam in frames]}
    atomic_write_bytes(path, json.dumps(meta, indent=2).encode())


def fov_from_focal(focal: float, width: int) -> float:
    return 2.0 * math.atan(0.5 * width / focal)
