"""Image and environment-map files (OpenCV codecs), with atomic writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import cv2
import numpy as np

from . import envmap

HDR_SUFFIXES = (".hdr", ".pfm")
LDR_SUFFIXES = (".png", ".jpg", ".jpeg")


class ImageError(IOError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(path: Path, img: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(path.suffix.lower(), img)
    if not ok:
        raise ImageError(f"could not encode {path}")
    return buf.tobytes()


def read_image(path) -> np.ndarray:
    """Decode an LDR image to float RGB(A) in [0, 1]."""
    path = Path(path)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ImageError(f"cannot read image {path}")
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[2] == 4:
        img = img[..., [2, 1, 0, 3]]
    else:
        img = img[..., ::-1]
    return np.ascontiguousarray(img)


def write_png(path, img: np.ndarray) -> None:
    """Write display-space values in [0, 1] as 8-bit RGB or RGBA."""
    path = Path(path)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 4:
        q = q[..., [2, 1, 0, 3]]
    elif q.ndim == 3:
        q = q[..., ::-1]
    atomic_write_bytes(path, _encode(path, np.ascontiguousarray(q)))


def read_hdr(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in HDR_SUFFIXES:
        raise ImageError(f"unsupported HDR format {path.suffix!r}; supported: "
                         + ", ".join(HDR_SUFFIXES) + " or a directory of six faces")
    img = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH | cv2.IMREAD_COLOR)
    if img is None:
        raise ImageError(f"cannot read HDR image {path}")
    return np.ascontiguousarray(img[..., ::-1].astype(np.float64))


def write_hdr(path, img: np.ndarray) -> None:
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(img, dtype=np.float32)[..., ::-1])
    atomic_write_bytes(path, _encode(path, data))


def load_environment(path, resolution: int = 64) -> np.ndarray:
    """Radiance cubemap (6, R, R, 3) from an equirect HDR file or a directory
    holding px/nx/py/ny/pz/nz face images (OpenGL face orientation)."""
    path = Path(path)
    if path.is_dir():
        faces = []
        for name in envmap.FACE_NAMES:
            hits = [p for p in sorted(path.glob(f"{name}.*")) if p.suffix.lower()
                    in HDR_SUFFIXES + LDR_SUFFIXES]
            if not hits:
                raise ImageError(f"environment directory {path} is missing face '{name}'")
            f = hits[0]
            faces.append(read_hdr(f) if f.suffix.lower() in HDR_SUFFIXES else read_image(f)[..., :3])
        size = faces[0].shape[0]
        if any(f.shape[:2] != (size, size) for f in faces):
            raise ImageError(f"faces in {path} must be square and equally sized")
        cube = np.stack(faces)
        if size != resolution:
            cube = envmap.sample_cube(cube, envmap.texel_directions(resolution))
        return cube
    if not path.exists():
        raise ImageError(f"environment map {path} does not exist")
    return envmap.equirect_to_cube(read_hdr(path), resolution)


def save_environment(path, cube: np.ndarray, height: int | None = None) -> None:
    """Write a cubemap as an equirect HDR image (height defaults to 2R)."""
    h = height or 2 * cube.shape[1]
    write_hdr(path, envmap.cube_to_equirect(cube, h))
