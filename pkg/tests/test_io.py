import json
import logging
import math

import numpy as np
import pytest

from sdfsplat import envmap
from sdfsplat.camera import Camera
from sdfsplat.dataset import (
    DatasetError, c2w_from_camera, camera_from_c2w, fov_from_focal, load_dataset, manifest_cameras,
    write_manifest,
)
from sdfsplat.images import (
    ImageError, load_environment, read_hdr, read_image, save_environment, write_hdr, write_png,
)


def _gl_c2w(eye):
    """Camera-to-world in the OpenGL convention, looking at the origin with +z up."""
    eye = np.asarray(eye, float)
    back = eye / np.linalg.norm(eye)
    right = np.cross([0, 0, 1.0], back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    M = np.eye(4)
    M[:3, :3] = np.stack([right, up, back], 1)
    M[:3, 3] = eye
    return M


def _write_dataset(root, alpha=True, frames=2, width=8):
    rng = np.random.default_rng(0)
    meta = {"camera_angle_x": 0.7, "frames": []}
    for i in range(frames):
        img = rng.uniform(0, 1, (6, width, 4 if alpha else 3))
        write_png(root / "train" / f"r_{i}.png", img)
        meta["frames"].append({"file_path": f"./train/r_{i}",
                               "transform_matrix": _gl_c2w([4.0, i + 1.0, 1.0]).tolist()})
    (root / "transforms_train.json").write_text(json.dumps(meta))
    return meta


def test_two_frames_give_two_views_with_shared_intrinsics(tmp_path):
    meta = _write_dataset(tmp_path)
    views = load_dataset(tmp_path)
    assert len(views) == 2
    a, b = views[0].camera, views[1].camera
    assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
    assert views[0].image.shape == (6, 8, 4) and views[0].name == "r_0"
    # the camera looks at the origin and sits at the manifest position
    c2w = np.array(meta["frames"][1]["transform_matrix"])
    assert np.allclose(b.center, c2w[:3, 3])
    z = b.to_camera(np.zeros(3))
    assert z[2] > 0 and np.allclose(z[:2], 0, atol=1e-12)


def test_focal_from_field_of_view():
    fov = 2 * math.atan(0.5)
    cam = camera_from_c2w(np.eye(4), 800, 600, fov)
    assert abs(cam.fx - 800.0) < 1e-9 and abs(cam.fy - 800.0) < 1e-9
    assert abs(fov_from_focal(800.0, 800) - fov) < 1e-12


def test_manifest_round_trip(tmp_path):
    cams = [Camera.look_at([3, 1, 2], [0, 0, 0], [0, 0, 1], 16, 12, 0.9),
            Camera.look_at([-2, 2, 1], [0.1, 0, 0], [0, 0, 1], 16, 12, 0.9)]
    write_manifest(tmp_path / "m.json", 0.9, [("a", cams[0]), ("b", cams[1])], w=16, h=12)
    back = manifest_cameras(tmp_path / "m.json")
    for (name, c), ref in zip(back, cams):
        assert np.allclose(c.world_to_camera, ref.world_to_camera)
        assert abs(c.fx - ref.fx) < 1e-9
    assert np.allclose(c2w_from_camera(cams[0])[:3, 3], cams[0].center)


@pytest.mark.parametrize("key", ["camera_angle_x", "frames"])
def test_malformed_manifest_names_key(tmp_path, key):
    meta = _write_dataset(tmp_path)
    del meta[key]
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match=key):
        load_dataset(tmp_path)


def test_frame_missing_matrix_is_named(tmp_path):
    meta = _write_dataset(tmp_path)
    del meta["frames"][1]["transform_matrix"]
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="frame 1.*transform_matrix"):
        load_dataset(tmp_path)


def test_missing_manifest_and_image(tmp_path):
    with pytest.raises(DatasetError, match="transforms_train.json"):
        load_dataset(tmp_path)
    _write_dataset(tmp_path)
    (tmp_path / "train" / "r_1.png").unlink()
    with pytest.raises(DatasetError, match="r_1"):
        load_dataset(tmp_path)


def test_singular_matrix_is_rejected(tmp_path):
    meta = _write_dataset(tmp_path)
    meta["frames"][0]["transform_matrix"] = np.zeros((4, 4)).tolist()
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="invertible"):
        load_dataset(tmp_path)


def test_missing_alpha_warns_and_uses_full_mask(tmp_path, caplog):
    _write_dataset(tmp_path, alpha=False)
    with caplog.at_level(logging.WARNING):
        views = load_dataset(tmp_path)
    assert "alpha" in caplog.text
    assert np.all(views[0].mask == 1.0)


def test_png_round_trip_is_8_bit(tmp_path, rng):
    img = rng.uniform(0, 1, (5, 7, 4))
    write_png(tmp_path / "x.png", img)
    back = read_image(tmp_path / "x.png")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageError, match="bad.png"):
        read_image(tmp_path / "bad.png")


# --- environments -------------------------------------------------------------------

def test_hdr_round_trip(tmp_path, rng):
    img = rng.uniform(0.01, 20, (8, 16, 3))
    write_hdr(tmp_path / "e.hdr", img)
    back = read_hdr(tmp_path / "e.hdr")
    # shared-exponent RGBE: 8-bit mantissas relative to the brightest channel
    step = img.max(-1, keepdims=True) / 128
    assert np.all(np.abs(back - img) <= step)


def test_constant_equirect_gives_constant_cubemap(tmp_path):
    write_hdr(tmp_path / "c.hdr", np.full((16, 32, 3), 0.75))  # exactly representable in RGBE
    cube = load_environment(tmp_path / "c.hdr", 8)
    assert cube.shape == (6, 8, 8, 3)
    assert np.abs(cube - 0.75).max() < 1e-6


def test_cube_equirect_round_trip_preserves_energy(tmp_path):
    from sdfsplat.synthetic import random_environment
    cube = random_environment(32, seed=3)
    save_environment(tmp_path / "r.hdr", cube)
    back = load_environment(tmp_path / "r.hdr", 32)
    e0, e1 = envmap.cube_energy(cube), envmap.cube_energy(back)
    assert np.all(np.abs(e1 / e0 - 1) < 0.01)


def test_face_directory(tmp_path):
    cube = np.stack([np.full((4, 4, 3), k + 1.0) for k in range(6)])
    for k, name in enumerate(envmap.FACE_NAMES):
        write_hdr(tmp_path / f"{name}.hdr", cube[k])
    assert np.allclose(load_environment(tmp_path, 4), cube, rtol=0.01)
    (tmp_path / f"{envmap.FACE_NAMES[3]}.hdr").unlink()
    with pytest.raises(ImageError, match=f"'{envmap.FACE_NAMES[3]}'"):
        load_environment(tmp_path, 4)


def test_unsupported_format_lists_supported(tmp_path):
    (tmp_path / "e.exr").write_bytes(b"")
    with pytest.raises(ImageError, match=r"\.hdr"):
        load_environment(tmp_path / "e.exr")
