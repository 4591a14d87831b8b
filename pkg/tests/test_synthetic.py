import json
import math

import numpy as np
import pytest

from sdfsplat.camera import Camera
from sdfsplat.dataset import load_dataset
from sdfsplat.synthetic import (
    SceneSpec, generate_synthetic_scene, orbit_cameras, render_ground_truth, trace,
)


def _silhouette_pixels(radius, distance, res):
    cam = Camera.look_at([0, 0, -distance], [0, 0, 0], [0, -1, 0], res, res, 0.7)
    hit = trace(SceneSpec.make("sphere", radius=radius), cam)[0]
    return hit.sum(), cam


@pytest.mark.parametrize("radius,distance", [(1.2, 4.5), (0.8, 3.0), (1.0, 6.0)])
def test_silhouette_area_matches_projected_disk(radius, distance):
    count, cam = _silhouette_pixels(radius, distance, 256)
    # the tangent cone of a centred sphere images to a disk of radius f R / sqrt(d^2 - R^2)
    exact = math.pi * cam.fx * cam.fy * radius**2 / (distance**2 - radius**2)
    assert abs(count / exact - 1) < 0.02


def test_small_sphere_matches_first_order_area():
    count, cam = _silhouette_pixels(0.4, 6.0, 512)
    approx = math.pi * 0.4**2 * cam.fx * cam.fy / 6.0**2
    assert abs(count / approx - 1) < 0.02


def test_ground_truth_normals_are_unit_inside_the_mask():
    cam = orbit_cameras(3, width=48)[1]
    gt = render_ground_truth(SceneSpec.make("two-spheres"), cam, np.ones((6, 8, 8, 3)), samples=1024)
    inside = gt.mask > 0
    assert inside.sum() > 100
    assert np.allclose(np.linalg.norm(gt.normal[inside], axis=-1), 1.0, atol=1e-12)
    assert not gt.normal[~inside].any() and not gt.linear[~inside].any()
    assert np.all(gt.depth[inside] > 0)


def test_generated_scene_is_deterministic_and_loadable(tmp_path):
    kw = dict(views=3, resolution=16, test_views=2, samples=1024, env_resolution=8, seed=4)
    a = generate_synthetic_scene(tmp_path / "a", **kw)
    b = generate_synthetic_scene(tmp_path / "b", **kw)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    views = load_dataset(a)
    assert len(views) == 3 and views[0].image.shape == (16, 16, 4)
    assert len(load_dataset(a, "test")) == 2 and len(load_dataset(a, "test_relit")) == 2
    meta = json.loads((a / "scene.json").read_text())
    assert meta["kind"] == "sphere" and meta["seed"] == 4
    assert np.load(a / "normals" / "train_r_0.npy").shape == (16, 16, 3)


def test_unknown_kind():
    with pytest.raises(ValueError, match="two-spheres"):
        SceneSpec.make("cube")
