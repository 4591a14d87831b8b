import csv
import io

import numpy as np
import pytest

from sdfsplat import envmap
from sdfsplat.checkpoint import load_checkpoint
from sdfsplat.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from sdfsplat.images import read_hdr, read_image, write_hdr

TINY = ["--preset", "desk", "--iterations", "12", "--init-count", "200", "--env-resolution", "8",
        "--densify-start", "5", "--densify-interval", "5", "--log-every", "5"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate", "--out", str(data), "--views", "3", "--test-views", "2",
                 "--resolution", "16", "--samples", "1024", "--env-resolution", "8"]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run), *TINY]) == EXIT_OK
    return data, run


def test_train_writes_outputs(scene):
    data, run = scene
    assert (run / "final.ckpt").exists() and (run / "config.txt").exists()
    assert (run / "loss_curves.png").stat().st_size > 0
    rows = list(csv.DictReader(open(run / "loss.csv")))
    assert len(rows) == 12 and rows[-1]["iteration"] == "12"
    ck = load_checkpoint(run / "final.ckpt")
    assert ck.state.iteration == 12 and ck.config.iterations == 12
    assert ck.env.resolution == 8


def test_resume_continues_from_checkpoint(scene, tmp_path):
    data, run = scene
    out = tmp_path / "more"
    assert main(["train", "--data", str(data), "--out", str(out), "--resume",
                 str(run / "final.ckpt"), "--iterations", "14"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert [r["iteration"] for r in rows] == ["13", "14"]


def test_config_file_and_flag_precedence(scene, tmp_path):
    data, _ = scene
    cfg = tmp_path / "c.txt"
    cfg.write_text("iterations = 3\nlr_sdf = 0.03\n")
    out = tmp_path / "o"
    assert main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg),
                 *TINY[:2], "--init-count", "100", "--env-resolution", "8", "--lr-sdf", "0.02"]) == EXIT_OK
    ck = load_checkpoint(out / "final.ckpt")
    assert ck.config.iterations == 3 and ck.config.lr_sdf == 0.02


def test_relight_with_own_environment_matches_render(scene, tmp_path):
    data, run = scene
    ck = load_checkpoint(run / "final.ckpt")
    faces = tmp_path / "faces"
    for k, name in enumerate(envmap.FACE_NAMES):
        write_hdr(faces / f"{name}.pfm", ck.env.radiance[k])
    cams = str(data / "transforms_test.json")
    assert main(["render", "--ckpt", str(run / "final.ckpt"), "--camera", cams,
                 "--out", str(tmp_path / "r"), "--float"]) == EXIT_OK
    assert main(["relight", "--ckpt", str(run / "final.ckpt"), "--env", str(faces), "--camera", cams,
                 "--out", str(tmp_path / "l"), "--float"]) == EXIT_OK
    for i in range(2):
        a = read_hdr(tmp_path / "r" / f"r_{i}.pfm")
        b = read_hdr(tmp_path / "l" / f"r_{i}.pfm")
        assert np.abs(a - b).max() <= 1e-5
        assert np.array_equal(read_image(tmp_path / "r" / f"r_{i}.png"),
                              read_image(tmp_path / "l" / f"r_{i}.png"))


def test_relight_with_reference_reports_scales(scene, tmp_path, capsys):
    data, run = scene
    assert main(["relight", "--ckpt", str(run / "final.ckpt"), "--env", str(data / "env_relight.hdr"),
                 "--reference", str(data / "transforms_test_relit.json"),
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "relight.csv")))
    assert len(rows) == 2 and all(float(r["scale_r"]) > 0 for r in rows)
    assert "scale_g" in capsys.readouterr().out


def test_eval_against_own_renders(scene, tmp_path, capsys):
    data, run = scene
    # a dataset whose images are the model's own renders
    own = tmp_path / "own"
    assert main(["render", "--ckpt", str(run / "final.ckpt"), "--camera",
                 str(data / "transforms_test.json"), "--out", str(own / "test")]) == EXIT_OK
    ck = load_checkpoint(run / "final.ckpt")
    from sdfsplat.cli import render_view
    from sdfsplat.dataset import manifest_cameras, write_manifest
    from sdfsplat.images import write_png
    cams = manifest_cameras(data / "transforms_test.json", 16, 16)
    frames = []
    for name, cam in cams:
        _, img, _ = render_view(ck, cam)
        write_png(own / "test" / f"{name}.png", np.concatenate([img, np.ones(img.shape[:2] + (1,))], -1))
        frames.append((f"test/{name}", cam))
    write_manifest(own / "transforms_test.json", 0.7, frames)
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(own),
                 "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    table = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert table[-1]["view"] == "mean"
    assert float(table[-1]["psnr"]) >= 60.0


def test_eval_with_normals(scene, tmp_path):
    data, run = scene
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(data),
                 "--gt-normals", str(data / "normals"), "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert set(rows[0]) == {"view", "psnr", "ssim", "iou", "normal_mae"}


def test_inspect_writes_all_maps(scene, tmp_path):
    data, run = scene
    assert main(["inspect", "--ckpt", str(run / "final.ckpt"), "--camera",
                 str(data / "transforms_test.json"), "--out", str(tmp_path)]) == EXIT_OK
    for key in ("albedo", "roughness", "metallic", "normal", "depth", "alpha", "decomposition"):
        assert (tmp_path / f"r_0_{key}.png").exists(), key
    n = read_image(tmp_path / "r_0_normal.png")
    assert n.min() >= 0 and n.max() <= 1


def test_diagnose(scene, tmp_path, capsys):
    data, run = scene
    assert main(["diagnose", "--ckpt", str(run / "final.ckpt"), "--data", str(data),
                 "--samples", "200", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gamma" in out and "opacity histogram" in out and "projection residuals" in out
    assert (tmp_path / "diagnose.txt").read_text() == out
    assert (tmp_path / "opacity_histogram.png").exists()


@pytest.mark.parametrize("argv", [[], ["bogus"], ["render", "--ckpt"], ["train", "--nope", "1"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_missing_files_are_data_errors(tmp_path, capsys):
    assert main(["render", "--ckpt", str(tmp_path / "x.ckpt"), "--camera", "m.json",
                 "--out", str(tmp_path)]) == EXIT_DATA
    assert "x.ckpt" in capsys.readouterr().err
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert main(["diagnose", "--ckpt", str(tmp_path / "bad.ckpt")]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_unknown_config_key_is_usage_error(scene, tmp_path, capsys):
    data, _ = scene
    cfg = tmp_path / "c.txt"
    cfg.write_text("learning_rate = 1\n")
    assert main(["train", "--data", str(data), "--out", str(tmp_path), "--config", str(cfg)]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(scene, tmp_path, capsys):
    data, _ = scene
    assert main(["train", "--data", str(data), "--out", str(tmp_path), *TINY,
                 "--lr-scale", "1e300"]) == EXIT_NUMERIC
    assert "not finite" in capsys.readouterr().err
