import numpy as np
import pytest

from sdfsplat.camera import Camera
from sdfsplat.gaussians import spherical_init
from sdfsplat.raster import rasterize
from sdfsplat.report import plot_decomposition, plot_loss_curves, plot_opacity_histogram, read_loss_csv
from sdfsplat.trainer import CSV_COLUMNS

PNG = b"\x89PNG\r\n\x1a\n"


def _csv(path, rows=5):
    lines = [",".join(CSV_COLUMNS)]
    for i in range(1, rows + 1):
        vals = {c: 0.0 for c in CSV_COLUMNS}
        vals.update(iteration=i, color=1.0 / i, w_color=1.0 / i, total=1.0 / i, median_active=1,
                    projection_active=int(i > 3))
        lines.append(",".join(str(vals[c]) for c in CSV_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_read_loss_csv(tmp_path):
    cols = read_loss_csv(_csv(tmp_path / "l.csv"))
    assert set(cols) == set(CSV_COLUMNS)
    assert np.array_equal(cols["iteration"], np.arange(1, 6))
    (tmp_path / "e.csv").write_text(",".join(CSV_COLUMNS) + "\n")
    with pytest.raises(ValueError, match="no rows"):
        read_loss_csv(tmp_path / "e.csv")


def test_figures_are_written(tmp_path):
    p = plot_loss_curves(read_loss_csv(_csv(tmp_path / "l.csv")), tmp_path / "a" / "loss.png")
    assert p.read_bytes().startswith(PNG)
    cloud = spherical_init(300, 1.0, 0, sdf_value=0.01, gamma=10.0)
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], 24, 24, 0.8)
    gb = rasterize(cloud, cam)
    img = np.zeros((24, 24, 3))
    assert plot_decomposition(gb, tmp_path / "d.png", render=img, reference=img).read_bytes().startswith(PNG)
    assert plot_opacity_histogram(cloud, tmp_path / "h.png").read_bytes().startswith(PNG)
