import numpy as np
import pytest

from sdfsplat.camera import Camera
from sdfsplat.gaussians import GaussianCloud


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_fd(f, x, h):
    """Central differences of scalar f over every entry of array x (copied)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def small_scene(seed: int, n: int = 5, res: int = 8, gamma: float = 5.0):
    """A few random surfels in front of a small camera looking down +z."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.4, 0.4, (n, 3))
    pos[:, 2] = rng.uniform(-0.3, 0.3, n)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud.from_attributes(
        pos, q, rng.uniform(0.1, 0.3, (n, 2)), rng.uniform(-0.2, 0.2, n),
        rng.uniform(0.1, 0.9, (n, 3)), rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n),
        gamma=gamma)
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, -1, 0], res, res, 0.5)
    return cloud, cam


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary ---------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """record(number, passed, detail): one summary line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
