import numpy as np
import pytest

from sweepmatch.geometry import CameraPinhole
from sweepmatch.synth import NADIR


def nadir_camera(center=(0.0, 0.0, 100.0), size=(64, 48), focal=500.0, name="0"):
    w, h = size
    return CameraPinhole(focal, ((w - 1) / 2.0, (h - 1) / 2.0), NADIR, center, size, name)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def tilted_nadir(rng, max_angle=0.15):
    """Nadir rotation perturbed by a small random rotation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-max_angle, max_angle)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r = np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * k @ k
    return r @ NADIR


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def stereo_pair():
    ref = nadir_camera((0.0, 0.0, 100.0), name="ref")
    query = nadir_camera((6.0, 0.0, 100.0), name="query")
    return ref, query


def scalar_bilinear_unit(fmap, pos):
    """Loop bilinear sample of a feature map at ``(x, y)``; None if invalid.
    Unit-normalized maps are re-normalized after interpolation."""
    x, y = float(pos[0]), float(pos[1])
    h, w, c = fmap.values.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        return None
    x0 = min(int(np.floor(x)), w - 2)
    y0 = min(int(np.floor(y)), h - 2)
    fx, fy = x - x0, y - y0
    out = np.zeros(c)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            if wx * wy == 0:
                continue
            if not fmap.valid_mask[y0 + dy, x0 + dx]:
                return None
            out += wx * wy * fmap.values[y0 + dy, x0 + dx]
    if fmap.unit_normalized:
        n = np.linalg.norm(out)
        if n <= 1e-8:
            return None
        out = out / n
    return out


# lines recorded by the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
