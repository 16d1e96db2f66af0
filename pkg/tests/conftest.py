import numpy as np
import pytest

from splatdepth.camera import CameraView, intrinsics, look_at
from splatdepth.scene import SceneFile


def camera(width=32, height=32, fov=40.0, eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0)):
    return CameraView(intrinsics(width, height, fov), look_at(eye, target), width, height)


def pinhole(f=100.0, c=64.0, size=128):
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return CameraView(K, np.eye(4), size, size)


def random_scene(n, rng, sh_degree=1, depth=(1.5, 2.5), spread=0.3, scale=(0.01, 0.05),
                 opacity=(0.2, 0.8), asg_k=4, asg_f=2):
    centers = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                               rng.uniform(*depth, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = rng.uniform(*scale, (n, 3))
    sh = rng.normal(0, 0.3, (n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] += 1.5
    return SceneFile.from_activated(
        centers, q, scales, rng.uniform(*opacity, n), sh, rng.uniform(0.05, 0.95, n),
        asg=rng.normal(0, 0.1, (n, asg_k * asg_f)), sh_degree=sh_degree, asg_k=asg_k, asg_f=asg_f,
    )


def wall_scene(z=2.0, half=1.5, spacing=0.05, opacity=0.99, sh_degree=0):
    g = np.arange(-half, half + 1e-9, spacing)
    gx, gy = np.meshgrid(g, g)
    n = gx.size
    centers = np.column_stack([gx.ravel(), gy.ravel(), np.full(n, z)])
    scales = np.column_stack([np.full(n, spacing), np.full(n, spacing), np.full(n, 1e-4)])
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = 0.5 / 0.28209479177387814
    return SceneFile.from_activated(
        centers, np.tile([1.0, 0, 0, 0], (n, 1)), scales, np.full(n, opacity), sh,
        np.full(n, 0.01), sh_degree=sh_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
