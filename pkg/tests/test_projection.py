import numpy as np
import torch

from splatdepth.camera import CameraView, look_at
from splatdepth.projection import (build_covariance, gaussian_normal, gaussian_normal_t, project,
                                   quat_to_rotmat_t)
from splatdepth.scene import ActivatedGaussian

from conftest import pinhole
from oracles import quat_matrix, random_quat


def _ag(center, rotation=(1, 0, 0, 0), scale=(0.1, 0.1, 0.1), opacity=1.0):
    return ActivatedGaussian(np.asarray(center, float), np.asarray(rotation, float),
                             np.asarray(scale, float), opacity, np.zeros((1, 3)), 0.5, np.zeros(0))


def test_covariance_axis_aligned():
    assert np.allclose(build_covariance([1, 0, 0, 0], [1, 2, 3]), np.diag([1, 4, 9]), atol=1e-15)


def test_covariance_quarter_turn_about_z():
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    assert np.allclose(build_covariance(q, [1, 2, 1]), np.diag([4, 1, 1]), atol=1e-12)


def test_covariance_eigenvalues_are_squared_scales(rng):
    for _ in range(200):
        q = random_quat(rng)
        s = rng.uniform(0.01, 2.0, 3)
        cov = build_covariance(q, s)
        assert np.allclose(cov, cov.T, atol=0)
        ev = np.linalg.eigvalsh(cov)
        assert np.allclose(ev, np.sort(s ** 2), atol=1e-10)
        # independent construction
        R = quat_matrix(q)
        assert np.allclose(cov, R @ np.diag(s ** 2) @ R.T, atol=1e-12)


def test_rotation_matrix_matches_oracle(rng):
    q = np.stack([random_quat(rng) for _ in range(100)])
    R = quat_to_rotmat_t(torch.as_tensor(q)).numpy()
    for qi, Ri in zip(q, R):
        assert np.allclose(Ri, quat_matrix(qi), atol=1e-14)


def test_on_axis_projection():
    pg = project(_ag([0, 0, 2]), pinhole())
    assert np.allclose(pg.mean2d, [64, 64], atol=1e-12)
    assert pg.depth == 2.0


def test_behind_camera_is_culled():
    assert project(_ag([0, 0, -2]), pinhole()) is None
    assert project(_ag([0, 0, 0.005]), pinhole()) is None     # inside the near plane


def test_far_off_screen_is_culled():
    assert project(_ag([100, 0, 2], scale=(0.01,) * 3), pinhole()) is None


def test_isotropic_screen_covariance():
    for sigma, z in [(0.05, 2.0), (0.01, 1.0), (0.2, 5.0)]:
        pg = project(_ag([0, 0, z], scale=(sigma,) * 3), pinhole())
        expect = np.diag([(100 * sigma / z) ** 2] * 2)
        assert np.allclose(pg.cov2d, expect, rtol=1e-6, atol=1e-12)
        # the low-pass term is only in the filtered copy
        assert np.allclose(pg.cov2d_filtered - pg.cov2d, 0.3 * np.eye(2), atol=1e-12)


def test_doubling_depth_halves_screen_std():
    a = project(_ag([0, 0, 2], scale=(0.05,) * 3), pinhole())
    b = project(_ag([0, 0, 4], scale=(0.05,) * 3), pinhole())
    assert np.allclose(np.sqrt(np.diag(b.cov2d)), 0.5 * np.sqrt(np.diag(a.cov2d)), rtol=1e-12)


def test_translation_equivariance(rng):
    for _ in range(50):
        eye = rng.normal(0, 0.3, 3)
        target = eye + np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.2, 3)
        cam = CameraView(pinhole().K, look_at(eye, target), 128, 128)
        g = _ag(eye + (target - eye) * rng.uniform(1.5, 3.0), random_quat(rng), rng.uniform(0.01, 0.1, 3))
        shift = rng.normal(0, 5.0, 3)
        cam2 = CameraView(cam.K, look_at(eye + shift, target + shift), 128, 128)
        g2 = _ag(g.center + shift, g.rotation, g.scale)
        p1, p2 = project(g, cam), project(g2, cam2)
        assert np.allclose(p1.mean2d, p2.mean2d, atol=1e-9)
        assert np.allclose(p1.cov2d, p2.cov2d, atol=1e-9)
        assert abs(p1.depth - p2.depth) < 1e-9
        assert abs(p1.distance - p2.distance) < 1e-9


def _cam_at(z):
    return CameraView(pinhole().K, look_at([0, 0, z], [0, 0, 0]), 128, 128)


def test_normal_faces_camera_in_front():
    n, d = gaussian_normal(_ag([0, 0, 0], scale=(1, 1, 0.01)), _cam_at(-5.0))
    assert np.allclose(n, [0, 0, -1]) and abs(d - 5) < 1e-12


def test_normal_flips_for_camera_behind():
    n, d = gaussian_normal(_ag([0, 0, 0], scale=(1, 1, 0.01)), _cam_at(5.0))
    assert np.allclose(n, [0, 0, 1]) and abs(d - 5) < 1e-12


def test_scale_ties_pick_lowest_axis():
    n, _ = gaussian_normal(_ag([0, 0, 0], scale=(0.1, 0.1, 0.1)), _cam_at(-5.0))
    assert np.allclose(np.abs(n), [1, 0, 0])


def test_normal_orientation_sweep(rng):
    n = 10_000
    q = rng.normal(size=(n, 4))
    s = rng.uniform(0.001, 1.0, (n, 3))
    p = rng.normal(0, 3, (n, 3))
    oc = rng.normal(0, 3, 3)
    R = quat_to_rotmat_t(torch.as_tensor(q))
    nrm, dist = gaussian_normal_t(R, torch.as_tensor(s), torch.as_tensor(p), torch.as_tensor(oc))
    nrm, dist = nrm.numpy(), dist.numpy()
    side = ((p - oc) * nrm).sum(1)
    assert (side <= 0).all()
    assert np.allclose(dist, np.abs(side), atol=1e-12)
    assert np.allclose(np.linalg.norm(nrm, axis=1), 1, atol=1e-12)
    # the normal is the rotated min-scale axis (up to sign)
    Rn = R.numpy()
    axis = Rn[np.arange(n), :, np.argmin(s, 1)]
    assert np.allclose(np.abs((axis * nrm).sum(1)), 1, atol=1e-12)
