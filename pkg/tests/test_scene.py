import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from retime4d.errors import ContractViolation, DegenerateRotationError
from retime4d.scene import (Camera, Primitive, Scene, TimeGrid, covariance_at, quat_to_mat,
                            rotation_at, scene_extent)

from helpers import random_scene


def test_grid_times_and_intervals():
    g = TimeGrid(5, t_start=1.0, delta_t=0.5, epsilon=0.05)
    assert np.allclose(g.times, [1.0, 1.5, 2.0, 2.5, 3.0])
    assert g.interval_count == 4
    assert g.t_end == 3.0
    assert np.allclose(g.interval_mid([0, 3]), [1.25, 2.75])
    assert list(g.interval_of(g.interval_mid(np.arange(4)))) == [0, 1, 2, 3]
    assert g.frame_index(2.0) == 2
    assert g.frame_index(2.1) is None


@pytest.mark.parametrize("kw", [dict(frame_count=0), dict(frame_count=3, delta_t=0.0),
                                dict(frame_count=3, epsilon=0.25), dict(frame_count=3, epsilon=0.0)])
def test_grid_rejects_bad_parameters(kw):
    with pytest.raises(ContractViolation):
        TimeGrid(**kw)


def test_scene_from_primitives_and_empty():
    g = TimeGrid(4)
    s = Scene.from_primitives(g, [], 1)
    assert len(s) == 0
    p = Primitive.create(g.interval_mid(2), mu=(1, 2, 3))
    s = Scene.from_primitives(g, [p, p], 1)
    assert len(s) == 2
    assert s.interval_index.tolist() == [2, 2]
    assert torch.equal(s.primitive(1).mu, s.mu[1])
    s.check_invariants()


def test_invariants_detect_off_lattice_windows():
    g = TimeGrid(4)
    s = Scene.from_primitives(g, [Primitive.create(g.interval_mid(1), tau_l=0.7)], 1)
    with pytest.raises(ContractViolation):
        s.check_invariants()


def test_scene_select_concat_clone_are_independent():
    s = random_scene(np.random.default_rng(0), n=4)
    sub = s.index_select([0, 2])
    both = sub.concat(s)
    assert len(both) == 6
    c = s.clone()
    c.mu += 1
    assert not torch.equal(c.mu, s.mu)


def test_rotation_polynomial_normalizes_and_rejects_zero():
    p = Primitive.create(0.5, rot_c0=(2.0, 0, 0, 0), rot_c1=(0, 1.0, 0, 0))
    q = rotation_at(p, 1.5)
    assert torch.allclose(q.norm(), torch.tensor(1.0, dtype=q.dtype))
    bad = Primitive.create(0.5, rot_c0=(1.0, 0, 0, 0), rot_c1=(-1.0, 0, 0, 0))
    with pytest.raises(DegenerateRotationError):
        rotation_at(bad, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(st.floats(-3, 1), min_size=3, max_size=3))
def test_covariance_is_symmetric_positive_definite(q, log_s):
    q = np.asarray(q)
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    p = Primitive.create(0.5, rot_c0=q, log_scale=log_s)
    cov = covariance_at(p, 0.5)
    assert torch.allclose(cov, cov.T, atol=1e-12)
    eig = torch.linalg.eigvalsh(cov)
    assert torch.allclose(torch.sort(eig).values, torch.sort(torch.exp(2 * torch.tensor(log_s, dtype=eig.dtype))).values,
                          rtol=1e-8, atol=1e-12)


def test_quaternion_matrices_are_rotations():
    q = torch.nn.functional.normalize(torch.randn(20, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1)), dim=-1)
    r = quat_to_mat(q)
    eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
    assert torch.allclose(r @ r.transpose(-1, -2), eye, atol=1e-12)
    assert torch.allclose(torch.linalg.det(r), torch.ones(20, dtype=torch.float64))


def test_camera_projection_and_rays_agree():
    cam = Camera.look_at((1.0, 0.5, -3.0), (0, 0, 0), (0, 1, 0), 40, 40, 32, 24)
    x = np.array([[0.2, -0.1, 0.3], [0.0, 0.0, 0.0]])
    uv, z = cam.project(x)
    assert np.all(z > 0)
    rays = cam.pixel_rays(uv[:, 0], uv[:, 1])
    to_x = x - cam.center
    to_x /= np.linalg.norm(to_x, axis=1, keepdims=True)
    assert np.allclose(rays, to_x, atol=1e-12)
    assert np.allclose(uv[1], [cam.cx, cam.cy])


def test_camera_image_y_points_down():
    cam = Camera.look_at((0, 0, -3.0), (0, 0, 0), (0, 1, 0), 40, 40, 32, 32)
    uv, _ = cam.project(np.array([[0.0, 0.5, 0.0]]))
    assert uv[0, 1] < cam.cy


def test_camera_rejects_non_rotation():
    with pytest.raises(ContractViolation):
        Camera(10, 10, 5, 5, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10, 10)


def test_scene_extent():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert scene_extent(pts) == pytest.approx(1.0)
