import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from panosplat.geometry import (
    CameraPose, bilinear_taps, check_erp, dir_to_pixel, erp_directions, fibonacci_lattice,
    lattice_count, pixel_to_dir, pyramid_counts, quat_from_axis_angle, quat_multiply, quat_to_matrix,
    sample_erp, sample_erp_adjoint, ws_weights,
)


def test_pixel_to_dir_examples():
    assert np.allclose(pixel_to_dir(511.5, 255.5, 1024, 512), [0, 0, 1], atol=1e-12)
    assert np.allclose(pixel_to_dir(511.5, -0.5, 1024, 512), [0, 1, 0], atol=1e-12)
    assert np.allclose(pixel_to_dir(767.5, 255.5, 1024, 512), [1, 0, 0], atol=1e-12)


def test_dir_to_pixel_examples():
    assert np.allclose(dir_to_pixel([0, 0, 1], 1024, 512), (511.5, 255.5))
    assert np.allclose(dir_to_pixel([0, -1, 0], 1024, 512), (511.5, 511.5))
    h = math.sqrt(0.5)
    assert np.allclose(dir_to_pixel([h, 0, h], 1024, 512), (639.5, 255.5))


def test_dir_to_pixel_u_range():
    u, _ = dir_to_pixel(erp_directions(64, 32), 64, 32)
    assert u.min() >= -0.5 and u.max() < 63.5


def test_round_trip_random_directions(rng):
    d = rng.normal(size=(100_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d[np.abs(np.degrees(np.arcsin(d[:, 1]))) <= 89.9]
    u, v = dir_to_pixel(d, 1024, 512)
    back = pixel_to_dir(u, v, 1024, 512)
    assert np.min(np.sum(back * d, axis=1)) > 1 - 1e-10


@given(st.floats(-0.49, 1023.49), st.floats(0.0, 511.0))
def test_pixel_round_trip_property(u, v):
    uu, vv = dir_to_pixel(pixel_to_dir(u, v, 1024, 512), 1024, 512)
    du = abs(float(uu) - u)
    assert min(du, 1024 - du) < 1e-6 or abs(v - 255.5) > 255.0
    assert abs(float(vv) - v) < 1e-6


def test_lattice_counts():
    assert lattice_count(1024) == 333772
    assert lattice_count(16) == 81
    assert pyramid_counts(1024) == [333772, 83443, 20860, 5215]
    assert pyramid_counts(16, 2) == [81, 20]
    with pytest.raises(ValueError):
        lattice_count(1)
    with pytest.raises(ValueError):
        pyramid_counts(100, 4)


@given(st.integers(4, 200).map(lambda k: 8 * k))
def test_count_monotonicity(width):
    c = pyramid_counts(width, 4)
    assert all(a > b for a, b in zip(c, c[1:]))
    for fine, coarse in zip(c, c[1:]):
        assert fine - 4 <= 4 * coarse <= fine + 4


def test_lattice_points():
    lat = fibonacci_lattice(101)
    assert np.allclose(lat.points[0], [0, 0])
    assert np.allclose(lat.points[1], [0.6180339887, 0.01], atol=1e-10)
    assert lat.points[-1, 1] == 1.0
    assert np.isclose(lat.points[-1, 0], math.fmod(100 / ((1 + math.sqrt(5)) / 2), 1.0))
    with pytest.raises(ValueError):
        fibonacci_lattice(1)


def _nn_angles(d, block=2048):
    # brute-force nearest neighbour over all pairs, blocked to bound memory
    best = np.empty(len(d))
    for s in range(0, len(d), block):
        dots = d[s:s + block] @ d.T
        np.fill_diagonal(dots[:, s:s + block], -2.0)
        best[s:s + block] = np.arccos(np.clip(dots.max(axis=1), -1, 1))
    return best


@pytest.mark.parametrize("n", [1_000, 10_000])
def test_lattice_uniformity(n):
    nn = _nn_angles(fibonacci_lattice(n).directions())
    assert nn.max() / nn.min() < 2.0


def test_lattice_directions_unit_and_poles():
    lat = fibonacci_lattice(500)
    d = lat.directions()
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert np.allclose(d[0], [0, 1, 0], atol=1e-12)
    assert np.allclose(d[-1], [0, -1, 0], atol=1e-12)
    u, v = lat.pixel_coords(64, 32)
    assert np.isclose(v[0], -0.5) and np.isclose(v[-1], 31.5)


def test_ws_weights():
    w = ws_weights(1024, 512)
    assert w.shape == (512, 1024, 1)
    assert np.isclose(w[0, 0, 0], 0.0030680, atol=1e-7)
    assert np.isclose(w[255, 0, 0], math.cos(math.pi / 1024))
    assert np.allclose(w[:, :, 0], w[::-1, :, 0])
    rows = np.cos((np.arange(512) + 0.5 - 256) * math.pi / 512)
    assert w.sum() == pytest.approx(1024 * rows.sum(), rel=1e-12)
    assert abs(w.mean() / (2 / math.pi) - 1) < 0.01
    with pytest.raises(ValueError):
        ws_weights(10, 10)


def test_check_erp():
    assert check_erp(np.zeros((4, 8))).shape == (4, 8, 1)
    with pytest.raises(ValueError):
        check_erp(np.zeros((4, 4, 3)))
    bad = np.zeros((2, 4, 1))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        check_erp(bad)


def test_pose_validation_and_dict():
    with pytest.raises(ValueError):
        CameraPose(np.zeros(3), np.array([1.0, 1.0, 0, 0]))
    p = CameraPose([1, 2, 3], quat_from_axis_angle([0, 1, 0], 0.3))
    q = CameraPose.from_dict(p.to_dict())
    assert np.array_equal(p.position, q.position) and np.array_equal(p.rotation, q.rotation)
    pts = np.array([[0.5, -1.0, 2.0]])
    assert np.allclose(p.to_camera(p.position + p.to_world(pts)), pts)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_product_is_matrix_product(a, b):
    a = np.array(a) / np.linalg.norm(a)
    b = np.array(b) / np.linalg.norm(b)
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)
    m = quat_to_matrix(a)
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)


def test_bilinear_wraps_and_clamps():
    y0, x0, x1, fy, fx = bilinear_taps(np.array([-0.25, 7.5]), np.array([-3.0, 9.0]), 8, 4)
    assert list(x0) == [7, 7] and list(x1) == [0, 0]
    assert list(y0) == [0, 2] and np.allclose(fy, [0.0, 1.0])


def test_sample_erp_exact_at_centres(rng):
    img = rng.normal(size=(6, 12, 2))
    v, u = np.meshgrid(np.arange(6.0), np.arange(12.0), indexing="ij")
    assert np.array_equal(sample_erp(img, u, v), img)


def test_sample_adjoint_dot_product(rng):
    img = rng.normal(size=(8, 16, 3))
    u = rng.uniform(-1, 17, 200)
    v = rng.uniform(-1, 8, 200)
    g = rng.normal(size=(200, 3))
    lhs = np.sum(sample_erp(img, u, v) * g)
    rhs = np.sum(img * sample_erp_adjoint(g, u, v, 8, 16))
    assert lhs == pytest.approx(rhs, rel=1e-12)
