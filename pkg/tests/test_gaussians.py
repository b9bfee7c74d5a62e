import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from panosplat.gaussians import (
    SH_C0, DecodeConfig, GaussianSet, build_pyramid, consolidate, decode_gaussians, decode_gaussians_backward,
    pixel_world_size, quats_to_matrices, quats_to_matrices_backward, sh_coeff_count, sh_eval, sh_eval_backward,
    softmax_depth, softmax_depth_backward,
)
from panosplat.geometry import CameraPose, fibonacci_lattice, pyramid_counts, quat_from_axis_angle

CFG = DecodeConfig(width=16, inv_depths=(0.25, 0.5, 1.0))


def _raw(n, cfg=CFG, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.raw_size))


def test_raw_layout():
    assert CFG.raw_size == 3 + 1 + 3 + 4 + 3
    assert DecodeConfig(16, (1.0, 2.0), sh_degree=1).raw_size == 2 + 8 + 12
    with pytest.raises(ValueError):
        sh_coeff_count(2)


def test_decode_examples():
    raw = np.zeros((1, CFG.raw_size))
    sl = CFG.slices()
    raw[0, sl["quat"]] = [2, 0, 0, 0]
    raw[0, sl["logits"]] = [0, 100, 0]
    g = decode_gaussians(raw, fibonacci_lattice(81).directions()[:1], 0, CameraPose(), CFG)
    assert g.opacity[0] == 0.5
    assert np.array_equal(g.quats[0], [1, 0, 0, 0])
    # lattice point 0 is the north pole; candidate 1 is depth 2
    assert np.allclose(g.means[0], [0, 2, 0], atol=1e-12)


def test_decode_respects_pose():
    pose = CameraPose([1, -2, 0.5], quat_from_axis_angle([1, 1, 0], 0.7))
    raw = _raw(10)
    dirs = fibonacci_lattice(10).directions()
    g = decode_gaussians(raw, dirs, 1, pose, CFG)
    depth = softmax_depth(raw[:, CFG.slices()["logits"]], np.array(CFG.inv_depths))
    assert np.allclose(np.linalg.norm(g.means - pose.position, axis=1), depth)
    assert np.allclose(pose.to_camera(g.means) / depth[:, None], dirs)


def test_pixel_world_size():
    assert pixel_world_size(0, 1.0, 1024) == pytest.approx(0.006136, abs=1e-6)
    assert pixel_world_size(0, 1.0, 1024) == pytest.approx(2 * math.pi / 1024)
    assert pixel_world_size(2, 3.0, 1024) == pytest.approx(4 * pixel_world_size(1, 3.0, 1024) / 2)


def test_scale_bounds_and_psd():
    cfg = DecodeConfig(width=64, inv_depths=(0.2, 0.5, 1.0))
    raw = 3.0 * _raw(10_000, cfg, seed=3)
    lat = fibonacci_lattice(10_000)
    g = decode_gaussians(raw, lat.directions(), 0, CameraPose(), cfg)
    depth = np.linalg.norm(g.means, axis=1)
    px = pixel_world_size(0, depth, cfg.width)
    ratio = g.scales / px[:, None]
    assert ratio.min() >= cfg.s_min - 1e-12 and ratio.max() <= cfg.s_max + 1e-12
    eig = np.linalg.eigvalsh(g.covariances()).min(axis=1)
    assert np.all(eig >= (cfg.s_min * px) ** 2 * (1 - 1e-6))


def test_isotropic_identity_gives_diagonal_covariance():
    raw = _raw(20)
    sl = CFG.slices()
    raw[:, sl["quat"]] = [1, 0, 0, 0]
    g = decode_gaussians(raw, fibonacci_lattice(20).directions(), 0, CameraPose(), CFG)
    cov = g.covariances()
    assert np.allclose(cov - np.einsum("nii->ni", cov)[:, :, None] * np.eye(3), 0)


def test_decode_rejects_bad_raw():
    with pytest.raises(ValueError):
        decode_gaussians(np.zeros((3, 5)), np.zeros((3, 3)), 0, CameraPose(), CFG)
    raw = _raw(2)
    raw[0, 0] = np.inf
    with pytest.raises(ValueError):
        decode_gaussians(raw, np.zeros((2, 3)), 0, CameraPose(), CFG)


def test_decode_backward_finite_differences():
    cfg = DecodeConfig(width=32, inv_depths=(0.3, 0.6, 0.9), sh_degree=1)
    pose = CameraPose([0.1, 0.2, -0.3], quat_from_axis_angle([0, 1, 0], 0.4))
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(6, cfg.raw_size))
    dirs = fibonacci_lattice(6).directions()
    w = GaussianSet(*(rng.normal(size=a.shape) for a in decode_gaussians(raw, dirs, 1, pose, cfg).arrays()))
    loss = lambda r: sum(np.sum(a * b) for a, b in zip(decode_gaussians(r, dirs, 1, pose, cfg).arrays(), w.arrays()))
    grad = decode_gaussians_backward(raw, dirs, 1, pose, cfg, w)
    h = 1e-6
    for idx in np.ndindex(raw.shape):
        rp, rm = raw.copy(), raw.copy()
        rp[idx] += h
        rm[idx] -= h
        fd = (loss(rp) - loss(rm)) / (2 * h)
        assert fd == pytest.approx(grad[idx], rel=1e-5, abs=1e-7)


def test_softmax_depth_backward():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(4, 5))
    inv = np.linspace(0.1, 1.0, 5)
    g = rng.normal(size=4)
    an = softmax_depth_backward(s, inv, g)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        fd = np.sum(g * (softmax_depth(sp, inv) - softmax_depth(sm, inv))) / (2 * h)
        assert fd == pytest.approx(an[idx], rel=1e-6, abs=1e-9)


def test_sh_degree0():
    sh = np.array([[[0.2, -0.4, 1.0]]])
    d = np.array([[0.0, 0.0, 1.0]])
    assert np.allclose(sh_eval(sh, d), SH_C0 * sh[:, 0] + 0.5)
    assert np.allclose(sh_eval(sh, -d), SH_C0 * sh[:, 0] + 0.5)


def test_sh_degree1_table():
    # real degree-1 basis in the (-y, z, -x) ordering of common splatting code
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    table = {
        (1.0, 0.0, 0.0): (0.0, 0.0, -c1),
        (0.0, 1.0, 0.0): (-c1, 0.0, 0.0),
        (0.0, 0.0, 1.0): (0.0, c1, 0.0),
        (0.0, -1.0, 0.0): (c1, 0.0, 0.0),
    }
    rng = np.random.default_rng(9)
    sh = rng.normal(size=(1, 4, 3))
    for d, basis in table.items():
        want = SH_C0 * sh[0, 0] + 0.5 + sum(b * sh[0, k + 1] for k, b in enumerate(basis))
        assert np.allclose(sh_eval(sh, np.array([d])), want, atol=1e-12)


@given(st.integers(0, 10_000))
def test_sh_degree1_odd_parity(seed):
    rng = np.random.default_rng(seed)
    sh = rng.normal(size=(3, 4, 3))
    sh[:, 0] = 0
    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(sh_eval(sh, d) - 0.5, -(sh_eval(sh, -d) - 0.5), atol=1e-12)


def test_sh_backward(rng):
    sh = rng.normal(size=(4, 4, 3))
    d = rng.normal(size=(4, 3))
    g = rng.normal(size=(4, 3))
    gs, gd = sh_eval_backward(sh, d, g)
    h = 1e-6
    for arr, grad, fn in [(sh, gs, lambda a: sh_eval(a, d)), (d, gd, lambda a: sh_eval(sh, a))]:
        for idx in np.ndindex(arr.shape):
            p, m = arr.copy(), arr.copy()
            p[idx] += h
            m[idx] -= h
            assert np.sum(g * (fn(p) - fn(m))) / (2 * h) == pytest.approx(grad[idx], rel=1e-6, abs=1e-9)


def test_quat_matrix_backward(rng):
    q = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 3, 3))
    an = quats_to_matrices_backward(q, g)
    h = 1e-6
    for idx in np.ndindex(q.shape):
        p, m = q.copy(), q.copy()
        p[idx] += h
        m[idx] -= h
        fd = np.sum(g * (quats_to_matrices(p) - quats_to_matrices(m))) / (2 * h)
        assert fd == pytest.approx(an[idx], rel=1e-6, abs=1e-9)


def _pyramid(view, width=16, levels=2, opacity=None, seed=0):
    counts = pyramid_counts(width, levels)
    cfg = DecodeConfig(width, (0.5, 1.0))
    rng = np.random.default_rng(seed)
    raws = [rng.normal(size=(n, cfg.raw_size)) for n in counts]
    if opacity is not None:
        for r in raws:
            r[:, cfg.slices()["opacity"]] = opacity
    return build_pyramid(raws, CameraPose([view, 0, 0]), cfg, view=view)


def test_build_pyramid_sizes():
    p = _pyramid(0)
    assert p.counts == [81, 20] and len(p) == 101
    assert np.all(_pyramid(0, opacity=-50.0).levels[0].opacity < 1e-6)
    with pytest.raises(ValueError):
        build_pyramid([np.zeros((80, 10))], CameraPose(), DecodeConfig(16, (0.5, 1.0)))


def test_consolidate_order_and_determinism():
    p0, p1 = _pyramid(0, seed=1), _pyramid(1, seed=2)
    flat = consolidate([p1, p0])
    assert len(flat) == 202
    assert np.array_equal(flat.means[:20], p0.levels[1].means)
    assert np.array_equal(flat.means[20:101], p0.levels[0].means)
    assert np.array_equal(flat.means[101:121], p1.levels[1].means)
    again = consolidate([p0, p1])
    assert all(np.array_equal(a, b) for a, b in zip(flat.arrays(), again.arrays()))
    assert all(np.array_equal(a, b) for a, b in zip(consolidate([p0]).arrays(),
                                                   GaussianSet.concat(p0.levels[::-1]).arrays()))


def test_full_resolution_counts():
    # counts only: decoding 886k Gaussians is unnecessary to check the totals
    assert 2 * pyramid_counts(1024, 1)[0] == 667544
    assert 2 * sum(pyramid_counts(1024, 4)) == 886580


def test_flat_round_trip(rng):
    g = GaussianSet(rng.normal(size=(5, 3)), rng.uniform(size=5), rng.uniform(size=(5, 3)),
                    rng.normal(size=(5, 4)), rng.normal(size=(5, 4, 3)))
    h = g.with_flat(g.flat())
    assert all(np.array_equal(a, b) for a, b in zip(g.arrays(), h.arrays()))
    assert g.sh_degree == 1 and len(GaussianSet.empty()) == 0
