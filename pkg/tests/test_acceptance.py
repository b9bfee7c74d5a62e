"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary.
"""
import math
import time
from dataclasses import replace

import numpy as np
from scipy.spatial import cKDTree

from panosplat import deferred
from panosplat.cli import fd_check
from panosplat.costvolume import (FEATURE_PROVIDERS, DepthConfig, baseline_axis, downsample, feature_pyramid,
                                  hierarchical_depth, rgb_stats_features, warp_cycle_error)
from panosplat.cubemap import CubemapFaceSet, StitchPlan, face_pixel_dirs, pad_faces
from panosplat.gaussians import GaussianSet
from panosplat.geometry import (CameraPose, dir_to_pixel, fibonacci_lattice, lattice_count, pixel_to_dir,
                                pyramid_counts, ws_weights)
from panosplat.metrics import (LossConfig, combine_real, combine_synthetic, combined_losses, deferred_blend,
                               depth_loss, psnr, rgb_loss, ws_psnr)
from panosplat.render import (RenderConfig, project_to_face, rasterize_face, rasterize_face_oracle, render_dense_oracle,
                              render_pano)
from panosplat.scene import random_pair_spec, synth_scene
from panosplat.tiling import HeadShape, apply_untiled, run_tiled, toy_head


def test_criterion_1_gaussian_counts(report):
    pixels = 2 * 512 * 1024
    single = 2 * lattice_count(1024)
    full = 2 * sum(pyramid_counts(1024, 4))
    r1, r2 = 100 * single / pixels, 100 * full / pixels
    ok = single == 667_544 and full == 886_580 and abs(r1 - 63.67) <= 0.05 and abs(r2 - 84.55) <= 0.05
    report(1, ok, f"single-level {single} ({r1:.3f}%), pyramid {full} ({r2:.3f}%)")


def test_criterion_2_tiling_equivalence(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    heights = [12, 13, 16, 24, 32, 45, 64, 100, 128, 256]
    cases = bad = 0
    for i in range(102):
        h = heights[i % len(heights)]
        n = int(rng.choice([1, 2, 4]))
        shape = HeadShape(c_in=int(rng.integers(1, 5)), hidden=int(rng.integers(1, 5)), c_out=int(rng.integers(1, 4)))
        op = toy_head(shape.init(int(rng.integers(2**31))), shape)
        img = rng.uniform(-1, 1, (h, 2 * h, shape.c_in))
        cases += 1
        bad += not np.array_equal(run_tiled(op, img, n), apply_untiled(op, img))
    dt = time.perf_counter() - t0
    report(2, bad == 0 and dt < 60, f"{cases - bad}/{cases} cases bit-exact up to 256x512 in {dt:.1f} s")


def _small_spec(seed):
    rng = np.random.default_rng(seed)
    return deferred.PipelineSpec(head_width=int(rng.choice([32, 64])), geo_width=16, levels=2,
                                 render=RenderConfig(32, 16, 12), tiles=int(rng.choice([1, 2])), features=2,
                                 hidden=2, inv_depths=(0.3, 0.6))


def test_criterion_3_deferred_backprop(report):
    t0 = time.perf_counter()
    worst_rel, worst_fd = 0.0, 1.0
    for s in range(10):
        spec = _small_spec(s)
        inputs = deferred.random_inputs(spec, s)
        theta = deferred.init_theta(spec, s)
        mono = deferred.monolithic_grads(spec, inputs, theta)
        two = deferred.deferred_grads(spec, inputs, theta, two_step=True)
        ref = np.abs(mono.grads_theta).max()
        worst_rel = max(worst_rel, np.abs(two.grads_theta - mono.grads_theta).max() / ref)
        fd = fd_check(spec, inputs, theta, mono.grads_theta, range(theta.size))
        worst_fd = min(worst_fd, fd["pass_fraction"])
    dt = time.perf_counter() - t0
    ok = worst_rel <= 1e-6 and worst_fd >= 0.99
    report(3, ok, f"max rel diff {worst_rel:.2e}, worst FD pass fraction {worst_fd:.4f} over 10 specs ({dt:.0f} s)")


def test_criterion_4_memory_ordering(report):
    ordered = []
    for h in (256, 512):
        spec = deferred.bench_spec(h, hidden=8)
        inputs = deferred.random_inputs(spec, 0)
        theta = deferred.init_theta(spec, 0)
        peak = {m: deferred.run_mode(m, spec, inputs, theta).peak_live_bytes for m in deferred.MODES}
        ordered.append(peak["two-step"] < peak["one-step"] < peak["monolithic"])
    spec = deferred.bench_spec(256, hidden=8)
    inputs = deferred.random_inputs(spec, 0)
    theta = deferred.init_theta(spec, 0)
    ns = np.arange(1, 5)
    peaks = np.array([deferred.head_stage_peak(replace(spec, tiles=int(n)), inputs, theta) for n in ns], float)
    a = np.stack([np.ones(4), 1.0 / ns**2], axis=1)
    coef, *_ = np.linalg.lstsq(a, peaks, rcond=None)
    resid = np.abs(a @ coef - peaks).max() / peaks.max()
    ok = all(ordered) and coef[1] > 0 and resid < 0.02
    report(4, ok, f"ordering at H=256,512: {ordered}; head-stage a + b/N^2 fit max residual {100 * resid:.2f}%")


def _scene(seed, n, spread=(1.5, 3.0), scale=(0.1, 0.3)):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(d * rng.uniform(*spread, (n, 1)), rng.uniform(0.1, 0.5, n), rng.uniform(*scale, (n, 3)), q,
                       rng.uniform(-1, 1, (n, 1, 3)))


def test_criterion_5_renderer(report):
    cfg = RenderConfig(128, 64, 64)
    pose = CameraPose([0.05, 0.0, -0.1])
    raster_ok = all(np.array_equal(rasterize_face(p, cfg)[0], rasterize_face_oracle(p, cfg))
                    for s in range(5) for p in (project_to_face(_scene(s, 64), pose, f, cfg) for f in range(6)))
    modes_ok = True
    for s in range(5):
        a, b = render_pano(_scene(s, 50), pose, cfg, "batched"), render_pano(_scene(s, 50), pose, cfg, "sequential")
        modes_ok &= bool(np.array_equal(a.image, b.image) and np.array_equal(a.alpha, b.alpha))
    # the micro-camera reference renders each pixel with its own tangent-plane projection
    dense = max(float(np.abs(render_dense_oracle(_scene(s, 50), CameraPose(), cfg)[..., :3] -
                             render_pano(_scene(s, 50), CameraPose(), cfg).image).max()) for s in range(10))
    ok = raster_ok and modes_ok and dense <= 5e-3
    report(5, ok, f"rasterizer==oracle {raster_ok}, sequential==batched {modes_ok}, "
                  f"dense-ray max abs diff {dense:.4f} (limit 5e-3)")


def test_criterion_6_seam_continuity(report):
    w, r = 512, 128
    field = np.array([0.3, 0.5, -0.8])
    plan = StitchPlan(w, w // 2, r)
    out = plan.stitch(pad_faces(CubemapFaceSet(face_pixel_dirs(r) @ field)))[..., 0]
    fid = plan.face.reshape(out.shape)
    gx, sx = np.abs(np.roll(out, -1, 1) - out), fid != np.roll(fid, -1, 1)
    gy, sy = np.abs(out[1:] - out[:-1]), fid[1:] != fid[:-1]
    ratio = max(gx[sx].max(), gy[sy].max()) / max(gx[~sx].max(), gy[~sy].max())
    report(6, ratio <= 1.5, f"seam/interior gradient ratio {ratio:.3f} at W=512")


def test_criterion_7_cost_volume(report):
    cfg = DepthConfig(0.5, 10.0, 128, "epipolar")
    provider = FEATURE_PROVIDERS[cfg.features]
    errs = []
    for seed in range(5):
        spec = random_pair_spec(seed, width=1024, baseline=(0.5, 1.0))
        imgs, deps = synth_scene(spec)
        p0, p1 = spec.poses
        axis = baseline_axis(p0, p1)
        f0 = feature_pyramid(imgs[0], lambda im: provider(im, p0.matrix.T @ axis))
        f1 = feature_pyramid(imgs[1], lambda im: provider(im, p1.matrix.T @ axis))
        res = hierarchical_depth(f0, f1, p0, p1, cfg)
        per = {}
        for lvl in (1, 3):
            gt = downsample(deps[0][..., None], 2**lvl)[..., 0]
            textured = rgb_stats_features(downsample(imgs[0], 2**lvl))[..., 6:].mean(-1) > 0.02
            per[lvl] = float((np.abs(res.depths[lvl] - gt) / gt)[textured].mean())
        errs.append(per)
    ok = all(e[1] < 0.05 and e[1] <= e[3] for e in errs)
    text = ", ".join(f"{e[1]:.3f}/{e[3]:.3f}" for e in errs)
    report(7, ok, f"l=1/l=3 mean abs rel error per scene {text}")


def test_criterion_8_formula_spot_checks(report):
    tol = 1e-9
    rng = np.random.default_rng(8)
    a = rng.uniform(0.2, 0.8, (8, 16, 3))
    z = np.ones((4, 8))
    preds = {1: z + 0.1, 2: z[:2, :4] - 0.2, 3: z[:1, :2] + 0.3}
    gts = {1: z, 2: z[:2, :4], 3: z[:1, :2]}
    i0, i1 = np.full((2, 4, 3), 0.2), np.full((2, 4, 3), 0.6)
    cfg = LossConfig()
    checks = {
        "blend": np.abs(deferred_blend(i0, i1, 1.0, 3.0) - 0.3).max() <= tol
        and np.abs(deferred_blend(i0, i1, 1.5, 1.5) - 0.4).max() <= tol
        and np.array_equal(deferred_blend(i0, i1, 0.0, 2.0), i0),
        "depth": abs(depth_loss([preds, preds], [gts, gts], 0.9) - 1.046) <= tol,
        "rgb": abs(rgb_loss(a + 0.1, a) - 0.01) <= tol,
        "synthetic": abs(combine_synthetic(2.0, 0.5) - 0.6) <= tol
        and abs(combined_losses(cfg, "synthetic", a, a + 0.1, depth_preds=[{1: z + 2}], depth_gts=[{1: z}]) - 0.11) <= tol,
        "real": abs(combine_real({1: 0.37, 2: 0.37, 3: 0.37}, 0.37) - 3.71 * 0.37) <= tol,
        "psnr": abs(psnr(a + 0.1, a) - 20.0) <= tol and abs(ws_psnr(a + 0.1, a) - 20.0) <= tol
        and psnr(a, a) == math.inf,
    }
    report(8, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in checks.items()))


def test_criterion_9_geometry_invariants(report):
    rng = np.random.default_rng(9)
    d = rng.normal(size=(100_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d[np.abs(d[:, 1]) < math.sin(math.radians(89.9))]
    u, v = dir_to_pixel(d, 1024, 512)
    round_trip = float(np.max(np.arccos(np.clip(np.sum(pixel_to_dir(u, v, 1024, 512) * d, axis=1), -1, 1))))
    ratios = []
    for n in (1_000, 10_000, 100_000):
        pts = fibonacci_lattice(n).directions()
        dist = cKDTree(pts).query(pts, k=2)[0][:, 1]
        ratios.append(dist.max() / dist.min())
    w = ws_weights(1024, 512)[..., 0]
    ws_ok = np.allclose(w, w[::-1]) and abs(w.mean() / (2 / math.pi) - 1) < 0.01
    spec = random_pair_spec(3, width=128)
    _, deps = synth_scene(spec)
    cycle = float(np.quantile(warp_cycle_error(*spec.poses, deps[0], deps[1]), 0.98))
    ok = round_trip < 1e-6 and max(ratios) < 2.0 and ws_ok and cycle < 0.5
    report(9, ok, f"round trip {round_trip:.1e} rad, lattice NN ratios {[round(float(r), 3) for r in ratios]}, "
                  f"WS symmetric with mean/(2/pi) ok {ws_ok}, warp cycle p98 {cycle:.3f} px")
