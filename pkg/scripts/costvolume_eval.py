"""Depth error of the spherical cost volume per pyramid level on seeded box rooms.

    python scripts/costvolume_eval.py --seeds 0 1 2 3 4 --width 1024
"""
import argparse
import time

import numpy as np

from panosplat.costvolume import (FEATURE_PROVIDERS, DepthConfig, baseline_axis, downsample, feature_pyramid,
                                  hierarchical_depth, rgb_stats_features)
from panosplat.scene import random_pair_spec, synth_scene


def level_errors(seed, width, cfg, texture_threshold=0.02):
    spec = random_pair_spec(seed, width=width, baseline=(0.5, 1.0))
    imgs, deps = synth_scene(spec)
    p0, p1 = spec.poses
    provider = FEATURE_PROVIDERS[cfg.features]
    axis = baseline_axis(p0, p1)
    f0 = feature_pyramid(imgs[0], lambda im: provider(im, p0.matrix.T @ axis))
    f1 = feature_pyramid(imgs[1], lambda im: provider(im, p1.matrix.T @ axis))
    res = hierarchical_depth(f0, f1, p0, p1, cfg)
    out = {}
    for lvl in sorted(res.depths):
        gt = downsample(deps[0][..., None], 2**lvl)[..., 0]
        textured = rgb_stats_features(downsample(imgs[0], 2**lvl))[..., 6:].mean(-1) > texture_threshold
        out[lvl] = float((np.abs(res.depths[lvl] - gt) / gt)[textured].mean())
    return out, float(np.linalg.norm(p1.position - p0.position))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--width", type=int, default=1024)
    ap.add_argument("--candidates", type=int, default=128)
    ap.add_argument("--features", default="epipolar", choices=sorted(FEATURE_PROVIDERS))
    a = ap.parse_args()
    cfg = DepthConfig(0.5, 10.0, a.candidates, a.features)
    print("seed  baseline  " + "  ".join(f"l={lvl}" for lvl in (3, 2, 1)) + "  seconds")
    for seed in a.seeds:
        t0 = time.perf_counter()
        errs, base = level_errors(seed, a.width, cfg)
        cols = "  ".join(f"{errs[lvl]:.3f}" for lvl in (3, 2, 1))
        print(f"{seed:4d}  {base:8.3f}  {cols}  {time.perf_counter() - t0:7.1f}")


if __name__ == "__main__":
    main()
