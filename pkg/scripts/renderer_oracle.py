"""Cubemap renderer against the exhaustive face oracle and the per-pixel dense-ray reference.

    python scripts/renderer_oracle.py --scenes 10 --width 128
"""
import argparse

import numpy as np

from panosplat.gaussians import GaussianSet
from panosplat.geometry import CameraPose
from panosplat.render import (RenderConfig, project_to_face, rasterize_face, rasterize_face_oracle, render_dense_oracle,
                              render_pano)


def random_scene(seed, n, spread, scale):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(d * rng.uniform(*spread, (n, 1)), rng.uniform(0.1, 0.5, n), rng.uniform(*scale, (n, 3)), q,
                       rng.uniform(-1, 1, (n, 1, 3)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--gaussians", type=int, default=50)
    ap.add_argument("--scale", type=float, nargs=2, default=[0.1, 0.3])
    a = ap.parse_args()
    cfg = RenderConfig(a.width, a.width // 2, a.width // 2)
    pose = CameraPose()
    print("scene  faces==oracle  dense max  dense mean  dense p99")
    for s in range(a.scenes):
        gs = random_scene(s, a.gaussians, (1.5, 3.0), tuple(a.scale))
        exact = all(np.array_equal(rasterize_face(p, cfg)[0], rasterize_face_oracle(p, cfg))
                    for p in (project_to_face(gs, pose, f, cfg) for f in range(6)))
        err = np.abs(render_dense_oracle(gs, pose, cfg)[..., :3] - render_pano(gs, pose, cfg).image)
        print(f"{s:5d}  {str(exact):>13}  {err.max():9.4f}  {err.mean():10.5f}  {np.quantile(err, 0.99):9.4f}")


if __name__ == "__main__":
    main()
