"""Command-line entry point: ``panosplat <command> [--config file] [flags]``.

Exit codes: 0 success, 2 bad input or usage, 3 verification failure,
4 unreadable or malformed file, 5 dimension mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import costvolume, deferred, io, metrics, tiling
from .gaussians import GaussianPyramid, consolidate, lattice_pyramid
from .geometry import CameraPose, pyramid_counts
from .render import RenderConfig, render_pano
from .scene import SceneSpec, TextureSpec, synth_scene

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_IO, EXIT_DIM = 0, 2, 3, 4, 5


class VerificationFailed(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise io.DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _erp_width(img: np.ndarray, path) -> int:
    h, w = img.shape[:2]
    if w != 2 * h:
        raise io.DimensionError(f"{path}: {w}x{h} is not a 2:1 panorama")
    return w


# ------------------------------------------------------------------ commands


def cmd_lattice(a) -> int:
    counts = pyramid_counts(a.width, a.levels)
    if a.out:
        with open(a.out, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["level", "index", "x", "y", "z", "u", "v"])
            for lat in lattice_pyramid(a.width, a.levels):
                d = lat.directions()
                u, v = lat.pixel_coords(a.width // 2**lat.level, a.width // 2 ** (lat.level + 1))
                for i in range(lat.n):
                    wr.writerow([lat.level, i, *(f"{c:.9g}" for c in d[i]), f"{u[i]:.9g}", f"{v[i]:.9g}"])
    _emit({"width": a.width, "levels": a.levels, "n": counts[0], "counts": counts, "total": sum(counts)})
    return EXIT_OK


def _scene_from_json(doc: dict) -> SceneSpec:
    tex = TextureSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("texture", {}).items()})
    poses = tuple(CameraPose.from_dict(p) for p in doc.get("poses", []))
    return SceneSpec(tuple(doc.get("half_extents", (3.0, 1.5, 2.5))), tex, poses, int(doc.get("width", 256)),
                     int(doc.get("supersample", 2)))


def cmd_synth(a) -> int:
    doc = io.load_json(a.spec)
    try:
        spec = _scene_from_json(doc)
    except (TypeError, KeyError) as exc:
        raise io.FormatError(f"{a.spec}: bad scene spec ({exc})") from exc
    imgs, depths = synth_scene(spec)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, depth) in enumerate(zip(imgs, depths)):
        io.write_png(out / f"view{i}.png", img, a.bits)
        io.write_pfm(out / f"depth{i}.pfm", depth)
    io.write_poses(out / "poses.json", spec.poses)
    _emit({"views": len(imgs), "width": spec.width, "out": str(out)})
    return EXIT_OK


def _depth_cfg(a) -> costvolume.DepthConfig:
    return costvolume.DepthConfig(a.d_min, a.d_max, a.candidates, a.features)


def cmd_depth(a) -> int:
    left, right = io.read_png(a.left), io.read_png(a.right)
    _check_pair(left, right, "depth inputs")
    _erp_width(left, a.left)
    poses = io.read_poses(a.poses)
    if len(poses) < 2:
        raise io.FormatError(f"{a.poses}: need two poses")
    res, _ = costvolume.pair_depths(left, right, poses[0], poses[1], _depth_cfg(a))
    depth = res.depths[1]
    io.write_pfm(a.out, depth)
    _emit({"level": 1, "shape": list(depth.shape), "degenerate": res.degenerate,
           "median_depth": float(np.median(depth))})
    return EXIT_OK


def _render_cfg(width: int, face_res: int | None) -> RenderConfig:
    if width % 2:
        raise ValueError("render width must be even")
    return RenderConfig(width, width // 2, face_res or max(width // 2, 1))


def cmd_render(a) -> int:
    gf = io.read_psgp(a.gaussians)
    pose = io.read_poses(a.pose)[0]
    cfg = _render_cfg(a.width, a.face_res)
    res = render_pano(consolidate(gf.pyramids), pose, cfg, mode="sequential" if a.sequential else "batched")
    io.write_png(a.out, res.image, a.bits)
    _emit({"gaussians": sum(len(p) for p in gf.pyramids), "width": cfg.width, "face_res": cfg.face_res})
    return EXIT_OK


def cmd_pipeline(a) -> int:
    pair = Path(a.pair)
    imgs = [io.read_png(pair / f"view{i}.png") for i in (0, 1)]
    _check_pair(imgs[0], imgs[1], "pair images")
    width = _erp_width(imgs[0], pair / "view0.png")
    poses = io.read_poses(pair / "poses.json")
    if len(poses) < 2:
        raise io.FormatError(f"{pair / 'poses.json'}: need two poses")
    dcfg = _depth_cfg(a)
    res0, res1 = costvolume.pair_depths(imgs[0], imgs[1], poses[0], poses[1], dcfg)
    geo = a.geo_width or width
    spec = deferred.PipelineSpec(head_width=width, geo_width=geo, levels=a.levels, render=_render_cfg(width, None),
                                 tiles=a.tiles, inv_depths=tuple(np.linspace(1.0 / dcfg.d_max, 1.0 / dcfg.d_min,
                                                                             a.hypotheses)))
    theta = deferred.init_theta(spec, a.seed)
    layout = deferred.ParamLayout(spec)
    for lvl in range(spec.levels):
        layout.linear(theta, lvl)[0][:] *= a.head_gain
    target = io.read_poses(a.target_pose)[0] if a.target_pose else CameraPose(0.5 * (poses[0].position + poses[1].position))
    views = [deferred.ViewInput(im, p, deferred.prior_offsets(spec, im, r.depths[1]))
             for im, p, r in zip(imgs, poses, (res0, res1))]
    inputs = deferred.PipelineInputs(views, target, np.zeros((spec.render.height, spec.render.width, 3)))
    _, cache = deferred.forward_nograd(spec, inputs, theta, keep_cache=True, render=False)
    if a.blend:
        order = deferred._level_order(spec, 2)
        renders, dists = [], []
        for v in (0, 1):
            idx = np.concatenate([np.arange(order[(v, lvl)].start, order[(v, lvl)].stop) for lvl in range(spec.levels)])
            renders.append(render_pano(cache.gs.subset(idx), target, spec.render).image)
            dists.append(float(np.linalg.norm(poses[v].position - target.position)))
        image = metrics.deferred_blend(renders[0], renders[1], dists[0], dists[1])
    else:
        image = render_pano(cache.gs, target, spec.render).image
    io.write_png(a.out, image, a.bits)
    if a.gaussians_out:
        lattices = lattice_pyramid(geo, spec.levels)
        order = deferred._level_order(spec, 2)
        pyrs = [GaussianPyramid([cache.gs.subset(order[(v, lvl)]) for lvl in range(spec.levels)], lattices, geo, v,
                                poses[v]) for v in (0, 1)]
        io.write_psgp(a.gaussians_out, io.GaussianFile(geo, pyrs, spec.sh_degree))
    _emit({"gaussians": len(cache.gs), "blend": bool(a.blend), "width": width})
    return EXIT_OK


def cmd_metrics(a) -> int:
    x, y = io.read_png(a.a), io.read_png(a.b)
    _check_pair(x, y, "metric inputs")
    out = {"psnr": metrics.format_db(metrics.psnr(x, y)), "ws_psnr": metrics.format_db(metrics.ws_psnr(x, y)),
           "ssim": metrics.ssim(x, y)}
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=2))
    _emit(out)
    return EXIT_OK


def cmd_tile_verify(a) -> int:
    rng = np.random.default_rng(a.seed)
    op = tiling.certify(tiling.toy_head(seed=a.seed))
    img = rng.uniform(-1.0, 1.0, (a.width // 2, a.width, op.c_in))
    same = np.array_equal(tiling.run_tiled(op, img, a.tiles), tiling.apply_untiled(op, img))
    _emit({"width": a.width, "tiles": a.tiles, "radius": op.radius, "identical": bool(same)})
    if not same:
        raise VerificationFailed("tiled output differs from the untiled operator")
    return EXIT_OK


def cmd_grad_verify(a) -> int:
    spec = deferred.PipelineSpec(head_width=32, geo_width=16, levels=2, render=RenderConfig(32, 16, 12),
                                 tiles=2, features=2, hidden=2, inv_depths=(0.3, 0.6))
    inputs = deferred.random_inputs(spec, a.seed)
    theta = deferred.init_theta(spec, a.seed)
    mono = deferred.monolithic_grads(spec, inputs, theta)
    two = deferred.deferred_grads(spec, inputs, theta, two_step=True)
    scale = max(np.abs(mono.grads_theta).max(), 1e-30)
    rel = float(np.abs(two.grads_theta - mono.grads_theta).max() / scale)
    fd = fd_check(spec, inputs, theta, mono.grads_theta, np.random.default_rng(a.seed).choice(theta.size, a.samples,
                                                                                                  replace=False))
    report = {"deferred_vs_monolithic": rel, "fd_pass_fraction": fd["pass_fraction"], "fd_checked": fd["checked"],
              "fd_exempt": fd["exempt"]}
    _emit(report)
    if rel > 1e-6 or fd["pass_fraction"] < 0.99:
        raise VerificationFailed("gradient checks failed")
    return EXIT_OK


def fd_check(spec, inputs, theta, grads, indices, h: float = 1e-6, rtol: float = 1e-3, atol: float = 1e-8) -> dict:
    """Central differences of the end-to-end loss at ``indices``.

    Perturbations that flip a discrete rendering decision on either side are exempt and
    counted as passes.
    """
    fspec = replace(spec, tiles=1)
    _, digest = deferred.pipeline_loss(fspec, inputs, theta)
    ok = exempt = 0
    for i in indices:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        lp, dp = deferred.pipeline_loss(fspec, inputs, tp)
        lm, dm = deferred.pipeline_loss(fspec, inputs, tm)
        if dp != digest or dm != digest:
            exempt += 1
            ok += 1
            continue
        fd = (lp - lm) / (2.0 * h)
        ok += abs(fd - grads[i]) <= rtol * max(abs(fd), abs(grads[i])) + atol
    n = len(indices)
    return {"checked": n, "exempt": exempt, "pass_fraction": ok / n if n else 1.0}


def cmd_bench_mem(a) -> int:
    specs = {f"H={h}": deferred.bench_spec(h, tiles=a.tiles, geo_width=a.geo_width, render_width=a.render_width,
                                           levels=a.levels, hidden=a.hidden) for h in a.heights}
    rows = deferred.memory_report(specs, tuple(a.modes), seed=a.seed)
    text = deferred.report_csv(rows)
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

# flag -> (default, type); flags absent on the command line fall back to the config file, then here
COMMANDS = {
    "lattice": (cmd_lattice, {"width": (1024, int), "levels": (4, int), "out": (None, str)}),
    "synth": (cmd_synth, {"spec": (None, str), "out": (None, str), "bits": (8, int)}),
    "depth": (cmd_depth, {"left": (None, str), "right": (None, str), "poses": (None, str), "out": (None, str),
                          "d_min": (0.5, float), "d_max": (10.0, float), "candidates": (128, int),
                          "features": ("epipolar", str)}),
    "render": (cmd_render, {"gaussians": (None, str), "pose": (None, str), "width": (512, int), "out": (None, str),
                            "face_res": (None, int), "sequential": (False, bool), "bits": (8, int)}),
    "pipeline": (cmd_pipeline, {"pair": (None, str), "out": (None, str), "blend": (False, bool),
                                "target_pose": (None, str), "gaussians_out": (None, str), "geo_width": (None, int),
                                "levels": (3, int), "tiles": (2, int), "hypotheses": (32, int), "seed": (0, int),
                                "head_gain": (0.0, float), "d_min": (0.5, float), "d_max": (10.0, float),
                                "candidates": (128, int), "features": ("epipolar", str), "bits": (8, int)}),
    "metrics": (cmd_metrics, {"a": (None, str), "b": (None, str), "out": (None, str)}),
    "tile-verify": (cmd_tile_verify, {"width": (256, int), "tiles": (4, int), "seed": (0, int)}),
    "grad-verify": (cmd_grad_verify, {"seed": (0, int), "samples": (64, int)}),
    "bench-mem": (cmd_bench_mem, {"heights": ([256, 512], int), "tiles": (4, int), "geo_width": (64, int),
                                  "render_width": (128, int), "levels": (4, int), "hidden": (8, int),
                                  "modes": (list(deferred.MODES), str), "seed": (0, int), "out": (None, str)}),
}
REQUIRED = {
    "synth": ("spec", "out"), "depth": ("left", "right", "poses", "out"), "render": ("gaussians", "pose", "out"),
    "pipeline": ("pair", "out"), "metrics": ("a", "b"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panosplat", description="Spherical Gaussian pyramid toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, flags) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML or JSON file with flag values")
        for flag, (default, typ) in flags.items():
            opt = "--" + flag.replace("_", "-")
            if typ is bool:
                p.add_argument(opt, action="store_const", const=True, default=None)
            elif isinstance(default, list):
                p.add_argument(opt, nargs="+", type=typ, default=None)
            else:
                p.add_argument(opt, type=typ, default=None)
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from ``--config`` and then from the defaults."""
    _, flags = COMMANDS[args.command]
    cfg = io.load_config(args.config) if args.config else {}
    unknown = {k.replace("-", "_") for k in cfg} - set(flags)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for flag, (default, _) in flags.items():
        if getattr(args, flag) is None:
            setattr(args, flag, cfg.get(flag, default))
    missing = [f for f in REQUIRED.get(args.command, ()) if getattr(args, f) is None]
    if missing:
        raise ValueError("missing required options: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = resolve(args)
        return COMMANDS[args.command][0](args)
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except io.DimensionError as exc:
        print(f"dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIM
    except (io.FormatError, OSError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
