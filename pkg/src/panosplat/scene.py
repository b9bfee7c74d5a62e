"""Synthetic box-room panoramas with exact depth, used as ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, pixel_to_dir


@dataclass(frozen=True)
class TextureSpec:
    seed: int = 0
    checker: float = 0.5  # checker square size in metres
    checker_amp: float = 0.25
    noise_freqs: tuple = (1.5, 4.0, 10.0)  # cycles per metre
    noise_amps: tuple = (0.35, 0.25, 0.15)
    grid: int = 64


@dataclass(frozen=True)
class SceneSpec:
    half_extents: tuple = (3.0, 1.5, 2.5)
    texture: TextureSpec = field(default_factory=TextureSpec)
    poses: tuple = ()
    width: int = 256
    supersample: int = 2

    def __post_init__(self):
        if self.width % 2:
            raise ValueError("width must be even")
        ext = np.asarray(self.half_extents, dtype=np.float64)
        if ext.shape != (3,) or np.any(ext <= 0):
            raise ValueError("half_extents must be three positive lengths")
        for pose in self.poses:
            if np.any(np.abs(pose.position) >= ext):
                raise ValueError(f"camera at {pose.position} is not strictly inside the room")

    @property
    def height(self) -> int:
        return self.width // 2


def ray_box_depth(origin: np.ndarray, dirs: np.ndarray, half_extents) -> np.ndarray:
    """Distance from an interior point along unit ``dirs`` to the box wall."""
    ext = np.asarray(half_extents, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dirs > 0, (ext - origin) / dirs, np.where(dirs < 0, (-ext - origin) / dirs, np.inf))
    return t.min(axis=-1)


class _ValueNoise:
    """Periodic trilinear value noise on a seeded lattice."""

    def __init__(self, rng: np.random.Generator, grid: int):
        self.grid = grid
        self.table = rng.uniform(-1.0, 1.0, size=(grid, grid, grid, 3))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        g = self.grid
        base = np.floor(pts)
        f = pts - base
        f = f * f * (3.0 - 2.0 * f)
        i = base.astype(np.int64) % g
        out = 0.0
        for cx in (0, 1):
            wx = f[..., 0] if cx else 1.0 - f[..., 0]
            for cy in (0, 1):
                wy = f[..., 1] if cy else 1.0 - f[..., 1]
                for cz in (0, 1):
                    wz = f[..., 2] if cz else 1.0 - f[..., 2]
                    val = self.table[(i[..., 0] + cx) % g, (i[..., 1] + cy) % g, (i[..., 2] + cz) % g]
                    out = out + val * (wx * wy * wz)[..., None]
        return out


def wall_texture(points: np.ndarray, tex: TextureSpec) -> np.ndarray:
    rng = np.random.default_rng(tex.seed)
    noise = _ValueNoise(rng, tex.grid)
    offsets = rng.uniform(0.0, tex.grid, size=(len(tex.noise_freqs), 3))
    tint = rng.uniform(0.3, 0.7, size=3)
    col = np.broadcast_to(tint, points.shape).copy()
    for freq, amp, off in zip(tex.noise_freqs, tex.noise_amps, offsets):
        col += amp * noise(points * freq + off)
    cells = np.floor(points / tex.checker).astype(np.int64).sum(axis=-1)
    col += tex.checker_amp * np.where(cells % 2 == 0, 1.0, -1.0)[..., None]
    return np.clip(col, 0.0, 1.0)


def render_view(spec: SceneSpec, pose: CameraPose):
    """``(image (H, W, 3), depth (H, W))`` for one pose; depth is exact at pixel centres."""
    h, w = spec.height, spec.width
    s = spec.supersample
    off = (np.arange(s) + 0.5) / s - 0.5
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    img = np.zeros((h, w, 3))
    for oy in off:
        for ox in off:
            dirs = pose.to_world(pixel_to_dir(u + ox, v + oy, w, h))
            t = ray_box_depth(pose.position, dirs, spec.half_extents)
            img += wall_texture(pose.position + dirs * t[..., None], spec.texture)
    img /= s * s
    dirs = pose.to_world(pixel_to_dir(u, v, w, h))
    depth = ray_box_depth(pose.position, dirs, spec.half_extents)
    return img, depth


def synth_scene(spec: SceneSpec):
    """Images and depth maps for every pose in ``spec``."""
    if not spec.poses:
        raise ValueError("scene has no camera poses")
    views = [render_view(spec, p) for p in spec.poses]
    return [v[0] for v in views], [v[1] for v in views]


def random_pair_spec(seed: int, width: int = 256, baseline=(0.5, 1.0)) -> SceneSpec:
    """A seeded room with two cameras a random horizontal baseline apart."""
    rng = np.random.default_rng(seed)
    ext = (rng.uniform(2.0, 3.5), rng.uniform(1.2, 1.8), rng.uniform(2.0, 3.5))
    b = rng.uniform(*baseline)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    step = b * np.array([np.cos(ang), 0.0, np.sin(ang)])
    centre = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2), rng.uniform(-0.5, 0.5)])
    poses = (CameraPose(centre - 0.5 * step), CameraPose(centre + 0.5 * step))
    return SceneSpec(ext, TextureSpec(seed=seed), poses, width)
