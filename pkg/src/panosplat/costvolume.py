"""Hierarchical spherical plane sweep between two panoramas.

Features of the source view are warped into the reference view for a set of
inverse-depth hypotheses, correlated with the reference features, and turned into
depth with a softmax over the candidates. Finer levels re-sweep a narrower
per-pixel window around the upsampled coarse estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gaussians import softmax_depth
from .geometry import CameraPose, dir_to_pixel, erp_directions, pixel_to_dir, sample_erp
from .tiling import upsample2x

COARSE_LEVEL = 3


@dataclass(frozen=True)
class DepthHypotheses:
    """Candidates uniformly spaced in inverse depth, ascending (so depth descends)."""

    inv_depths: np.ndarray
    d_min: float
    d_max: float

    @property
    def count(self) -> int:
        return len(self.inv_depths)

    @property
    def depths(self) -> np.ndarray:
        return 1.0 / self.inv_depths


def make_hypotheses(d_min: float, d_max: float, count: int) -> DepthHypotheses:
    if not 0.0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    if count < 2:
        raise ValueError("need at least two depth candidates")
    return DepthHypotheses(np.linspace(1.0 / d_max, 1.0 / d_min, count), float(d_min), float(d_max))


@dataclass
class CostVolume:
    """``scores[y, x, k]`` for candidate inverse depths ``inv[k]`` or ``inv[y, x, k]``."""

    scores: np.ndarray
    inv: np.ndarray
    hypotheses: DepthHypotheses

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


# ------------------------------------------------------------------ warping


def warp_coords(ref_pose: CameraPose, src_pose: CameraPose, inv_depth, height: int, width: int):
    """Source-view pixel coordinates of every reference pixel placed at ``1 / inv_depth``."""
    inv_depth = np.asarray(inv_depth, dtype=np.float64)
    if np.any(inv_depth <= 0):
        raise ValueError("inverse depth must be positive")
    rays = ref_pose.to_world(erp_directions(width, height))
    pts = ref_pose.position + rays * (1.0 / inv_depth)[..., None]
    local = src_pose.to_camera(pts)
    norm = np.linalg.norm(local, axis=-1, keepdims=True)
    d = local / np.where(norm > 0, norm, 1.0)
    return dir_to_pixel(d, width, height)


def spherical_warp(src: np.ndarray, src_pose: CameraPose, ref_pose: CameraPose, inv_depth) -> np.ndarray:
    """Resample ``src`` into the reference view assuming every pixel sits at ``1 / inv_depth``.

    ``inv_depth`` is a scalar or a per-pixel ``(H, W)`` raster.
    """
    h, w = src.shape[:2]
    u, v = warp_coords(ref_pose, src_pose, inv_depth, h, w)
    return sample_erp(src, u, v)


def correlate(ref: np.ndarray, warped: np.ndarray) -> np.ndarray:
    """Per-pixel dot product scaled by ``1/sqrt(C)``."""
    if ref.shape != warped.shape:
        raise ValueError(f"feature shapes differ: {ref.shape} vs {warped.shape}")
    return np.sum(ref * warped, axis=-1) / np.sqrt(ref.shape[-1])


def build_volume(ref_feat: np.ndarray, src_feat: np.ndarray, ref_pose: CameraPose, src_pose: CameraPose,
                 hypo: DepthHypotheses) -> CostVolume:
    scores = np.stack([correlate(ref_feat, spherical_warp(src_feat, src_pose, ref_pose, inv))
                       for inv in hypo.inv_depths], axis=-1)
    return CostVolume(scores, hypo.inv_depths.copy(), hypo)


def volume_depth(vol: CostVolume) -> np.ndarray:
    """Softmax-weighted inverse depth over the candidates, returned as depth."""
    return softmax_depth(vol.scores, vol.inv)


# ------------------------------------------------------------------ refinement


def level_candidates(n_coarse: int, level: int) -> int:
    return n_coarse >> (COARSE_LEVEL - level)


def refine_window(coarse_depth: np.ndarray, hypo: DepthHypotheses, level: int) -> np.ndarray:
    """Per-pixel candidates ``(2H, 2W, D_l)`` around the upsampled coarse inverse depth."""
    if level not in (1, 2):
        raise ValueError(f"refinement runs at levels 1 and 2, got {level}")
    count = level_candidates(hypo.count, level)
    if count < 2:
        raise ValueError(f"{hypo.count} coarse candidates leave fewer than two at level {level}")
    lo_inv, hi_inv = 1.0 / hypo.d_max, 1.0 / hypo.d_min
    span = (hi_inv - lo_inv) / 2 ** (COARSE_LEVEL - level)
    centre = upsample2x((1.0 / coarse_depth)[..., None])[..., 0]
    start = np.clip(centre - 0.5 * span, lo_inv, hi_inv - span)
    return start[..., None] + span * np.linspace(0.0, 1.0, count)


def refine_level(coarse_depth: np.ndarray, ref_feat: np.ndarray, src_feat: np.ndarray,
                 ref_pose: CameraPose, src_pose: CameraPose, level: int, hypo: DepthHypotheses,
                 refiner: Callable | None = None):
    """Re-sweep a narrowed per-pixel window. Returns ``(CostVolume, depth)``."""
    if ref_feat.shape[0] != 2 * coarse_depth.shape[0]:
        raise ValueError("features must be twice the coarse depth resolution")
    inv = refine_window(coarse_depth, hypo, level)
    scores = np.stack([correlate(ref_feat, spherical_warp(src_feat, src_pose, ref_pose, inv[..., k]))
                       for k in range(inv.shape[-1])], axis=-1)
    vol = CostVolume(scores, inv, hypo)
    if refiner is not None:
        vol.scores = vol.scores + refiner(vol, coarse_depth, ref_feat)
    return vol, volume_depth(vol)


# ------------------------------------------------------------------ features


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Area average over ``factor x factor`` blocks."""
    if factor == 1:
        return np.asarray(img, dtype=np.float64).copy()
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def _neighbourhood(img: np.ndarray, radius: int) -> np.ndarray:
    """``(H, W, (2r+1)^2, C)`` window stack; rows replicate at the poles, columns wrap."""
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    padded = np.concatenate([padded[:, -radius:], padded, padded[:, :radius]], axis=1) if radius else padded
    h, w = img.shape[:2]
    k = 2 * radius + 1
    return np.stack([padded[dy:dy + h, dx:dx + w] for dy in range(k) for dx in range(k)], axis=2)


def rgb_stats_features(img: np.ndarray) -> np.ndarray:
    """Raw RGB plus 3x3 local mean and standard deviation per channel."""
    nb = _neighbourhood(np.asarray(img, dtype=np.float64), 1)
    mean = nb.mean(axis=2)
    std = np.sqrt(np.maximum(nb.var(axis=2), 0.0))
    return np.concatenate([img, mean, std], axis=2)


@dataclass(frozen=True)
class PatchFeatures:
    """Zero-mean, fixed-norm patch descriptors.

    Each descriptor has norm ``sqrt(gain) * C**0.25`` so a perfect match scores
    ``gain`` after the ``1/sqrt(C)`` correlation scaling.
    """

    radius: int = 2
    gain: float = 40.0
    eps: float = 1e-3

    def __call__(self, img: np.ndarray) -> np.ndarray:
        nb = _neighbourhood(np.asarray(img, dtype=np.float64), self.radius)
        h, w = nb.shape[:2]
        f = nb.reshape(h, w, -1)
        f = f - f.mean(axis=2, keepdims=True)
        norm = np.sqrt(np.sum(f * f, axis=2, keepdims=True) + self.eps**2)
        c = f.shape[2]
        return f / norm * np.sqrt(self.gain) * c**0.25


@dataclass(frozen=True)
class RingFeatures:
    """Rotation-invariant descriptors: centre colour plus mean colour on rings.

    Rings are sampled on the sphere's tangent plane at multiples of the equatorial
    pixel angle, so they keep their shape near the poles where square ERP patches
    shear and rotate between views. Normalised like :class:`PatchFeatures`.
    """

    radii: tuple = (1.0, 2.0, 3.0)
    n_azimuth: int = 8
    gain: float = 40.0
    eps: float = 1e-3

    def __call__(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape[:2]
        d = erp_directions(w, h)
        east = np.stack([d[..., 2], np.zeros_like(d[..., 0]), -d[..., 0]], axis=-1)
        east_norm = np.linalg.norm(east, axis=-1, keepdims=True)
        east = np.where(east_norm > 1e-9, east / np.maximum(east_norm, 1e-12), np.array([1.0, 0.0, 0.0]))
        north = np.cross(d, east)
        step = 2.0 * np.pi / w
        parts = [img]
        for rho in self.radii:
            acc = np.zeros_like(img)
            for phi in 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth:
                off = east * np.cos(phi) + north * np.sin(phi)
                q = d * np.cos(rho * step) + off * np.sin(rho * step)
                acc += sample_erp(img, *dir_to_pixel(q, w, h))
            parts.append(acc / self.n_azimuth)
        f = np.concatenate(parts, axis=2)
        f = f - f.mean(axis=2, keepdims=True)
        norm = np.sqrt(np.sum(f * f, axis=2, keepdims=True) + self.eps**2)
        return f / norm * np.sqrt(self.gain) * f.shape[2] ** 0.25


@dataclass(frozen=True)
class EpipolarPatchFeatures:
    """Tangent-plane patches aligned with the epipolar great circles.

    The patch x-axis points along the tangent toward ``axis`` (the baseline, in
    camera coordinates) and the y-axis is normal to the epipolar plane. A scene
    point lies in the same epipolar plane in both views, so the two patches share
    an orientation up to foreshortening, including near the poles. Normalised like
    :class:`PatchFeatures`.
    """

    radius: int = 2
    gain: float = 40.0
    eps: float = 1e-3

    def __call__(self, img: np.ndarray, axis=(1.0, 0.0, 0.0)) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape[:2]
        d = erp_directions(w, h)
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        tx = axis - np.sum(d * axis, axis=-1, keepdims=True) * d
        tn = np.linalg.norm(tx, axis=-1, keepdims=True)
        # at the epipoles fall back to the local east direction
        east = np.stack([d[..., 2], np.zeros_like(d[..., 0]), -d[..., 0]], axis=-1)
        east = east / np.maximum(np.linalg.norm(east, axis=-1, keepdims=True), 1e-12)
        tx = np.where(tn > 1e-6, tx / np.maximum(tn, 1e-12), east)
        ty = np.cross(d, tx)
        step = 2.0 * np.pi / w
        r = self.radius
        samples = []
        for j in range(-r, r + 1):
            for i in range(-r, r + 1):
                q = d + step * (i * tx + j * ty)
                q = q / np.linalg.norm(q, axis=-1, keepdims=True)
                samples.append(sample_erp(img, *dir_to_pixel(q, w, h)))
        f = np.concatenate(samples, axis=2)
        f = f - f.mean(axis=2, keepdims=True)
        norm = np.sqrt(np.sum(f * f, axis=2, keepdims=True) + self.eps**2)
        return f / norm * np.sqrt(self.gain) * f.shape[2] ** 0.25


FEATURE_PROVIDERS = {"rgb_stats": rgb_stats_features, "patch": PatchFeatures(), "ring": RingFeatures(),
                     "epipolar": EpipolarPatchFeatures()}


# ------------------------------------------------------------------ hierarchy


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 0.1
    d_max: float = 100.0
    n_candidates: int = 128
    features: str = "epipolar"


@dataclass
class DepthResult:
    depths: dict  # level -> (H_l, W_l) depth
    volumes: dict = field(repr=False)
    degenerate: bool = False


def feature_pyramid(img: np.ndarray, provider: Callable, levels=(1, 2, 3)) -> dict:
    return {lvl: provider(downsample(img, 2**lvl)) for lvl in levels}


def hierarchical_depth(ref_feats: dict, src_feats: dict, ref_pose: CameraPose, src_pose: CameraPose,
                       cfg: DepthConfig = DepthConfig(), refiner: Callable | None = None) -> DepthResult:
    """Coarse sweep at level 3, then refinement at levels 2 and 1 (the finest level is skipped)."""
    for lvl in (1, 2, 3):
        if lvl not in ref_feats or lvl not in src_feats:
            raise ValueError(f"feature pyramids need level {lvl}")
    hypo = make_hypotheses(cfg.d_min, cfg.d_max, cfg.n_candidates)
    vol = build_volume(ref_feats[3], src_feats[3], ref_pose, src_pose, hypo)
    if refiner is not None:
        vol.scores = vol.scores + refiner(vol, None, ref_feats[3])
    depths = {3: volume_depth(vol)}
    volumes = {3: vol}
    for lvl in (2, 1):
        volumes[lvl], depths[lvl] = refine_level(depths[lvl + 1], ref_feats[lvl], src_feats[lvl],
                                                 ref_pose, src_pose, lvl, hypo, refiner)
    baseline = float(np.linalg.norm(ref_pose.position - src_pose.position))
    return DepthResult(depths, volumes, degenerate=baseline < 1e-9)


def baseline_axis(pose0: CameraPose, pose1: CameraPose) -> np.ndarray:
    """World baseline direction, oriented independently of the view order."""
    a, b = sorted([tuple(pose0.position), tuple(pose1.position)])
    axis = np.subtract(b, a)
    n = np.linalg.norm(axis)
    return axis / n if n > 1e-12 else np.array([0.0, 1.0, 0.0])


def pair_depths(img0: np.ndarray, img1: np.ndarray, pose0: CameraPose, pose1: CameraPose,
                cfg: DepthConfig = DepthConfig(), refiner: Callable | None = None):
    """Depth pyramids for both views, each using the other as source."""
    provider = FEATURE_PROVIDERS[cfg.features]
    if isinstance(provider, EpipolarPatchFeatures):
        axis = baseline_axis(pose0, pose1)
        f0 = feature_pyramid(img0, lambda im: provider(im, pose0.matrix.T @ axis))
        f1 = feature_pyramid(img1, lambda im: provider(im, pose1.matrix.T @ axis))
    else:
        f0, f1 = feature_pyramid(img0, provider), feature_pyramid(img1, provider)
    return (hierarchical_depth(f0, f1, pose0, pose1, cfg, refiner),
            hierarchical_depth(f1, f0, pose1, pose0, cfg, refiner))


def warp_cycle_error(pose0: CameraPose, pose1: CameraPose, depth0: np.ndarray, depth1: np.ndarray) -> np.ndarray:
    """Pixel distance after mapping view 0 into view 1 at ``depth0`` and back at ``depth1``."""
    h, w = depth0.shape
    u1, v1 = warp_coords(pose0, pose1, 1.0 / depth0, h, w)
    z1 = sample_erp(depth1[..., None], u1, v1)[..., 0]
    rays = pose1.to_world(pixel_to_dir(u1, v1, w, h))
    pts = pose1.position + rays * z1[..., None]
    local = pose0.to_camera(pts)
    u0, v0 = dir_to_pixel(local / np.linalg.norm(local, axis=-1, keepdims=True), w, h)
    gu, gv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    du = np.abs(u0 - gu)
    du = np.minimum(du, w - du)
    return np.hypot(du, v0 - gv)

