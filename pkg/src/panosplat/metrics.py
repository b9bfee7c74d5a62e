"""Deferred blending, image metrics and training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import ws_weights


def deferred_blend(img0: np.ndarray, img1: np.ndarray, d0: float, d1: float) -> np.ndarray:
    """Distance-weighted blend: the render from the nearer input view dominates."""
    if d0 < 0 or d1 < 0:
        raise ValueError("distances must be non-negative")
    if d0 + d1 == 0:
        raise ValueError("both distances are zero")
    img0, img1 = np.asarray(img0, dtype=np.float64), np.asarray(img1, dtype=np.float64)
    if img0.shape != img1.shape:
        raise ValueError(f"shape mismatch {img0.shape} vs {img1.shape}")
    return (d1 * img0 + d0 * img1) / (d0 + d1)


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def _psnr_from_mse(err: float) -> float:
    return math.inf if err == 0.0 else 10.0 * math.log10(1.0 / err)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR for unit peak; identical images give ``math.inf``."""
    return _psnr_from_mse(mse(a, b))


def ws_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR with squared errors weighted by ``cos(latitude)``."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, c = a.shape
    wt = ws_weights(w, h)
    err = float(np.sum(wt * (a - b) ** 2) / (np.sum(wt) * c))
    return _psnr_from_mse(err)


def format_db(value: float):
    """JSON-friendly dB value (``"inf"`` for identical images)."""
    return "inf" if math.isinf(value) else value


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = len(win)
    rows = sliding_window_view(img, k, axis=0) @ win
    return sliding_window_view(rows, k, axis=1) @ win


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window over the valid region, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < size:
        raise ValueError(f"images smaller than the {size}x{size} window")
    win = gaussian_window(size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    # population moments, as in the standard formulation
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.9
    lam: float = 0.1
    alpha: float = 0.05
    perceptual: Callable | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("loss weights must be non-negative")


def depth_loss(preds: list, gts: list, gamma: float = 0.9) -> float:
    """``sum_i sum_l gamma**(l-1) * mean|D - D_gt|`` over views ``i`` and the levels present."""
    if len(preds) != len(gts):
        raise ValueError("need one ground-truth pyramid per view")
    total = 0.0
    for pred, gt in zip(preds, gts):
        if set(pred) != set(gt):
            raise ValueError(f"level mismatch: {sorted(pred)} vs {sorted(gt)}")
        for lvl in sorted(pred):
            p, g = _pair(pred[lvl], gt[lvl])
            total += gamma ** (lvl - 1) * float(np.mean(np.abs(p - g)))
    return total


def rgb_loss(img: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    """Mean squared error plus ``lam`` times the perceptual plugin (zero by default)."""
    loss = mse(img, target)
    if cfg.perceptual is not None:
        loss += cfg.lam * float(cfg.perceptual(img, target))
    return loss


def rgb_loss_grad(img: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of :func:`rgb_loss` with respect to ``img``."""
    img, target = _pair(img, target)
    grad = 2.0 * (img - target) / img.size
    if cfg.perceptual is not None and cfg.lam > 0:
        if not hasattr(cfg.perceptual, "grad"):
            raise ValueError("perceptual plugin has no gradient")
        grad = grad + cfg.lam * np.asarray(cfg.perceptual.grad(img, target))
    return grad


def combine_synthetic(l_depth: float, l_rgb: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.alpha * l_depth + l_rgb


def combine_real(level_rgb: dict, l_rgb: float, cfg: LossConfig = LossConfig()) -> float:
    missing = {1, 2, 3} - set(level_rgb)
    if missing:
        raise ValueError(f"real-data loss needs level renders {sorted(missing)}")
    return sum(cfg.gamma ** (lvl - 1) * level_rgb[lvl] for lvl in (1, 2, 3)) + l_rgb


def combined_losses(cfg: LossConfig, mode: str, rendered, target, *, depth_preds=None, depth_gts=None,
                    level_renders: dict | None = None) -> float:
    """Total loss for ``mode`` in ``{"synthetic", "real"}`` from images and depth pyramids."""
    l_rgb = rgb_loss(rendered, target, cfg)
    if mode == "synthetic":
        if depth_preds is None or depth_gts is None:
            raise ValueError("synthetic loss needs predicted and ground-truth depths")
        return combine_synthetic(depth_loss(depth_preds, depth_gts, cfg.gamma), l_rgb, cfg)
    if mode == "real":
        if level_renders is None:
            raise ValueError("real-data loss needs per-level renders")
        return combine_real({lvl: rgb_loss(im, target, cfg) for lvl, im in level_renders.items()}, l_rgb, cfg)
    raise ValueError(f"unknown loss mode {mode!r}")
