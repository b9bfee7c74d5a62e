"""Spherical Gaussian pyramid: parameter decoding, SH colour and consolidation.

Every decoding step has a hand-written adjoint so the deferred backward pass can
push per-Gaussian gradients back to the raw head outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, FibonacciLattice, fibonacci_lattice, pyramid_counts

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def sh_coeff_count(sh_degree: int) -> int:
    if sh_degree not in (0, 1):
        raise ValueError("only SH degrees 0 and 1 are supported")
    return (sh_degree + 1) ** 2


@dataclass
class GaussianSet:
    """Flat struct-of-arrays Gaussian container (world frame)."""

    means: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,)
    scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) (w, x, y, z)
    sh: np.ndarray  # (N, K, 3)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh.reshape(n, -1, 3) if sh.ndim != 3 else sh.reshape(n, sh.shape[1], 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays())

    def arrays(self):
        return (self.means, self.opacity, self.scales, self.quats, self.sh)

    def covariances(self) -> np.ndarray:
        rot = quats_to_matrices(self.quats)
        return np.einsum("nij,nj,nkj->nik", rot, self.scales**2, rot)

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(*(a[idx] for a in self.arrays()))

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianSet":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, k, 3)))

    @classmethod
    def zeros_like(cls, other: "GaussianSet") -> "GaussianSet":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    @classmethod
    def concat(cls, sets) -> "GaussianSet":
        sets = list(sets)
        return cls(*(np.concatenate(parts) for parts in zip(*(s.arrays() for s in sets))))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "GaussianSet":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size]).reshape(a.shape))
            pos += a.size
        return GaussianSet(*out)


# ------------------------------------------------------------------ quaternions


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of ``(N, 4)`` quaternions via the unit-quaternion formula."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def quats_to_matrices_backward(q: np.ndarray, grad_rot: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`quats_to_matrices`."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_rot
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=-1)


# ------------------------------------------------------------------ SH colour


def sh_eval(sh: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """RGB from ``(N, K, 3)`` SH coefficients and unit view directions ``(N, 3)``.

    Degree 0 returns ``C0 * dc + 0.5``.
    """
    sh = np.asarray(sh, dtype=np.float64)
    rgb = SH_C0 * sh[:, 0] + 0.5
    if sh.shape[1] > 1:
        d = np.asarray(view_dirs, dtype=np.float64)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        rgb = rgb - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    return rgb


def sh_eval_backward(sh: np.ndarray, view_dirs: np.ndarray, grad_rgb: np.ndarray):
    """Returns ``(grad_sh, grad_view_dirs)``."""
    g_sh = np.zeros_like(sh)
    g_sh[:, 0] = SH_C0 * grad_rgb
    g_dir = np.zeros((len(sh), 3))
    if sh.shape[1] > 1:
        d = view_dirs
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        g_sh[:, 1] = -SH_C1 * y * grad_rgb
        g_sh[:, 2] = SH_C1 * z * grad_rgb
        g_sh[:, 3] = -SH_C1 * x * grad_rgb
        g_dir[:, 0] = -SH_C1 * np.sum(sh[:, 3] * grad_rgb, axis=1)
        g_dir[:, 1] = -SH_C1 * np.sum(sh[:, 1] * grad_rgb, axis=1)
        g_dir[:, 2] = SH_C1 * np.sum(sh[:, 2] * grad_rgb, axis=1)
    return g_sh, g_dir


# ------------------------------------------------------------------ decoding


@dataclass(frozen=True)
class DecodeConfig:
    width: int  # level-0 panorama width the lattice densities refer to
    inv_depths: tuple  # depth candidates of the head, in inverse depth
    s_min: float = 0.5
    s_max: float = 15.0
    sh_degree: int = 0

    @property
    def n_candidates(self) -> int:
        return len(self.inv_depths)

    @property
    def raw_size(self) -> int:
        return self.n_candidates + 1 + 3 + 4 + 3 * sh_coeff_count(self.sh_degree)

    def slices(self):
        k = self.n_candidates
        return {
            "logits": slice(0, k),
            "opacity": slice(k, k + 1),
            "scale": slice(k + 1, k + 4),
            "quat": slice(k + 4, k + 8),
            "sh": slice(k + 8, self.raw_size),
        }


def pixel_world_size(level: int, depth, width: int):
    """World extent of one equatorial pixel of the level-``level`` raster at ``depth``."""
    return (2.0 * math.pi / (width / 2**level)) * np.asarray(depth, dtype=np.float64)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    s = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_depth(scores: np.ndarray, inv_depths: np.ndarray, axis: int = -1) -> np.ndarray:
    """Depth from candidate scores: softmax-weighted mean inverse depth, then inverted."""
    w = softmax(np.asarray(scores, dtype=np.float64), axis=axis)
    inv = np.sum(w * inv_depths, axis=axis)
    return 1.0 / inv


def softmax_depth_backward(scores, inv_depths, grad_depth, axis: int = -1):
    w = softmax(np.asarray(scores, dtype=np.float64), axis=axis)
    inv = np.sum(w * inv_depths, axis=axis, keepdims=True)
    g_inv = -np.expand_dims(grad_depth, axis) / inv**2
    return w * (inv_depths - inv) * g_inv


def decode_gaussians(raw: np.ndarray, dirs_cam: np.ndarray, level: int, pose: CameraPose, cfg: DecodeConfig) -> GaussianSet:
    """Decode ``(N, raw_size)`` head outputs for lattice directions ``dirs_cam`` (camera frame)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != cfg.raw_size:
        raise ValueError(f"raw head output must be (N, {cfg.raw_size}), got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw head output contains non-finite values")
    sl = cfg.slices()
    inv = np.asarray(cfg.inv_depths, dtype=np.float64)
    depth = softmax_depth(raw[:, sl["logits"]], inv)
    world_dirs = pose.to_world(dirs_cam)
    means = pose.position + depth[:, None] * world_dirs
    opacity = sigmoid(raw[:, sl["opacity"]][:, 0])
    unit = cfg.s_min + sigmoid(raw[:, sl["scale"]]) * (cfg.s_max - cfg.s_min)
    scales = unit * pixel_world_size(level, depth, cfg.width)[:, None]
    rq = raw[:, sl["quat"]]
    quats = rq / np.linalg.norm(rq, axis=1, keepdims=True)
    sh = raw[:, sl["sh"]].reshape(len(raw), -1, 3)
    return GaussianSet(means, opacity, scales, quats, sh)


def decode_gaussians_backward(raw, dirs_cam, level, pose: CameraPose, cfg: DecodeConfig, grads: GaussianSet) -> np.ndarray:
    """Adjoint of :func:`decode_gaussians`; returns the gradient w.r.t. ``raw``."""
    raw = np.asarray(raw, dtype=np.float64)
    sl = cfg.slices()
    inv = np.asarray(cfg.inv_depths, dtype=np.float64)
    logits = raw[:, sl["logits"]]
    depth = softmax_depth(logits, inv)
    world_dirs = pose.to_world(dirs_cam)
    out = np.zeros_like(raw)

    g_depth = np.sum(grads.means * world_dirs, axis=1)
    sig_s = sigmoid(raw[:, sl["scale"]])
    unit = cfg.s_min + sig_s * (cfg.s_max - cfg.s_min)
    px = pixel_world_size(level, 1.0, cfg.width)
    g_depth += np.sum(grads.scales * unit, axis=1) * px
    out[:, sl["scale"]] = grads.scales * (px * depth)[:, None] * (cfg.s_max - cfg.s_min) * sig_s * (1.0 - sig_s)
    out[:, sl["logits"]] = softmax_depth_backward(logits, inv, g_depth)

    a = sigmoid(raw[:, sl["opacity"]][:, 0])
    out[:, sl["opacity"]] = (grads.opacity * a * (1.0 - a))[:, None]

    rq = raw[:, sl["quat"]]
    nrm = np.linalg.norm(rq, axis=1, keepdims=True)
    qn = rq / nrm
    gq = grads.quats
    out[:, sl["quat"]] = (gq - qn * np.sum(gq * qn, axis=1, keepdims=True)) / nrm
    out[:, sl["sh"]] = grads.sh.reshape(len(raw), -1)
    return out


# ------------------------------------------------------------------ pyramid


@dataclass
class GaussianPyramid:
    """Per-view Gaussians, finest level (``l = 0``) first."""

    levels: list  # list[GaussianSet]
    lattices: list  # list[FibonacciLattice]
    width: int
    view: int = 0
    pose: CameraPose = field(default_factory=CameraPose)

    @property
    def counts(self) -> list[int]:
        return [len(g) for g in self.levels]

    def __len__(self) -> int:
        return sum(self.counts)


def lattice_pyramid(width: int, levels: int) -> list[FibonacciLattice]:
    return [fibonacci_lattice(n, level=l) for l, n in enumerate(pyramid_counts(width, levels))]


def build_pyramid(raw_levels, pose: CameraPose, cfg: DecodeConfig, levels: int | None = None, view: int = 0) -> GaussianPyramid:
    """Decode one view's per-level raw head outputs into a pyramid."""
    levels = len(raw_levels) if levels is None else levels
    if len(raw_levels) != levels:
        raise ValueError(f"expected {levels} raw levels, got {len(raw_levels)}")
    lattices = lattice_pyramid(cfg.width, levels)
    sets = []
    for lvl, (raw, lat) in enumerate(zip(raw_levels, lattices)):
        if len(raw) != lat.n:
            raise ValueError(f"level {lvl}: expected {lat.n} raw vectors, got {len(raw)}")
        sets.append(decode_gaussians(raw, lat.directions(), lvl, pose, cfg))
    return GaussianPyramid(sets, lattices, cfg.width, view, pose)


def consolidate(pyramids) -> GaussianSet:
    """Concatenate pyramids: view-major, then coarse-to-fine levels, then lattice order."""
    pyramids = sorted(pyramids, key=lambda p: p.view)
    if not pyramids:
        raise ValueError("nothing to consolidate")
    parts = [lvl for p in pyramids for lvl in reversed(p.levels)]
    return GaussianSet.concat(parts)
