"""Equirectangular geometry, camera poses and the Fibonacci lattice.

Conventions used throughout the package:

* camera frame is y-up, z-forward, x-right;
* longitude in [-pi, pi) runs left to right, latitude in [-pi/2, pi/2] bottom to top;
* continuous pixel coordinates put pixel centres on integers, so pixel ``(0, 0)``
  covers ``[-0.5, 0.5) x [-0.5, 0.5)``;
* rasters are ``(H, W, C)`` float arrays with ``W == 2 * H``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
DEFAULT_LEVELS = 4


def check_erp(img: np.ndarray) -> np.ndarray:
    """Validate an equirectangular raster and return it as ``(H, W, C)`` float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) raster, got shape {arr.shape}")
    h, w, _ = arr.shape
    if w <= 0 or w != 2 * h:
        raise ValueError(f"equirectangular raster needs W == 2H, got {w}x{h}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("raster contains non-finite samples")
    return arr


# --------------------------------------------------------------------------- poses


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as ``(w, x, y, z)``."""
    w, x, y, z = (float(c) for c in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera pose. ``rotation`` is a unit quaternion ``(w, x, y, z)``."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(rot) - 1.0) > 1e-9:
            raise ValueError(f"pose quaternion is not unit norm: {rot}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)

    @property
    def matrix(self) -> np.ndarray:
        """World-from-camera rotation matrix."""
        return quat_to_matrix(self.rotation)

    def to_world(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs) @ self.matrix.T

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points to camera-frame coordinates."""
        return (np.asarray(points) - self.position) @ self.matrix

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "quaternion": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.asarray(d["position"], float), np.asarray(d["quaternion"], float))


# ------------------------------------------------------------- pixel <-> direction


def pixel_to_dir(u, v, width: int, height: int) -> np.ndarray:
    """Unit directions of continuous ERP pixel coordinates (broadcasts)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), -0.5, height - 0.5)
    lon = 2.0 * math.pi * (u + 0.5) / width - math.pi
    lat = 0.5 * math.pi - math.pi * (v + 0.5) / height
    return lonlat_to_dir(lon, lat)


def lonlat_to_dir(lon, lat) -> np.ndarray:
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def dir_to_lonlat(d) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    lat = np.arcsin(np.clip(y, -1.0, 1.0))
    lon = np.arctan2(x, z)
    # exact poles: tie-break to the centre column
    lon = np.where((x == 0.0) & (z == 0.0), 0.0, lon)
    return lon, lat


def dir_to_pixel(d, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous ERP pixel coordinates of unit directions, ``u`` in ``[-0.5, W-0.5)``."""
    lon, lat = dir_to_lonlat(d)
    u = (lon + math.pi) * width / (2.0 * math.pi) - 0.5
    u = np.where(u >= width - 0.5, u - width, u)
    v = (0.5 * math.pi - lat) * height / math.pi - 0.5
    return u, v


def erp_directions(width: int, height: int) -> np.ndarray:
    """``(H, W, 3)`` directions of all pixel centres."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return pixel_to_dir(u, v, width, height)


# ------------------------------------------------------------------ lattice


def lattice_count(width: int) -> int:
    """Number of lattice points whose equatorial density matches a ``width``-pixel ERP."""
    if width < 2:
        raise ValueError("width must be at least 2")
    return int(math.floor(width * width / math.pi))


def pyramid_counts(width: int, levels: int = DEFAULT_LEVELS) -> list[int]:
    """Per-level lattice sizes, finest level first (level ``l`` uses width ``W / 2**l``)."""
    if levels < 1:
        raise ValueError("need at least one level")
    if width % (2 ** (levels - 1)):
        raise ValueError(f"width {width} is not divisible by 2**{levels - 1}")
    return [lattice_count(width // 2**lvl) for lvl in range(levels)]


@dataclass(frozen=True)
class FibonacciLattice:
    """Golden-ratio lattice on the unit square.

    ``points[j] = (frac(j / phi), j / (n - 1))``. The square maps to the sphere with the
    equal-area rule ``lon = 2 pi x - pi``, ``sin(lat) = 1 - 2 y`` so that the lattice is
    quasi-uniform in solid angle (``y = 0`` is the north pole).
    """

    n: int
    level: int
    points: np.ndarray

    def directions(self) -> np.ndarray:
        x, y = self.points[:, 0], self.points[:, 1]
        lon = 2.0 * math.pi * x - math.pi
        lat = np.arcsin(np.clip(1.0 - 2.0 * y, -1.0, 1.0))
        return lonlat_to_dir(lon, lat)

    def pixel_coords(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Continuous ERP pixel coordinates of the lattice points on a ``width x height`` raster."""
        x, y = self.points[:, 0], self.points[:, 1]
        lat = np.arcsin(np.clip(1.0 - 2.0 * y, -1.0, 1.0))
        u = x * width - 0.5
        v = (0.5 * math.pi - lat) * height / math.pi - 0.5
        return u, v


def fibonacci_lattice(n: int, level: int = 0) -> FibonacciLattice:
    if n < 2:
        raise ValueError("lattice needs n >= 2")
    j = np.arange(n, dtype=np.float64)
    x = np.mod(j / GOLDEN_RATIO, 1.0)
    y = j / (n - 1)
    return FibonacciLattice(n=n, level=level, points=np.stack([x, y], axis=1))


# ------------------------------------------------------------------ weights


def ws_weights(width: int, height: int) -> np.ndarray:
    """Per-pixel spherical area weights ``cos(latitude)`` as a ``(H, W, 1)`` raster."""
    if width != 2 * height:
        raise ValueError("ws_weights needs W == 2H")
    v = np.arange(height, dtype=np.float64)
    row = np.cos((v + 0.5 - height / 2.0) * math.pi / height)
    return np.repeat(row[:, None], width, axis=1)[:, :, None]


# ----------------------------------------------------------- bilinear sampling


def bilinear_taps(u, v, width: int, height: int):
    """Bilinear taps for continuous coordinates on a horizontally wrapping raster.

    Rows clamp to ``[0, H-1]``. Returns ``(y0, x0, x1, fy, fx)`` with ``y1 = y0 + 1``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, height - 1.0)
    fu = np.floor(u)
    fx = u - fu
    x0 = np.mod(fu.astype(np.int64), width)
    x1 = np.mod(x0 + 1, width)
    y0 = np.minimum(np.floor(v).astype(np.int64), max(height - 2, 0))
    fy = v - y0
    return y0, x0, x1, fy, fx


def sample_erp(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinear sample of an ``(H, W, C)`` raster at continuous pixel coordinates."""
    h, w = img.shape[:2]
    y0, x0, x1, fy, fx = bilinear_taps(u, v, w, h)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_erp_adjoint(grad: np.ndarray, u, v, height: int, width: int) -> np.ndarray:
    """Adjoint of :func:`sample_erp`: scatter ``grad`` (``(..., C)``) back onto the raster."""
    y0, x0, x1, fy, fx = bilinear_taps(u, v, width, height)
    y1 = np.minimum(y0 + 1, height - 1)
    grad = np.asarray(grad, dtype=np.float64)
    c = grad.shape[-1]
    g = grad.reshape(-1, c)
    out = np.zeros((height * width, c))
    taps = (
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    )
    for yy, xx, wgt in taps:
        idx = (yy * width + xx).ravel()
        wv = wgt.ravel()
        for ch in range(c):
            out[:, ch] += np.bincount(idx, weights=wv * g[:, ch], minlength=height * width)
    return out.reshape(height, width, c)
