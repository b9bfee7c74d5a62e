"""Tiled execution of local operators and the toy Gaussian head.

A local operator of receptive radius ``r`` maps a raster pre-padded by ``r`` to an
unpadded raster. Every operator here is written with per-element arithmetic in a
fixed order, so running it on overlapping tiles gives the same bits as running it
on the whole raster.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import FibonacciLattice, sample_erp, sample_erp_adjoint
from .memory import NULL_METER, MemoryMeter


class LocalityError(ValueError):
    """An operator touched input outside its declared radius."""


# ------------------------------------------------------------------ padding


def pre_pad(img: np.ndarray, p: int) -> np.ndarray:
    """Pad left/right by wrapping and top/bottom with zeros (corners end up zero)."""
    img = np.asarray(img, dtype=np.float64)
    if p < 0:
        raise ValueError("pad must be non-negative")
    if p == 0:
        return img.copy()
    h, w = img.shape[:2]
    if p > w:
        raise ValueError(f"pad {p} exceeds raster width {w}")
    wrapped = np.concatenate([img[:, w - p:], img, img[:, :p]], axis=1)
    zeros = np.zeros((p,) + wrapped.shape[1:])
    return np.concatenate([zeros, wrapped, zeros], axis=0)


def pre_pad_adjoint(grad: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of :func:`pre_pad`: fold wrapped columns back, drop the zero rows."""
    if p == 0:
        return grad.copy()
    g = grad[p:-p]
    w = g.shape[1] - 2 * p
    out = g[:, p:p + w].copy()
    out[:, w - p:] += g[:, :p]
    out[:, :p] += g[:, p + w:]
    return out


# ------------------------------------------------------------------ operators


@dataclass
class LocalOperator:
    """A stride-1 operator with bounded receptive field.

    ``fn(padded, theta)`` returns the output for the unpadded region;
    ``vjp(padded, theta, grad_out)`` returns ``(grad_padded, grad_theta)``.
    """

    radius: int
    c_in: int
    c_out: int
    fn: Callable
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    vjp: Callable | None = None
    name: str = "op"
    certified: bool = False

    def apply(self, padded: np.ndarray) -> np.ndarray:
        return self.fn(padded, self.theta)

    def backward(self, padded: np.ndarray, grad_out: np.ndarray):
        if self.vjp is None:
            raise NotImplementedError(f"operator {self.name} has no adjoint")
        return self.vjp(padded, self.theta, grad_out)

    def with_theta(self, theta) -> "LocalOperator":
        return LocalOperator(self.radius, self.c_in, self.c_out, self.fn, np.asarray(theta, float),
                             self.vjp, self.name, self.certified)


def apply_untiled(op: LocalOperator, img: np.ndarray) -> np.ndarray:
    return op.apply(pre_pad(img, op.radius))


def probe_radius(op: LocalOperator, height: int = 12, width: int = 24, trials: int = 4, seed: int = 0) -> int:
    """Largest Chebyshev distance (with horizontal wrap) at which a one-pixel change shows up."""
    rng = np.random.default_rng(seed)
    worst = 0
    for _ in range(trials):
        img = rng.uniform(-1.0, 1.0, (height, width, op.c_in))
        base = apply_untiled(op, img)
        y, x = int(rng.integers(height)), int(rng.integers(width))
        bumped = img.copy()
        bumped[y, x] += rng.uniform(0.5, 1.0, op.c_in)
        diff = np.any(apply_untiled(op, bumped) != base, axis=2)
        ys, xs = np.nonzero(diff)
        if len(ys):
            dx = np.abs(xs - x)
            dx = np.minimum(dx, width - dx)
            worst = max(worst, int(np.max(np.maximum(np.abs(ys - y), dx))))
    return worst


def certify(op: LocalOperator, seed: int = 0) -> LocalOperator:
    """Reject operators whose probed radius exceeds the declared one."""
    if not op.certified:
        r = probe_radius(op, seed=seed)
        if r > op.radius:
            raise LocalityError(f"operator {op.name} reaches {r} px, declared {op.radius}")
        op.certified = True
    return op


def tile_bounds(n_items: int, n_tiles: int) -> list[tuple[int, int]]:
    """Split ``n_items`` into ``n_tiles`` runs; the last run absorbs the remainder."""
    step = n_items // n_tiles
    if step == 0:
        raise ValueError(f"cannot split {n_items} pixels into {n_tiles} tiles")
    edges = [i * step for i in range(n_tiles)] + [n_items]
    return list(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class TileGrid:
    n: int
    rows: tuple
    cols: tuple
    pad: int

    @classmethod
    def make(cls, height: int, width: int, n: int, pad: int) -> "TileGrid":
        rows, cols = tile_bounds(height, n), tile_bounds(width, n)
        side = min(min(b - a for a, b in rows), min(b - a for a, b in cols))
        if pad > side:
            raise ValueError(f"operator radius {pad} exceeds the smallest tile side {side}")
        return cls(n, tuple(rows), tuple(cols), pad)

    def __iter__(self):
        for y0, y1 in self.rows:
            for x0, x1 in self.cols:
                yield y0, y1, x0, x1


def run_tiled(op: LocalOperator, img: np.ndarray, n: int, meter: MemoryMeter = NULL_METER) -> np.ndarray:
    """Run ``op`` on an ``n x n`` grid of pre-padded tiles and stitch the crops."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    r = op.radius
    grid = TileGrid.make(h, w, n, r)
    padded = pre_pad(img, r)
    out = np.zeros((h, w, op.c_out))
    for y0, y1, x0, x1 in grid:
        tile = padded[y0:y1 + 2 * r, x0:x1 + 2 * r]
        with meter.scoped("tile/in", tile):
            out[y0:y1, x0:x1] = op.apply(tile)
    return out


def box_blur() -> LocalOperator:
    """3x3 mean filter on one channel, radius 1."""

    def fn(padded, theta):
        h, w = padded.shape[0] - 2, padded.shape[1] - 2
        acc = np.zeros((h, w, padded.shape[2]))
        for dy in range(3):
            for dx in range(3):
                acc = acc + padded[dy:dy + h, dx:dx + w]
        return acc / 9.0

    return LocalOperator(1, 1, 1, fn, name="box_blur")


# ------------------------------------------------------------------ toy head


@dataclass(frozen=True)
class HeadShape:
    """Channel layout of the three-stage 3x3 head."""

    c_in: int = 7
    hidden: int = 8
    c_out: int = 4

    def sizes(self) -> list[tuple[str, tuple]]:
        c, h, o = self.c_in, self.hidden, self.c_out
        return [("w1", (3, 3, c, h)), ("b1", (h,)), ("w2", (3, 3, h, h)), ("b2", (h,)),
                ("w3", (3, 3, h, o)), ("b3", (o,))]

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.sizes()))

    def unpack(self, theta: np.ndarray) -> dict:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"head expects {self.n_params} parameters, got {theta.size}")
        out, k = {}, 0
        for name, shape in self.sizes():
            m = int(np.prod(shape))
            out[name] = theta[k:k + m].reshape(shape)
            k += m
        return out

    def init(self, seed: int = 0, gain: float = 1.0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in self.sizes():
            if name.startswith("w"):
                fan_in = 9 * shape[2]
                parts.append(rng.normal(0.0, gain / np.sqrt(fan_in), shape).ravel())
            else:
                parts.append(rng.normal(0.0, 0.1, shape))
        return np.concatenate(parts)

    def identity(self) -> np.ndarray:
        """Centre-tap identity kernels; needs ``c_in == hidden == c_out``."""
        if not self.c_in == self.hidden == self.c_out:
            raise ValueError("identity head needs equal channel counts")
        eye = np.eye(self.c_in)
        parts = []
        for name, shape in self.sizes():
            arr = np.zeros(shape)
            if name.startswith("w"):
                arr[1, 1] = eye
            parts.append(arr.ravel())
        return np.concatenate(parts)


def conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid 3x3 cross-correlation; every output sums taps then input channels in a fixed order."""
    h, wd = x.shape[0] - 2, x.shape[1] - 2
    out = np.broadcast_to(b, (h, wd, w.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            for i in range(x.shape[2]):
                out += x[dy:dy + h, dx:dx + wd, i:i + 1] * w[dy, dx, i]
    return out


def conv3_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    h, wd = g.shape[:2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    g2 = g.reshape(-1, g.shape[2])
    for dy in range(3):
        for dx in range(3):
            xs = x[dy:dy + h, dx:dx + wd]
            gw[dy, dx] = xs.reshape(-1, x.shape[2]).T @ g2
            gx[dy:dy + h, dx:dx + wd] += g @ w[dy, dx].T
    return gx, gw, g2.sum(axis=0)


def head_forward(padded: np.ndarray, theta: np.ndarray, shape: HeadShape):
    """Three 3x3 stages with tanh between them. Returns ``(out, tape)``."""
    p = shape.unpack(theta)
    a1 = np.tanh(conv3(padded, p["w1"], p["b1"]))
    a2 = np.tanh(conv3(a1, p["w2"], p["b2"]))
    out = conv3(a2, p["w3"], p["b3"])
    return out, (a1, a2)


def head_backward(padded: np.ndarray, theta: np.ndarray, shape: HeadShape, grad_out: np.ndarray, tape=None):
    """Gradients ``(grad_padded, grad_theta)``; recomputes the forward if no tape is given."""
    p = shape.unpack(theta)
    if tape is None:
        tape = head_forward(padded, theta, shape)[1]
    a1, a2 = tape
    g2, gw3, gb3 = conv3_backward(a2, p["w3"], grad_out)
    g2 = g2 * (1.0 - a2 * a2)
    g1, gw2, gb2 = conv3_backward(a1, p["w2"], g2)
    g1 = g1 * (1.0 - a1 * a1)
    gx, gw1, gb1 = conv3_backward(padded, p["w1"], g1)
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return gx, np.concatenate([grads[name].ravel() for name, _ in shape.sizes()])


def toy_head(theta: np.ndarray | None = None, shape: HeadShape = HeadShape(), seed: int = 0) -> LocalOperator:
    """The deterministic radius-3 head used in place of a learned CNN."""
    if theta is None:
        theta = shape.init(seed)
    shape.unpack(theta)  # size check

    def fn(padded, th):
        return head_forward(padded, th, shape)[0]

    def vjp(padded, th, grad_out):
        return head_backward(padded, th, shape, grad_out)

    op = LocalOperator(3, shape.c_in, shape.c_out, fn, np.asarray(theta, float), vjp, name="toy_head")
    op.shape = shape
    return op


# ------------------------------------------------------------------ lattice features


def lattice_sample_coords(lattice: FibonacciLattice, height: int, width: int):
    return lattice.pixel_coords(width, height)


def sample_lattice_features(raster: np.ndarray, lattice: FibonacciLattice) -> np.ndarray:
    """Bilinear feature vector at each lattice point, ``(n, C)``."""
    h, w = raster.shape[:2]
    u, v = lattice_sample_coords(lattice, h, w)
    return sample_erp(raster, u, v)


def sample_lattice_adjoint(grad: np.ndarray, lattice: FibonacciLattice, height: int, width: int) -> np.ndarray:
    u, v = lattice_sample_coords(lattice, height, width)
    return sample_erp_adjoint(grad, u, v, height, width)


# ------------------------------------------------------------------ residual chain


def _upsample_coords(height: int, width: int):
    v, u = np.meshgrid(np.arange(2 * height, dtype=np.float64), np.arange(2 * width, dtype=np.float64), indexing="ij")
    return (u + 0.5) / 2.0 - 0.5, (v + 0.5) / 2.0 - 0.5


def upsample2x(raster: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling with horizontal wrap and clamped rows."""
    h, w = raster.shape[:2]
    u, v = _upsample_coords(h, w)
    return sample_erp(raster, u, v)


def upsample2x_adjoint(grad: np.ndarray) -> np.ndarray:
    h, w = grad.shape[0] // 2, grad.shape[1] // 2
    u, v = _upsample_coords(h, w)
    return sample_erp_adjoint(grad, u, v, h, w)


def residual_chain(coarse: np.ndarray | None, fine_inputs: np.ndarray, head: LocalOperator, n_tiles: int = 1) -> np.ndarray:
    """``head(fine_inputs ++ up(coarse)) + up(coarse)``; a missing coarse level counts as zeros."""
    h, w = fine_inputs.shape[:2]
    if coarse is None:
        up = np.zeros((h, w, head.c_out))
    else:
        if coarse.shape[0] * 2 != h or coarse.shape[1] * 2 != w:
            raise ValueError(f"coarse raster {coarse.shape[:2]} is not half of {(h, w)}")
        up = upsample2x(coarse)
    x = np.concatenate([fine_inputs, up], axis=2)
    if x.shape[2] != head.c_in:
        raise ValueError(f"head expects {head.c_in} channels, got {x.shape[2]}")
    out = run_tiled(head, x, n_tiles) if n_tiles > 1 else apply_untiled(head, x)
    return out + up
