"""Two-step deferred backpropagation through head, decoder and renderer.

The end-to-end model per input view is a residual chain of toy heads over an
image pyramid (coarse to fine). Lattice features are sampled from each level,
mapped to raw Gaussian parameters by a linear layer and decoded; all views and
levels are consolidated and rendered at a target pose.

Three gradient schedules produce the same parameter gradients:

* ``monolithic`` keeps every intermediate (head tapes at full resolution and all
  face tapes) and runs one backward pass;
* ``one-step`` runs the head without tapes, renders with all six face tapes,
  then re-generates the head tile by tile;
* ``two-step`` additionally re-renders the panorama face by face, so only one
  face tape is alive at a time.

Memory is measured with :class:`~panosplat.memory.MemoryMeter`, which counts the
bytes of every buffer these routines keep alive.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .costvolume import downsample
from .cubemap import FACE_KEYS
from .gaussians import (SH_C0, DecodeConfig, GaussianSet, consolidate, decode_gaussians, decode_gaussians_backward,
                        GaussianPyramid, lattice_pyramid)
from .geometry import CameraPose, bilinear_taps, sample_erp
from .memory import NULL_METER, MemoryMeter
from .metrics import LossConfig, rgb_loss, rgb_loss_grad
from .render import (RenderConfig, color_backward, face_backward, gaussian_colors, render_backward, render_face,
                     render_pano, stitch_plan)
from .tiling import (HeadShape, TileGrid, head_backward, head_forward, pre_pad, pre_pad_adjoint,
                     sample_lattice_adjoint, sample_lattice_features, upsample2x, upsample2x_adjoint)

MODES = ("monolithic", "one-step", "two-step")
IMG_CHANNELS = 3


@dataclass(frozen=True)
class PipelineSpec:
    """Sizes of the head, geometry and render stages.

    ``head_width`` is the level-0 width of the head rasters; ``geo_width`` sets the
    lattice densities (the geometry-stage resolution) and may be smaller.
    """

    head_width: int = 64
    geo_width: int = 32
    levels: int = 2
    render: RenderConfig = field(default_factory=lambda: RenderConfig(64, 32, 32))
    tiles: int = 2
    features: int = 4
    hidden: int = 8
    inv_depths: tuple = (0.25, 0.5, 0.75)
    loss: LossConfig = field(default_factory=LossConfig)
    sh_degree: int = 0

    def __post_init__(self):
        if self.head_width % (2 ** self.levels):
            raise ValueError(f"head width {self.head_width} must be divisible by 2**{self.levels}")
        if self.geo_width % (2 ** (self.levels - 1)):
            raise ValueError(f"geometry width {self.geo_width} must be divisible by 2**{self.levels - 1}")

    @property
    def head_shape(self) -> HeadShape:
        return HeadShape(IMG_CHANNELS + self.features, self.hidden, self.features)

    @property
    def decode(self) -> DecodeConfig:
        return DecodeConfig(self.geo_width, tuple(self.inv_depths), sh_degree=self.sh_degree)

    def level_dims(self, level: int) -> tuple[int, int]:
        w = self.head_width // 2**level
        return w // 2, w

    @property
    def radius(self) -> int:
        return 3


# ------------------------------------------------------------------ parameters


@dataclass(frozen=True)
class ParamLayout:
    """Flat parameter vector: for each level, head weights then the linear layer."""

    spec: PipelineSpec

    @property
    def head_size(self) -> int:
        return self.spec.head_shape.n_params

    @property
    def lin_size(self) -> int:
        return (self.spec.features + 1) * self.spec.decode.raw_size

    @property
    def level_size(self) -> int:
        return self.head_size + self.lin_size

    @property
    def size(self) -> int:
        return self.level_size * self.spec.levels

    def head(self, theta: np.ndarray, level: int) -> np.ndarray:
        k = level * self.level_size
        return theta[k:k + self.head_size]

    def linear(self, theta: np.ndarray, level: int):
        """``(W (features, raw), b (raw,))`` of one level."""
        k = level * self.level_size + self.head_size
        raw = self.spec.decode.raw_size
        flat = theta[k:k + self.lin_size]
        return flat[:self.spec.features * raw].reshape(self.spec.features, raw), flat[self.spec.features * raw:]

    def pack_level(self, level: int, g_head, g_w, g_b, out: np.ndarray) -> None:
        """Add one level's gradients into ``out``; scalar zeros skip a block."""
        k = level * self.level_size
        raw = self.spec.decode.raw_size
        if np.ndim(g_head):
            out[k:k + self.head_size] += g_head
        k += self.head_size
        if np.ndim(g_w):
            out[k:k + self.spec.features * raw] += g_w.ravel()
        if np.ndim(g_b):
            out[k + self.spec.features * raw:k + self.lin_size] += g_b


def init_theta(spec: PipelineSpec, seed: int = 0) -> np.ndarray:
    """Seeded parameters; linear biases start at mid opacity, small scale and identity rotation."""
    rng = np.random.default_rng(seed)
    layout = ParamLayout(spec)
    sl = spec.decode.slices()
    parts = []
    for lvl in range(spec.levels):
        parts.append(spec.head_shape.init(int(rng.integers(2**31))))
        w = rng.normal(0.0, 0.5 / np.sqrt(spec.features), (spec.features, spec.decode.raw_size))
        b = np.zeros(spec.decode.raw_size)
        w[:, sl["scale"]] *= 0.2
        b[sl["scale"]] = -4.0
        b[sl["quat"].start] = 1.0
        parts.append(np.concatenate([w.ravel(), b]))
    theta = np.concatenate(parts)
    assert theta.size == layout.size
    return theta


# ------------------------------------------------------------------ inputs


@dataclass
class ViewInput:
    image: np.ndarray  # (H, W, 3) at head resolution
    pose: CameraPose
    priors: list | None = None  # per level fixed offsets added to the raw head output, (n_l, K) or (n_l, raw)


@dataclass
class PipelineInputs:
    views: list  # list[ViewInput]
    target_pose: CameraPose
    target: np.ndarray  # (H_r, W_r, 3)


def random_inputs(spec: PipelineSpec, seed: int = 0, n_views: int = 2) -> PipelineInputs:
    """Smooth random images, nearby poses and a random target (for tests and benchmarks)."""
    rng = np.random.default_rng(seed)
    h, w = spec.level_dims(0)
    views = []
    for v in range(n_views):
        coarse = rng.uniform(0.0, 1.0, (max(h // 8, 1), max(w // 8, 2), 3))
        img = np.repeat(np.repeat(coarse, h // coarse.shape[0], axis=0), w // coarse.shape[1], axis=1)
        img = 0.5 * img + 0.5 * rng.uniform(0.0, 1.0, (h, w, 3))
        pos = np.array([0.3 * v - 0.15, 0.0, 0.0]) + rng.normal(0.0, 0.02, 3)
        views.append(ViewInput(img, CameraPose(pos)))
    target = rng.uniform(0.0, 1.0, (spec.render.height, spec.render.width, 3))
    return PipelineInputs(views, CameraPose(rng.normal(0.0, 0.05, 3)), target)


# ------------------------------------------------------------------ shared pieces


def _image_pyramid(spec: PipelineSpec, view: ViewInput, meter: MemoryMeter, tag: str) -> list:
    h, w = spec.level_dims(0)
    if view.image.shape != (h, w, IMG_CHANNELS):
        raise ValueError(f"view image must be {(h, w, IMG_CHANNELS)}, got {view.image.shape}")
    imgs = [np.asarray(view.image, dtype=np.float64)]
    for lvl in range(1, spec.levels):
        imgs.append(downsample(imgs[0], 2**lvl))
        meter.hold(f"{tag}img/{lvl}", imgs[-1])
    return imgs


def _prior(view: ViewInput, level: int, n: int, raw_size: int, k: int) -> np.ndarray:
    """Fixed ``(n, raw_size)`` offset; a ``(n, K)`` prior only shifts the depth logits."""
    out = np.zeros((n, raw_size))
    if view.priors is None:
        return out
    p = np.asarray(view.priors[level], dtype=np.float64)
    if p.shape == (n, k):
        out[:, :k] = p
    elif p.shape == (n, raw_size):
        out[:] = p
    else:
        raise ValueError(f"level {level} prior must be {(n, k)} or {(n, raw_size)}, got {p.shape}")
    return out


def _raw(feat: np.ndarray, w: np.ndarray, b: np.ndarray, prior: np.ndarray) -> np.ndarray:
    return feat @ w + b + prior


def prior_offsets(spec: PipelineSpec, image: np.ndarray, depth: np.ndarray, sharpness: float = 8.0,
                  opacity=(3.0, -3.0, -5.0, -6.0), scale: float = -3.0) -> list:
    """Per-level raw offsets from an image and a depth map.

    Depth logits peak at the candidate nearest the sampled inverse depth, the SH DC term
    reproduces the sampled colour and level ``l`` gets opacity logit ``opacity[l]``
    (the last entry repeats), so the finest level dominates. ``scale`` shifts the scale
    logits towards the smallest footprint.
    """
    cfg = spec.decode
    sl = cfg.slices()
    inv = np.asarray(cfg.inv_depths, dtype=np.float64)
    step = np.min(np.diff(inv)) if len(inv) > 1 else 1.0
    out = []
    for lat in lattice_pyramid(spec.geo_width, spec.levels):
        off = np.zeros((lat.n, cfg.raw_size))
        d = sample_lattice_features(np.asarray(depth, dtype=np.float64)[..., None], lat)[:, 0]
        rgb = sample_lattice_features(np.asarray(image, dtype=np.float64), lat)
        off[:, sl["logits"]] = -0.5 * sharpness * ((1.0 / np.maximum(d, 1e-6))[:, None] - inv[None, :]) ** 2 / step**2
        off[:, sl["opacity"]] = opacity[min(lat.level, len(opacity) - 1)]
        off[:, sl["scale"]] = scale
        off[:, sl["sh"].start:sl["sh"].start + 3] = (rgb - 0.5) / SH_C0
        out.append(off)
    return out


def _level_order(spec: PipelineSpec, n_views: int):
    """``(view, level) -> slice`` into the consolidated Gaussian set."""
    counts = [lat.n for lat in lattice_pyramid(spec.geo_width, spec.levels)]
    out, k = {}, 0
    for v in range(n_views):
        for lvl in reversed(range(spec.levels)):
            out[(v, lvl)] = slice(k, k + counts[lvl])
            k += counts[lvl]
    return out


def _decode_view(spec, view, vidx, feats, theta, layout, lattices, meter, tag) -> GaussianPyramid:
    k = spec.decode.n_candidates
    sets = []
    for lvl in range(spec.levels):
        w, b = layout.linear(theta, lvl)
        raw = _raw(feats[lvl], w, b, _prior(view, lvl, lattices[lvl].n, spec.decode.raw_size, k))
        g = decode_gaussians(raw, lattices[lvl].directions(), lvl, view.pose, spec.decode)
        meter.hold(f"{tag}gauss/{lvl}", g)
        sets.append(g)
    return GaussianPyramid(sets, lattices, spec.geo_width, vidx, view.pose)


def cache_image_grad(rendered: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of the image loss with respect to the rendered panorama."""
    if rendered.shape != target.shape:
        raise ValueError(f"rendered {rendered.shape} and target {target.shape} differ")
    return rgb_loss_grad(rendered, target, cfg)


# ------------------------------------------------------------------ monolithic


@dataclass
class _TapedLevel:
    padded: np.ndarray
    tape: tuple
    up: np.ndarray | None
    feat: np.ndarray
    raw: np.ndarray


def _forward_taped(spec, inputs, theta, meter):
    layout = ParamLayout(spec)
    lattices = lattice_pyramid(spec.geo_width, spec.levels)
    r = spec.radius
    k = spec.decode.n_candidates
    state, pyramids = [], []
    for v, view in enumerate(inputs.views):
        tag = f"mono/{v}/"
        imgs = _image_pyramid(spec, view, meter, tag)
        levels = [None] * spec.levels
        coarse = None
        for lvl in reversed(range(spec.levels)):
            h, w = spec.level_dims(lvl)
            up = np.zeros((h, w, spec.features)) if coarse is None else upsample2x(coarse)
            padded = pre_pad(np.concatenate([imgs[lvl], up], axis=2), r)
            out, tape = head_forward(padded, layout.head(theta, lvl), spec.head_shape)
            fmap = out + up
            feat = sample_lattice_features(fmap, lattices[lvl])
            wl, bl = layout.linear(theta, lvl)
            raw = _raw(feat, wl, bl, _prior(view, lvl, lattices[lvl].n, spec.decode.raw_size, k))
            meter.hold(f"{tag}{lvl}/tape", padded, tape, up, fmap, feat, raw)
            levels[lvl] = _TapedLevel(padded, tape, None if coarse is None else up, feat, raw)
            coarse = fmap
        state.append(levels)
        sets = []
        for lvl in range(spec.levels):
            g = decode_gaussians(levels[lvl].raw, lattices[lvl].directions(), lvl, view.pose, spec.decode)
            meter.hold(f"{tag}gauss/{lvl}", g)
            sets.append(g)
        pyramids.append(GaussianPyramid(sets, lattices, spec.geo_width, v, view.pose))
    gs = consolidate(pyramids)
    meter.hold("mono/gs", gs)
    res = render_pano(gs, inputs.target_pose, spec.render, keep_tape=True, meter=meter, tag="mono/render/")
    return res, gs, state, lattices


def _head_backward_full(spec, inputs, theta, state, lattices, grads_gs, meter) -> np.ndarray:
    layout = ParamLayout(spec)
    order = _level_order(spec, len(inputs.views))
    g_theta = np.zeros(layout.size)
    r = spec.radius
    for v, view in enumerate(inputs.views):
        g_f_up = None  # gradient flowing into the current level's feature map from the finer level
        for lvl in range(spec.levels):
            st = state[v][lvl]
            h, w = spec.level_dims(lvl)
            sub = grads_gs.subset(order[(v, lvl)])
            d_raw = decode_gaussians_backward(st.raw, lattices[lvl].directions(), lvl, view.pose, spec.decode, sub)
            wl, _ = layout.linear(theta, lvl)
            g_w = st.feat.T @ d_raw
            g_b = d_raw.sum(axis=0)
            g_fmap = sample_lattice_adjoint(d_raw @ wl.T, lattices[lvl], h, w)
            if g_f_up is not None:
                g_fmap = g_fmap + g_f_up
            meter.hold(f"mono/{v}/{lvl}/grad", g_fmap)
            g_pad, g_head = head_backward(st.padded, layout.head(theta, lvl), spec.head_shape, g_fmap, st.tape)
            layout.pack_level(lvl, g_head, g_w, g_b, g_theta)
            if lvl + 1 < spec.levels:
                g_in = pre_pad_adjoint(g_pad, r)
                g_f_up = upsample2x_adjoint(g_in[..., IMG_CHANNELS:] + g_fmap)
            meter.release(f"mono/{v}/{lvl}/grad")
    return g_theta


def monolithic_grads(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray,
                     meter: MemoryMeter = NULL_METER) -> "GradientLedger":
    """Reference gradients with every intermediate kept alive."""
    res, gs, state, lattices = _forward_taped(spec, inputs, theta, meter)
    grad_img = cache_image_grad(res.image, inputs.target, spec.loss)
    meter.hold("mono/grad_image", grad_img)
    grads_gs = render_backward(res.tape, grad_img, gs)
    meter.hold("mono/grads_gs", grads_gs)
    g_theta = _head_backward_full(spec, inputs, theta, state, lattices, grads_gs, meter)
    meter.release_prefix("mono/")
    loss = rgb_loss(res.image, inputs.target, spec.loss)
    return GradientLedger(grads_gs, g_theta, grad_img, loss, meter.peak, meter.current, res.image)


# ------------------------------------------------------------------ deferred


@dataclass
class ForwardCache:
    """What the deferred schedule keeps from the gradient-free forward pass."""

    coarse_maps: list  # per view: dict level -> feature map, for levels >= 1
    gs: GaussianSet
    image: np.ndarray
    lattices: list


@dataclass
class GradientLedger:
    grads_gaussians: GaussianSet
    grads_theta: np.ndarray
    grad_image_cache: np.ndarray
    loss: float
    peak_live_bytes: int
    current_live_bytes: int
    image: np.ndarray | None = None


def _upsample_region(coarse: np.ndarray | None, rows: np.ndarray, cols: np.ndarray, features: int) -> np.ndarray:
    """``upsample2x(coarse)[rows][:, cols]`` without building the full raster."""
    if coarse is None:
        return np.zeros((len(rows), len(cols), features))
    v, u = np.meshgrid((rows + 0.5) / 2.0 - 0.5, (cols + 0.5) / 2.0 - 0.5, indexing="ij")
    return sample_erp(coarse, u, v)


def _tile_input(img: np.ndarray, coarse: np.ndarray | None, y0: int, y1: int, x0: int, x1: int, r: int,
                features: int):
    """Pre-padded head input for output rows ``[y0, y1)`` and columns ``[x0, x1)``.

    Identical to slicing ``pre_pad(img ++ upsample2x(coarse), r)``: columns wrap and rows
    outside the raster are zero. Returns ``(x, rows, cols, valid)``.
    """
    h, w = img.shape[:2]
    rows = np.arange(y0 - r, y1 + r)
    cols = np.arange(x0 - r, x1 + r) % w
    valid = (rows >= 0) & (rows < h)
    rc = np.clip(rows, 0, h - 1)
    x = np.concatenate([img[rc][:, cols], _upsample_region(coarse, rc, cols, features)], axis=2)
    x[~valid] = 0.0
    return x, rows, cols, valid


def _head_tiled(spec, img: np.ndarray, coarse: np.ndarray | None, theta_head: np.ndarray,
                meter: MemoryMeter, tag: str) -> np.ndarray:
    """Gradient-free residual level ``head(img ++ up) + up``, tile by tile.

    Bit-identical to the untiled taped forward.
    """
    r = spec.radius
    h, w = img.shape[:2]
    fmap = np.zeros((h, w, spec.features))
    meter.hold(f"{tag}fmap", fmap)
    for y0, y1, x0, x1 in TileGrid.make(h, w, spec.tiles, r):
        x, _, _, _ = _tile_input(img, coarse, y0, y1, x0, x1, r, spec.features)
        out, tape = head_forward(x, theta_head, spec.head_shape)
        meter.hold(f"{tag}tile", x, out, tape)
        fmap[y0:y1, x0:x1] = out + x[r:-r, r:-r, IMG_CHANNELS:]
        meter.release(f"{tag}tile")
    meter.release(f"{tag}fmap")
    return fmap


def forward_nograd(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray,
                   meter: MemoryMeter = NULL_METER, keep_cache: bool = False, render: bool = True):
    """Head, decode and render without retaining any tape.

    Returns the rendered panorama, or ``(image, ForwardCache)`` with ``keep_cache``.
    With ``render=False`` the image is ``None`` (the caller renders with a tape).
    """
    layout = ParamLayout(spec)
    lattices = lattice_pyramid(spec.geo_width, spec.levels)
    coarse_maps, pyramids = [], []
    for v, view in enumerate(inputs.views):
        tag = f"fwd/{v}/"
        imgs = _image_pyramid(spec, view, meter, tag)
        maps, feats = {}, [None] * spec.levels
        coarse = None
        for lvl in reversed(range(spec.levels)):
            fmap = _head_tiled(spec, imgs[lvl], coarse, layout.head(theta, lvl), meter, f"{tag}{lvl}/")
            meter.hold(f"{tag}map/{lvl}", fmap)
            feats[lvl] = sample_lattice_features(fmap, lattices[lvl])
            meter.hold(f"{tag}feat/{lvl}", feats[lvl])
            if lvl + 1 < spec.levels and not keep_cache:
                meter.release(f"{tag}map/{lvl + 1}")
            if lvl >= 1:
                maps[lvl] = fmap
            coarse = fmap
        meter.release(f"{tag}map/0")
        coarse_maps.append(maps)
        pyramids.append(_decode_view(spec, view, v, feats, theta, layout, lattices, meter, tag))
        meter.release_prefix(f"{tag}feat/")
        meter.release_prefix(f"{tag}img/")
    gs = consolidate(pyramids)
    meter.hold("fwd/gs", gs)
    for v in range(len(inputs.views)):
        meter.release_prefix(f"fwd/{v}/gauss/")
    image = None
    if render:
        image = render_pano(gs, inputs.target_pose, spec.render, meter=meter, tag="fwd/render/").image
    if not keep_cache:
        meter.release("fwd/gs")
        return image
    return image, ForwardCache(coarse_maps, gs, image, lattices)


def step1_faces(spec: PipelineSpec, gs: GaussianSet, pose: CameraPose, grad_image: np.ndarray,
                meter: MemoryMeter = NULL_METER) -> GaussianSet:
    """Re-render face by face and accumulate Gaussian gradients; one face tape at a time."""
    if grad_image is None:
        raise ValueError("step 1 needs the cached image gradient")
    cfg = spec.render
    g = np.concatenate([np.asarray(grad_image, dtype=np.float64), np.zeros(grad_image.shape[:2] + (1,))], axis=2)
    plan = stitch_plan(cfg.width, cfg.height, cfg.face_res)
    grads = GaussianSet.zeros_like(gs)
    d_rgb = np.zeros((len(gs), 3))
    meter.hold("step1/grads", grads, d_rgb)
    colors = gaussian_colors(gs, pose)[0]
    for f in range(len(FACE_KEYS)):
        tag = f"step1/{f}/"
        _, tape = render_face(gs, pose, f, cfg, colors, meter, tag, retain=True)
        meter.hold(f"{tag}tape", tape)
        grad_face = plan.face_adjoint(g, f)
        meter.hold(f"{tag}grad", grad_face)
        face_backward(gs, pose, tape, grad_face, cfg, grads, d_rgb, meter, tag)
        meter.release_prefix(tag)
    color_backward(gs, pose, d_rgb, grads)
    meter.release("step1/grads")
    return grads


def _owner_tiles(u, v, h, w, grid: TileGrid):
    y0, x0, _, _, _ = bilinear_taps(u, v, w, h)
    row_starts = np.array([a for a, _ in grid.rows])
    col_starts = np.array([a for a, _ in grid.cols])
    return np.searchsorted(row_starts, y0, side="right") - 1, np.searchsorted(col_starts, x0, side="right") - 1


def step2_tiles(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray, cache: ForwardCache,
                grads_gs: GaussianSet, meter: MemoryMeter = NULL_METER) -> np.ndarray:
    """Re-generate the head tile by tile and accumulate parameter gradients.

    A Gaussian's gradient is handled by the tile containing its top-left bilinear tap.
    Each tile's head output is extended by one pixel right and down so all four taps
    of the Gaussians it owns are available.
    """
    layout = ParamLayout(spec)
    order = _level_order(spec, len(inputs.views))
    g_theta = np.zeros(layout.size)
    r = spec.radius
    k = spec.decode.n_candidates
    shape = spec.head_shape
    for v, view in enumerate(inputs.views):
        tag = f"step2/{v}/"
        imgs = _image_pyramid(spec, view, meter, tag)
        g_f_up = None  # gradient into this level's feature map from the finer level
        for lvl in range(spec.levels):
            h, w = spec.level_dims(lvl)
            lat = cache.lattices[lvl]
            th = layout.head(theta, lvl)
            wl, bl = layout.linear(theta, lvl)
            coarse = cache.coarse_maps[v].get(lvl + 1)
            g_up = np.zeros((h, w, spec.features))  # gradient w.r.t. upsample2x(coarse)
            meter.hold(f"{tag}{lvl}/g_up", g_up)
            grid = TileGrid.make(h, w, spec.tiles, r)
            u, vv = lat.pixel_coords(w, h)
            y0s, x0s, _, fys, fxs = bilinear_taps(u, vv, w, h)
            trow, tcol = _owner_tiles(u, vv, h, w, grid)
            sub = grads_gs.subset(order[(v, lvl)])
            prior = _prior(view, lvl, lat.n, spec.decode.raw_size, k)
            dirs = lat.directions()
            for ti, (ty0, ty1) in enumerate(grid.rows):
                for tj, (tx0, tx1) in enumerate(grid.cols):
                    ttag = f"{tag}{lvl}/tile"
                    x, rows, cols, valid = _tile_input(imgs[lvl], coarse, ty0, ty1 + 1, tx0, tx1 + 1, r,
                                                       spec.features)
                    out, tape = head_forward(x, th, shape)
                    fmap = out + x[r:-r, r:-r, IMG_CHANNELS:]
                    g_fmap = np.zeros_like(fmap)
                    meter.hold(ttag, x, out, tape, fmap, g_fmap)
                    own = np.nonzero((trow == ti) & (tcol == tj))[0]
                    if len(own):
                        ly, lx0 = y0s[own] - ty0, x0s[own] - tx0
                        lx1 = lx0 + 1
                        fy, fx = fys[own][:, None], fxs[own][:, None]
                        top = fmap[ly, lx0] * (1.0 - fx) + fmap[ly, lx1] * fx
                        bot = fmap[ly + 1, lx0] * (1.0 - fx) + fmap[ly + 1, lx1] * fx
                        feat = top * (1.0 - fy) + bot * fy
                        raw = _raw(feat, wl, bl, prior[own])
                        d_raw = decode_gaussians_backward(raw, dirs[own], lvl, view.pose, spec.decode, sub.subset(own))
                        layout.pack_level(lvl, 0.0, feat.T @ d_raw, d_raw.sum(axis=0), g_theta)
                        d_feat = d_raw @ wl.T
                        for yy, xx, wt in ((ly, lx0, (1.0 - fy) * (1.0 - fx)), (ly, lx1, (1.0 - fy) * fx),
                                           (ly + 1, lx0, fy * (1.0 - fx)), (ly + 1, lx1, fy * fx)):
                            np.add.at(g_fmap, (yy, xx), d_feat * wt)
                    if g_f_up is not None:
                        g_fmap[:ty1 - ty0, :tx1 - tx0] += g_f_up[ty0:ty1, tx0:tx1]
                    g_x, g_head = head_backward(x, th, shape, g_fmap, tape)
                    layout.pack_level(lvl, g_head, 0.0, 0.0, g_theta)
                    # head input and skip connection both read the upsampled coarse map
                    g_x[r:-r, r:-r, IMG_CHANNELS:] += g_fmap
                    np.add.at(g_up, (rows[valid][:, None], cols[None, :]), g_x[valid][:, :, IMG_CHANNELS:])
                    meter.release(ttag)
            if g_f_up is not None:
                meter.release(f"{tag}{lvl}/g_f_up")
            if lvl + 1 < spec.levels:
                g_f_up = upsample2x_adjoint(g_up)
                meter.hold(f"{tag}{lvl + 1}/g_f_up", g_f_up)
            meter.release(f"{tag}{lvl}/g_up")
        meter.release_prefix(tag)
    return g_theta


def deferred_grads(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray, two_step: bool = True,
                   meter: MemoryMeter = NULL_METER) -> GradientLedger:
    """Gradients via the deferred schedule (``two_step=False`` keeps all face tapes at once)."""
    if two_step:
        image, cache = forward_nograd(spec, inputs, theta, meter, keep_cache=True)
    else:
        _, cache = forward_nograd(spec, inputs, theta, meter, keep_cache=True, render=False)
    if two_step:
        grad_img = cache_image_grad(image, inputs.target, spec.loss)
        meter.hold("grad_image", grad_img)
        grads_gs = step1_faces(spec, cache.gs, inputs.target_pose, grad_img, meter)
    else:
        res = render_pano(cache.gs, inputs.target_pose, spec.render, keep_tape=True, meter=meter, tag="one/render/")
        image = res.image
        grad_img = cache_image_grad(image, inputs.target, spec.loss)
        meter.hold("grad_image", grad_img)
        grads_gs = render_backward(res.tape, grad_img, cache.gs)
        meter.release_prefix("one/render/")
    meter.hold("grads_gs", grads_gs)
    meter.release("fwd/gs")
    g_theta = step2_tiles(spec, inputs, theta, cache, grads_gs, meter)
    meter.release_prefix("fwd/")
    meter.release("grads_gs")
    meter.release("grad_image")
    loss = rgb_loss(image, inputs.target, spec.loss)
    return GradientLedger(grads_gs, g_theta, grad_img, loss, meter.peak, meter.current, image)


def run_mode(mode: str, spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray,
             meter: MemoryMeter | None = None) -> GradientLedger:
    meter = MemoryMeter() if meter is None else meter
    if mode == "monolithic":
        return monolithic_grads(spec, inputs, theta, meter)
    if mode == "one-step":
        return deferred_grads(spec, inputs, theta, two_step=False, meter=meter)
    if mode == "two-step":
        return deferred_grads(spec, inputs, theta, two_step=True, meter=meter)
    raise ValueError(f"unknown mode {mode!r}")


def pipeline_loss(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray):
    """End-to-end image loss and the renderer's discrete-decision digests (for finite differences)."""
    _, cache = forward_nograd(spec, inputs, theta, keep_cache=True, render=False)
    res = render_pano(cache.gs, inputs.target_pose, spec.render, keep_tape=True)
    digest = tuple(t.digest for t in res.tape.faces)
    return rgb_loss(res.image, inputs.target, spec.loss), digest


# ------------------------------------------------------------------ memory report


def memory_report(specs: dict, modes=MODES, seed: int = 0) -> list[dict]:
    """Peak live bytes per mode for each ``{resolution_label: spec}``."""
    rows = []
    for label, spec in specs.items():
        inputs = random_inputs(spec, seed)
        theta = init_theta(spec, seed)
        for mode in modes:
            led = run_mode(mode, spec, inputs, theta)
            rows.append({"mode": mode, "resolution": label, "peak_live_bytes": led.peak_live_bytes})
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["mode", "resolution", "peak_live_bytes"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def head_stage_peak(spec: PipelineSpec, inputs: PipelineInputs, theta: np.ndarray) -> int:
    """Peak live bytes of step 2 alone, on top of its inputs (for tile-count scaling)."""
    _, cache = forward_nograd(spec, inputs, theta, keep_cache=True, render=False)
    grads = GaussianSet.zeros_like(cache.gs)
    meter = MemoryMeter()
    step2_tiles(spec, inputs, theta, cache, grads, meter)
    return meter.peak


def bench_spec(height: int, tiles: int = 4, geo_width: int = 64, render_width: int = 128, levels: int = 4,
               hidden: int = 16) -> PipelineSpec:
    """Benchmark configuration: head at ``2*height x height``, fixed geometry and render stages."""
    return PipelineSpec(head_width=2 * height, geo_width=geo_width, levels=levels,
                        render=RenderConfig(render_width, render_width // 2, render_width // 4),
                        tiles=tiles, hidden=hidden, inv_depths=tuple(np.linspace(0.2, 0.8, 8)))


__all__ = [
    "MODES", "PipelineSpec", "ParamLayout", "init_theta", "ViewInput", "PipelineInputs", "random_inputs",
    "cache_image_grad", "monolithic_grads", "ForwardCache", "GradientLedger", "forward_nograd", "step1_faces",
    "step2_tiles", "deferred_grads", "run_mode", "pipeline_loss", "memory_report", "report_csv",
    "head_stage_peak", "bench_spec",
]
