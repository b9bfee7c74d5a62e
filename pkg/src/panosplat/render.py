"""Cubemap Gaussian splatting renderer with an exact hand-written adjoint.

Each face is an ordinary 90-degree pinhole camera. Gaussians are projected with
the EWA linearisation, depth-sorted per face and alpha-composited front to back
in 16x16 pixel tiles; the six faces are padded from their neighbours and
bilinearly stitched into the panorama.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .cubemap import FACE_BASES, CubemapFaceSet, StitchPlan, pad_faces
from .gaussians import GaussianSet, quats_to_matrices, quats_to_matrices_backward, sh_eval, sh_eval_backward
from .geometry import CameraPose, erp_directions
from .memory import NULL_METER, MemoryMeter, nbytes_of

# a Gaussian touches a pixel while its falloff is at least 1/255 (about 99.6% of its mass)
FOOTPRINT_Q = 2.0 * math.log(255.0)
TILE = 16


@dataclass(frozen=True)
class RenderConfig:
    width: int
    height: int
    face_res: int
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.05
    dilation: float = 0.3
    alpha_max: float = 0.99
    t_min: float = 1e-4
    cull_margin: float = 1.0
    # means further off-axis than this tangent are dropped, as in perspective splatting
    frustum_guard: float = 2.0

    def __post_init__(self):
        if self.width != 2 * self.height:
            raise ValueError("render target needs W == 2H")
        if self.face_res < 8:
            raise ValueError("face resolution must be at least 8")


@lru_cache(maxsize=8)
def stitch_plan(width: int, height: int, face_res: int) -> StitchPlan:
    return StitchPlan(width, height, face_res)


def face_rotation(pose: CameraPose, face: int) -> np.ndarray:
    """World-to-face matrix with rows (right, up, forward)."""
    fwd, right, up = FACE_BASES[face]
    return np.stack([right, up, fwd]) @ pose.matrix.T


def gaussian_colors(gs: GaussianSet, pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """View-dependent RGB, unit view directions and view distances."""
    rel = gs.means - pose.position
    dist = np.linalg.norm(rel, axis=1)
    dirs = rel / np.maximum(dist, 1e-12)[:, None]
    return sh_eval(gs.sh, dirs), dirs, dist


# ------------------------------------------------------------------ projection


@dataclass
class ProjectedFace:
    """Projected 2D Gaussians of one face, sorted front to back."""

    face: int
    index: np.ndarray  # source Gaussian indices
    t: np.ndarray  # face-camera coordinates (x right, y up, z forward)
    mean2d: np.ndarray  # (G, 2) face pixels
    cov2d: np.ndarray  # (G, 3) as (xx, xy, yy), dilated
    conic: np.ndarray  # (G, 3)
    depth: np.ndarray
    alpha: np.ndarray
    rgb: np.ndarray
    extent: np.ndarray  # (G, 2) half-extent of the footprint box

    def __len__(self) -> int:
        return len(self.index)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.index, self.t, self.mean2d, self.cov2d, self.conic, self.depth, self.alpha, self.rgb, self.extent))


def _ewa(t: np.ndarray, cov3: np.ndarray, rot: np.ndarray, r: int, dilation: float):
    f = 0.5 * r
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    jac = np.zeros((len(t), 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * x / (z * z)
    jac[:, 1, 1] = -f / z
    jac[:, 1, 2] = f * y / (z * z)
    tm = jac @ rot
    v = np.einsum("nij,njk,nlk->nil", tm, cov3, tm)
    cov = np.stack([v[:, 0, 0] + dilation, v[:, 0, 1], v[:, 1, 1] + dilation], axis=1)
    mean = np.stack([f * x / z + (f - 0.5), -f * y / z + (f - 0.5)], axis=1)
    return mean, cov


def _conic(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _in_frustum(t: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    z = t[..., 2]
    lim = cfg.frustum_guard * np.maximum(z, 0.0)
    return (z > cfg.near) & (np.abs(t[..., 0]) <= lim) & (np.abs(t[..., 1]) <= lim)


def project_to_face(gs: GaussianSet, pose: CameraPose, face: int, cfg: RenderConfig, colors=None) -> ProjectedFace:
    """Project all Gaussians onto one face; culled Gaussians are dropped."""
    r = cfg.face_res
    rot = face_rotation(pose, face)
    t = (gs.means - pose.position) @ rot.T
    if colors is None:
        colors = gaussian_colors(gs, pose)[0]
    keep = np.nonzero(_in_frustum(t, cfg))[0]
    t = t[keep]
    cov3 = gs.subset(keep).covariances()
    mean, cov = _ewa(t, cov3, rot, r, cfg.dilation)
    ext = np.sqrt(FOOTPRINT_Q * np.stack([cov[:, 0], cov[:, 2]], axis=1))
    lo, hi = -0.5 - cfg.cull_margin, r - 0.5 + cfg.cull_margin
    visible = np.all((mean + ext >= lo) & (mean - ext <= hi), axis=1)
    sel = np.nonzero(visible)[0]
    # front to back; stable sort keeps index order on ties
    order = sel[np.argsort(t[sel, 2], kind="stable")]
    src = keep[order]
    cov = cov[order]
    return ProjectedFace(
        face=face,
        index=src,
        t=t[order],
        mean2d=mean[order],
        cov2d=cov,
        conic=_conic(cov),
        depth=t[order, 2],
        alpha=gs.opacity[src],
        rgb=colors[src],
        extent=ext[order],
    )


# ------------------------------------------------------------------ compositing


def _tile_members(proj: ProjectedFace, x0: int, x1: int, y0: int, y1: int) -> np.ndarray:
    m, e = proj.mean2d, proj.extent + 0.5
    hit = (m[:, 0] + e[:, 0] >= x0) & (m[:, 0] - e[:, 0] <= x1 - 1) & (m[:, 1] + e[:, 1] >= y0) & (m[:, 1] - e[:, 1] <= y1 - 1)
    return np.nonzero(hit)[0]


def _composite(proj: ProjectedFace, members: np.ndarray, px: np.ndarray, py: np.ndarray, cfg: RenderConfig):
    """Dense front-to-back compositing of ``members`` over pixels ``(px, py)``."""
    mx = proj.mean2d[members, 0][:, None]
    my = proj.mean2d[members, 1][:, None]
    ca = proj.conic[members, 0][:, None]
    cb = proj.conic[members, 1][:, None]
    cc = proj.conic[members, 2][:, None]
    dx = px[None, :] - mx
    dy = py[None, :] - my
    q = (ca * dx * dx + cc * dy * dy) + 2.0 * cb * dx * dy
    inside = q <= FOOTPRINT_Q
    g = np.exp(-0.5 * q)
    a_raw = proj.alpha[members][:, None] * g
    clamped = a_raw > cfg.alpha_max
    a = np.where(clamped, cfg.alpha_max, a_raw)
    a = np.where(inside, a, 0.0)
    n = len(members)
    if n:
        t_after = np.cumprod(1.0 - a, axis=0)
        term = t_after < cfg.t_min
        stop = np.where(term.any(axis=0), term.argmax(axis=0), n)
    else:
        stop = np.zeros(len(px), dtype=np.int64)
    contrib = (np.arange(n)[:, None] < stop[None, :]) & inside
    a = np.where(contrib, a, 0.0)
    if n:
        t_after = np.cumprod(1.0 - a, axis=0)
        t_before = np.concatenate([np.ones((1, len(px))), t_after[:-1]], axis=0)
        t_final = t_after[-1]
    else:
        t_before = np.ones((0, len(px)))
        t_final = np.ones(len(px))
    w = a * t_before
    terms = proj.rgb[members][:, None, :] * w[:, :, None]
    color = np.cumsum(terms, axis=0)[-1] if n else np.zeros((len(px), 3))
    return dict(dx=dx, dy=dy, g=g, a=a, clamped=clamped, inside=inside, contrib=contrib,
                t_before=t_before, t_final=t_final, w=w, terms=terms, color=color, stop=stop)


@dataclass
class FaceTape:
    """State needed to replay or differentiate one rasterised face."""

    proj: ProjectedFace
    t_final: np.ndarray  # (R, R)
    n_contrib: np.ndarray  # (R, R) Gaussians traversed per pixel
    digest: str  # hash of all discrete compositing decisions
    states: list | None = None  # retained per-tile compositing state, reused by the backward pass

    @property
    def retained_bytes(self) -> int:
        return self.t_final.nbytes + self.n_contrib.nbytes + nbytes_of(self.states)

    @property
    def nbytes(self) -> int:
        return self.proj.nbytes + self.retained_bytes


def _tiles(r: int):
    for y0 in range(0, r, TILE):
        for x0 in range(0, r, TILE):
            yield x0, min(x0 + TILE, r), y0, min(y0 + TILE, r)


_RETAINED = ("dx", "dy", "g", "a", "clamped", "inside", "contrib", "t_before", "t_final", "w", "terms")


def rasterize_face(proj: ProjectedFace, cfg: RenderConfig, meter: MemoryMeter = NULL_METER, tag: str = "",
                   retain: bool = False):
    """Composite one face. Returns ``(rgba (R, R, 4), FaceTape)``.

    With ``retain`` the tape keeps every tile's compositing state so the backward pass
    need not recompute it.
    """
    r = cfg.face_res
    bg = np.asarray(cfg.background, dtype=np.float64)
    out = np.zeros((r, r, 4))
    t_final = np.ones((r, r))
    n_contrib = np.zeros((r, r), dtype=np.int32)
    h = hashlib.blake2b(digest_size=16)
    h.update(proj.index.tobytes())
    states = [] if retain else None
    for x0, x1, y0, y1 in _tiles(r):
        yy, xx = np.meshgrid(np.arange(y0, y1, dtype=np.float64), np.arange(x0, x1, dtype=np.float64), indexing="ij")
        px, py = xx.ravel(), yy.ravel()
        members = _tile_members(proj, x0, x1, y0, y1)
        st = _composite(proj, members, px, py, cfg)
        meter.hold(f"{tag}tile", *(v for v in st.values() if isinstance(v, np.ndarray)))
        rgb = st["color"] + bg[None, :] * st["t_final"][:, None]
        out[y0:y1, x0:x1, :3] = rgb.reshape(y1 - y0, x1 - x0, 3)
        out[y0:y1, x0:x1, 3] = (1.0 - st["t_final"]).reshape(y1 - y0, x1 - x0)
        t_final[y0:y1, x0:x1] = st["t_final"].reshape(y1 - y0, x1 - x0)
        n_contrib[y0:y1, x0:x1] = st["stop"].reshape(y1 - y0, x1 - x0)
        h.update(members.tobytes())
        h.update(np.packbits(st["contrib"]).tobytes())
        h.update(np.packbits(st["clamped"] & st["contrib"]).tobytes())
        meter.release(f"{tag}tile")
        if retain:
            states.append(dict(members=members, **{k: st[k] for k in _RETAINED}))
            meter.update(f"{tag}states", states)
    return out, FaceTape(proj, t_final, n_contrib, h.hexdigest(), states)


def replay_face(tape: FaceTape, cfg: RenderConfig) -> np.ndarray:
    return rasterize_face(tape.proj, cfg)[0]


def rasterize_face_oracle(proj: ProjectedFace, cfg: RenderConfig) -> np.ndarray:
    """Exhaustive per-pixel loop over all projected Gaussians (test oracle)."""
    r = cfg.face_res
    bg = np.asarray(cfg.background, dtype=np.float64)
    out = np.zeros((r, r, 4))
    for yi in range(r):
        for xi in range(r):
            px, py = np.float64(xi), np.float64(yi)
            t = np.float64(1.0)
            c = np.zeros(3)
            for i in range(len(proj)):
                dx = px - proj.mean2d[i, 0]
                dy = py - proj.mean2d[i, 1]
                ca, cb, cc = proj.conic[i]
                q = (ca * dx * dx + cc * dy * dy) + 2.0 * cb * dx * dy
                if not q <= FOOTPRINT_Q:
                    continue
                a = proj.alpha[i] * np.exp(-0.5 * q)
                if a > cfg.alpha_max:
                    a = np.float64(cfg.alpha_max)
                t_next = t * (1.0 - a)
                if t_next < cfg.t_min:
                    break
                c = c + proj.rgb[i] * (a * t)
                t = t_next
            out[yi, xi, :3] = c + bg * t
            out[yi, xi, 3] = 1.0 - t
    return out


# ------------------------------------------------------------------ panorama


@dataclass
class RenderTape:
    faces: list  # list[FaceTape]
    fingerprint: str
    pose: CameraPose
    cfg: RenderConfig
    n_gaussians: int

    @property
    def nbytes(self) -> int:
        return sum(f.nbytes for f in self.faces)


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W, 1)
    faces: CubemapFaceSet = field(repr=False)  # padded rgba faces
    tape: RenderTape | None = field(default=None, repr=False)


def fingerprint(gs: GaussianSet) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in gs.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def render_face(gs: GaussianSet, pose: CameraPose, face: int, cfg: RenderConfig, colors=None,
                meter: MemoryMeter = NULL_METER, tag: str = "", retain: bool = False):
    """Project and rasterise a single face. Returns ``(rgba, FaceTape)``."""
    proj = project_to_face(gs, pose, face, cfg, colors)
    meter.hold(f"{tag}proj", proj)
    rgba, tape = rasterize_face(proj, cfg, meter, tag, retain)
    meter.release(f"{tag}proj")
    meter.discard(f"{tag}states")
    return rgba, tape


def render_pano(gs: GaussianSet, pose: CameraPose, cfg: RenderConfig, mode: str = "batched",
                keep_tape: bool = False, meter: MemoryMeter = NULL_METER, tag: str = "render/") -> RenderResult:
    """Render the panorama seen from ``pose``.

    ``batched`` projects all six faces before rasterising any of them; ``sequential``
    handles one face at a time and only keeps its finished raster. Both give
    bit-identical images.
    """
    if mode not in ("batched", "sequential"):
        raise ValueError(f"unknown face mode {mode!r}")
    r = cfg.face_res
    colors = gaussian_colors(gs, pose)[0]
    faces = np.zeros((6, r, r, 4))
    meter.hold(f"{tag}faces", faces)
    tapes = []
    if mode == "batched":
        projs = [project_to_face(gs, pose, f, cfg, colors) for f in range(6)]
        meter.hold(f"{tag}proj_all", projs)
        for f, proj in enumerate(projs):
            faces[f], tape = rasterize_face(proj, cfg, meter, f"{tag}{f}/", keep_tape)
            meter.discard(f"{tag}{f}/states")
            if keep_tape:
                tapes.append(tape)
                meter.hold(f"{tag}tape/{f}", tape.t_final, tape.n_contrib, tape.states)
        if keep_tape:
            meter.hold(f"{tag}tape/proj", projs)
        meter.release(f"{tag}proj_all")
    else:
        for f in range(6):
            faces[f], tape = render_face(gs, pose, f, cfg, colors, meter, f"{tag}{f}/", keep_tape)
            if keep_tape:
                tapes.append(tape)
                meter.hold(f"{tag}tape/{f}", tape)
    padded = pad_faces(CubemapFaceSet(faces))
    meter.hold(f"{tag}padded", padded.faces)
    plan = stitch_plan(cfg.width, cfg.height, r)
    out = plan.stitch(padded)
    meter.release(f"{tag}padded")
    meter.release(f"{tag}faces")
    tape = RenderTape(tapes, fingerprint(gs), pose, cfg, len(gs)) if keep_tape else None
    return RenderResult(out[..., :3], out[..., 3:], padded, tape)


def release_tape(meter: MemoryMeter, tag: str = "render/") -> None:
    meter.release_prefix(f"{tag}tape/")


def _micro_rotations(dirs: np.ndarray) -> np.ndarray:
    """Camera-to-micro-camera rotations (rows right, up, forward) looking along ``dirs``."""
    ref = np.where(np.abs(dirs[:, 1:2]) > 0.999, np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 1.0, 0.0]]))
    right = np.cross(ref, dirs)
    right /= np.linalg.norm(right, axis=1, keepdims=True)
    up = np.cross(dirs, right)
    return np.stack([right, up, dirs], axis=1)


def render_dense_oracle(gs: GaussianSet, pose: CameraPose, cfg: RenderConfig, chunk: int = 512) -> np.ndarray:
    """Per-pixel micro-camera renderer used as the panorama reference.

    Every ERP pixel gets its own pinhole camera looking along the pixel ray, with the
    face focal length, and each Gaussian is EWA-projected into it and evaluated at the
    principal point. There are no faces, seams or interpolation, so the difference to
    :func:`render_pano` is the cost of the cubemap approximation.
    """
    dirs = erp_directions(cfg.width, cfg.height).reshape(-1, 3)
    colors = gaussian_colors(gs, pose)[0]
    rel = gs.means - pose.position
    cov3 = gs.covariances()
    opac, rgb = gs.opacity, colors
    bg = np.asarray(cfg.background, dtype=np.float64)
    f = 0.5 * cfg.face_res
    out = np.zeros((len(dirs), 4))
    n = len(rel)
    for s0 in range(0, len(dirs), chunk):
        rot = _micro_rotations(dirs[s0:s0 + chunk]) @ pose.matrix.T  # world to micro camera
        p = len(rot)
        t = np.einsum("pij,nj->npi", rot, rel)
        z = t[..., 2]
        front = _in_frustum(t, cfg)
        zs = np.where(front, z, 1.0)
        jac = np.zeros((n, p, 2, 3))
        jac[..., 0, 0] = f / zs
        jac[..., 0, 2] = -f * t[..., 0] / (zs * zs)
        jac[..., 1, 1] = -f / zs
        jac[..., 1, 2] = f * t[..., 1] / (zs * zs)
        tm = jac @ rot[None]
        v = np.einsum("npij,njk,nplk->npil", tm, cov3, tm)
        a_, b_, c_ = v[..., 0, 0] + cfg.dilation, v[..., 0, 1], v[..., 1, 1] + cfg.dilation
        det = a_ * c_ - b_ * b_
        dx = -f * t[..., 0] / zs
        dy = f * t[..., 1] / zs
        q = (c_ * dx * dx + a_ * dy * dy - 2.0 * b_ * dx * dy) / det
        inside = front & (q <= FOOTPRINT_Q)
        a = np.minimum(opac[:, None] * np.exp(-0.5 * q), cfg.alpha_max)
        a = np.where(inside, a, 0.0)
        # each micro camera sorts by its own view depth
        order = np.argsort(np.where(front, z, np.inf), axis=0, kind="stable")
        a = np.take_along_axis(a, order, axis=0)
        col = rgb[order]
        t_after = np.cumprod(1.0 - a, axis=0)
        # the first terminating Gaussian and all later ones are skipped
        stop = np.cumsum(t_after < cfg.t_min, axis=0) > 0
        a = np.where(stop, 0.0, a)
        t_after = np.cumprod(1.0 - a, axis=0) if n else np.ones((0, p))
        t_before = np.concatenate([np.ones((1, p)), t_after[:-1]], axis=0) if n else t_after
        t_final = t_after[-1] if n else np.ones(p)
        out[s0:s0 + p, :3] = np.einsum("np,npc->pc", a * t_before, col) + bg * t_final[:, None]
        out[s0:s0 + p, 3] = 1.0 - t_final
    return out.reshape(cfg.height, cfg.width, 4)


# ------------------------------------------------------------------ backward


def rasterize_face_backward(tape: FaceTape, grad_rgba: np.ndarray, cfg: RenderConfig,
                            meter: MemoryMeter = NULL_METER, tag: str = ""):
    """Adjoint of :func:`rasterize_face` for the face's projected parameters.

    Returns ``(d_mean2d, d_conic, d_alpha, d_rgb)`` indexed like ``tape.proj``.
    """
    proj = tape.proj
    g_n = len(proj)
    d_mean = np.zeros((g_n, 2))
    d_conic = np.zeros((g_n, 3))
    d_alpha = np.zeros(g_n)
    d_rgb = np.zeros((g_n, 3))
    bg = np.asarray(cfg.background, dtype=np.float64)
    for k, (x0, x1, y0, y1) in enumerate(_tiles(cfg.face_res)):
        if tape.states is not None:
            st = tape.states[k]
            members = st["members"]
            if not len(members):
                continue
        else:
            members = _tile_members(proj, x0, x1, y0, y1)
            if not len(members):
                continue
            yy, xx = np.meshgrid(np.arange(y0, y1, dtype=np.float64), np.arange(x0, x1, dtype=np.float64),
                                 indexing="ij")
            st = _composite(proj, members, xx.ravel(), yy.ravel(), cfg)
            meter.hold(f"{tag}tile", *(v for v in st.values() if isinstance(v, np.ndarray)))
        gc = grad_rgba[y0:y1, x0:x1, :3].reshape(-1, 3)
        ga = grad_rgba[y0:y1, x0:x1, 3].ravel()
        a, w, terms = st["a"], st["w"], st["terms"]
        d_rgb[members] += np.einsum("gp,pc->gc", w, gc)
        after = np.cumsum(terms[::-1], axis=0)[::-1] - terms  # colour behind each Gaussian
        one_m = 1.0 - a
        d_a = np.einsum("gpc,pc->gp", proj.rgb[members][:, None, :] * st["t_before"][:, :, None], gc)
        d_a -= np.einsum("gpc,pc->gp", after, gc) / one_m
        d_a -= (gc @ bg)[None, :] * st["t_final"][None, :] / one_m
        d_a += ga[None, :] * st["t_final"][None, :] / one_m
        live = st["contrib"] & ~st["clamped"]
        d_a = np.where(live, d_a, 0.0)
        g = st["g"]
        d_alpha[members] += np.sum(d_a * g, axis=1)
        d_q = d_a * proj.alpha[members][:, None] * g * -0.5
        dx, dy = st["dx"], st["dy"]
        ca = proj.conic[members, 0][:, None]
        cb = proj.conic[members, 1][:, None]
        cc = proj.conic[members, 2][:, None]
        d_mean[members, 0] += np.sum(d_q * -(2.0 * ca * dx + 2.0 * cb * dy), axis=1)
        d_mean[members, 1] += np.sum(d_q * -(2.0 * cc * dy + 2.0 * cb * dx), axis=1)
        d_conic[members, 0] += np.sum(d_q * dx * dx, axis=1)
        d_conic[members, 1] += np.sum(d_q * 2.0 * dx * dy, axis=1)
        d_conic[members, 2] += np.sum(d_q * dy * dy, axis=1)
        meter.discard(f"{tag}tile")
    return d_mean, d_conic, d_alpha, d_rgb


def project_backward(gs: GaussianSet, pose: CameraPose, proj: ProjectedFace, cfg: RenderConfig,
                     d_mean: np.ndarray, d_conic: np.ndarray):
    """Adjoint of the EWA projection. Returns ``(d_means, d_scales, d_quats)`` for ``proj.index``."""
    r = cfg.face_res
    f = 0.5 * r
    idx = proj.index
    rot = face_rotation(pose, proj.face)
    t = proj.t
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    # conic -> covariance
    a, b, c = proj.cov2d[:, 0], proj.cov2d[:, 1], proj.cov2d[:, 2]
    det = a * c - b * b
    det2 = det * det
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    g_a = ga * (-c * c / det2) + gb * (b * c / det2) + gc * (1.0 / det - a * c / det2)
    g_b = ga * (2.0 * b * c / det2) + gb * (-1.0 / det - 2.0 * b * b / det2) + gc * (2.0 * a * b / det2)
    g_c = ga * (1.0 / det - a * c / det2) + gb * (a * b / det2) + gc * (-a * a / det2)
    g_v = np.zeros((len(idx), 2, 2))
    g_v[:, 0, 0] = g_a
    g_v[:, 0, 1] = g_v[:, 1, 0] = 0.5 * g_b
    g_v[:, 1, 1] = g_c
    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * x / (z * z)
    jac[:, 1, 1] = -f / z
    jac[:, 1, 2] = f * y / (z * z)
    tm = jac @ rot
    quats = gs.quats[idx]
    scales = gs.scales[idx]
    rq = quats_to_matrices(quats)
    cov3 = np.einsum("nij,nj,nkj->nik", rq, scales**2, rq)
    g_cov3 = np.einsum("nji,njk,nkl->nil", tm, g_v, tm)
    g_tm = 2.0 * np.einsum("nij,njk,nkl->nil", g_v, tm, cov3)
    g_j = g_tm @ rot.T
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_j[:, 0, 2] * (-f / (z * z))
    g_t[:, 1] = g_j[:, 1, 2] * (f / (z * z))
    g_t[:, 2] = (
        g_j[:, 0, 0] * (-f / (z * z))
        + g_j[:, 0, 2] * (2.0 * f * x / (z * z * z))
        + g_j[:, 1, 1] * (f / (z * z))
        + g_j[:, 1, 2] * (-2.0 * f * y / (z * z * z))
    )
    du, dv = d_mean[:, 0], d_mean[:, 1]
    g_t[:, 0] += du * f / z
    g_t[:, 1] += dv * (-f / z)
    g_t[:, 2] += du * (-f * x / (z * z)) + dv * (f * y / (z * z))
    d_means = g_t @ rot
    g_rq = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3, rq, scales**2)
    d_scales = 2.0 * scales * np.einsum("nji,njk,nki->ni", rq, g_cov3, rq)
    d_quats = quats_to_matrices_backward(quats, g_rq)
    return d_means, d_scales, d_quats


def _check_tape(tape: RenderTape, grad: np.ndarray, gs: GaussianSet | None):
    if tape is None or not tape.faces:
        raise ValueError("render_backward needs a tape from a forward pass with keep_tape=True")
    if gs is not None and (len(gs) != tape.n_gaussians or fingerprint(gs) != tape.fingerprint):
        raise ValueError("tape does not belong to these Gaussians (stale tape)")
    if grad.shape[:2] != (tape.cfg.height, tape.cfg.width):
        raise ValueError(f"gradient shape {grad.shape} does not match the rendered panorama")


def face_backward(gs: GaussianSet, pose: CameraPose, face_tape: FaceTape, grad_face: np.ndarray,
                  cfg: RenderConfig, grads: GaussianSet, d_rgb_total: np.ndarray,
                  meter: MemoryMeter = NULL_METER, tag: str = "") -> None:
    """Accumulate one face's contribution into ``grads`` (colour grads into ``d_rgb_total``)."""
    proj = face_tape.proj
    if not len(proj):
        return
    d_mean, d_conic, d_alpha, d_rgb = rasterize_face_backward(face_tape, grad_face, cfg, meter, tag)
    d_means, d_scales, d_quats = project_backward(gs, pose, proj, cfg, d_mean, d_conic)
    idx = proj.index
    grads.means[idx] += d_means
    grads.scales[idx] += d_scales
    grads.quats[idx] += d_quats
    grads.opacity[idx] += d_alpha
    d_rgb_total[idx] += d_rgb


def color_backward(gs: GaussianSet, pose: CameraPose, d_rgb: np.ndarray, grads: GaussianSet) -> None:
    _, dirs, dist = gaussian_colors(gs, pose)
    g_sh, g_dir = sh_eval_backward(gs.sh, dirs, d_rgb)
    grads.sh += g_sh
    if gs.sh.shape[1] > 1:
        radial = np.sum(dirs * g_dir, axis=1, keepdims=True)
        grads.means += (g_dir - dirs * radial) / np.maximum(dist, 1e-12)[:, None]


def render_backward(tape: RenderTape, grad_image: np.ndarray, gs: GaussianSet,
                    grad_alpha: np.ndarray | None = None) -> GaussianSet:
    """Exact adjoint of :func:`render_pano` w.r.t. all Gaussian parameters.

    Faces are processed in key order and pixels row-major within a face.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    _check_tape(tape, grad_image, gs)
    cfg = tape.cfg
    g = np.concatenate([grad_image.reshape(cfg.height, cfg.width, 3),
                        np.zeros((cfg.height, cfg.width, 1)) if grad_alpha is None
                        else np.asarray(grad_alpha, dtype=np.float64).reshape(cfg.height, cfg.width, 1)], axis=2)
    plan = stitch_plan(cfg.width, cfg.height, cfg.face_res)
    grads = GaussianSet.zeros_like(gs)
    d_rgb = np.zeros((len(gs), 3))
    for f, ft in enumerate(tape.faces):
        face_backward(gs, tape.pose, ft, plan.face_adjoint(g, f), cfg, grads, d_rgb)
    color_backward(gs, tape.pose, d_rgb, grads)
    return grads
