"""Cubemap addressing, 1-pixel neighbour padding and bilinear stitching to ERP."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import dir_to_pixel, erp_directions, sample_erp

# lexicographic order; ties on face boundaries resolve to the lowest index
FACE_KEYS = ("+X", "+Y", "+Z", "-X", "-Y", "-Z")

# (forward, right, up) axes of each face camera, in the camera frame
FACE_BASES = np.array(
    [
        [[1, 0, 0], [0, 0, -1], [0, 1, 0]],  # +X
        [[0, 1, 0], [1, 0, 0], [0, 0, -1]],  # +Y
        [[0, 0, 1], [1, 0, 0], [0, 1, 0]],  # +Z
        [[-1, 0, 0], [0, 0, 1], [0, 1, 0]],  # -X
        [[0, -1, 0], [1, 0, 0], [0, 0, 1]],  # -Y
        [[0, 0, -1], [-1, 0, 0], [0, 1, 0]],  # -Z
    ],
    dtype=np.float64,
)

SIDES = ("left", "right", "top", "bottom")

# (face, side) -> (neighbour face, "row" | "col", edge index as 0 or -1, reversed)
# The border pixel k along ``side`` (k = row for left/right, column for top/bottom)
# copies sample k (or R-1-k when reversed) of the neighbour's edge row/column.
EDGE_TABLE = {
    ("+X", "left"): ("+Z", "col", -1, False),
    ("+X", "right"): ("-Z", "col", 0, False),
    ("+X", "top"): ("+Y", "col", -1, True),
    ("+X", "bottom"): ("-Y", "col", -1, False),
    ("-X", "left"): ("-Z", "col", -1, False),
    ("-X", "right"): ("+Z", "col", 0, False),
    ("-X", "top"): ("+Y", "col", 0, False),
    ("-X", "bottom"): ("-Y", "col", 0, True),
    ("+Y", "left"): ("-X", "row", 0, False),
    ("+Y", "right"): ("+X", "row", 0, True),
    ("+Y", "top"): ("-Z", "row", 0, True),
    ("+Y", "bottom"): ("+Z", "row", 0, False),
    ("-Y", "left"): ("-X", "row", -1, True),
    ("-Y", "right"): ("+X", "row", -1, False),
    ("-Y", "top"): ("+Z", "row", -1, False),
    ("-Y", "bottom"): ("-Z", "row", -1, True),
    ("+Z", "left"): ("-X", "col", -1, False),
    ("+Z", "right"): ("+X", "col", 0, False),
    ("+Z", "top"): ("+Y", "row", -1, False),
    ("+Z", "bottom"): ("-Y", "row", 0, False),
    ("-Z", "left"): ("+X", "col", -1, False),
    ("-Z", "right"): ("-X", "col", 0, False),
    ("-Z", "top"): ("+Y", "row", 0, True),
    ("-Z", "bottom"): ("-Y", "row", -1, True),
}


@dataclass(frozen=True)
class CubemapFaceSet:
    """Six square faces stacked as ``(6, R + 2*pad, R + 2*pad, C)`` in ``FACE_KEYS`` order."""

    faces: np.ndarray
    pad: int = 0

    def __post_init__(self):
        f = np.asarray(self.faces, dtype=np.float64)
        if f.ndim == 3:
            f = f[..., None]
        if f.ndim != 4 or f.shape[0] != 6 or f.shape[1] != f.shape[2]:
            raise ValueError(f"cubemap faces must be (6, S, S, C), got {f.shape}")
        if self.pad not in (0, 1):
            raise ValueError("pad must be 0 or 1")
        object.__setattr__(self, "faces", f)

    @property
    def resolution(self) -> int:
        return self.faces.shape[1] - 2 * self.pad

    @property
    def channels(self) -> int:
        return self.faces.shape[3]

    def face(self, key: str) -> np.ndarray:
        return self.faces[FACE_KEYS.index(key)]


# ------------------------------------------------------------------ addressing


def face_index(d: np.ndarray) -> np.ndarray:
    """Face of each direction: axis of largest magnitude, ties to the lowest key."""
    d = np.asarray(d, dtype=np.float64)
    ad = np.abs(d)
    m = ad.max(axis=-1, keepdims=True)
    cand = np.where(d >= 0, np.arange(3), np.arange(3) + 3)
    cand = np.where(ad == m, cand, 99)
    return cand.min(axis=-1)


def dir_to_face_uv(d, resolution: int):
    """Face index and continuous face pixel coordinates (centres on integers)."""
    d = np.asarray(d, dtype=np.float64)
    f = face_index(d)
    basis = FACE_BASES[f]
    z = np.einsum("...k,...k->...", d, basis[..., 0, :])
    a = np.einsum("...k,...k->...", d, basis[..., 1, :]) / z
    b = np.einsum("...k,...k->...", d, basis[..., 2, :]) / z
    u = (a + 1.0) * 0.5 * resolution - 0.5
    v = (1.0 - b) * 0.5 * resolution - 0.5
    return f, u, v


def face_uv_to_dir(face: int, u, v, resolution: int) -> np.ndarray:
    """Unit direction through continuous pixel ``(u, v)`` of a face."""
    fwd, right, up = FACE_BASES[face]
    a = 2.0 * (np.asarray(u, dtype=np.float64) + 0.5) / resolution - 1.0
    b = 1.0 - 2.0 * (np.asarray(v, dtype=np.float64) + 0.5) / resolution
    d = fwd + a[..., None] * right + b[..., None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def face_pixel_dirs(resolution: int) -> np.ndarray:
    """``(6, R, R, 3)`` unit directions of every face pixel centre."""
    v, u = np.meshgrid(np.arange(resolution, dtype=np.float64), np.arange(resolution, dtype=np.float64), indexing="ij")
    return np.stack([face_uv_to_dir(f, u, v, resolution) for f in range(6)])


# ------------------------------------------------------------------ padding


def _border_sources(resolution: int):
    """Yield ``(face, side, k, src_face, src_row, src_col)`` for every border pixel."""
    r = resolution
    for fi, key in enumerate(FACE_KEYS):
        for side in SIDES:
            nkey, kind, edge, rev = EDGE_TABLE[(key, side)]
            g = FACE_KEYS.index(nkey)
            ks = np.arange(r)
            src_k = r - 1 - ks if rev else ks
            fixed = np.full(r, edge % r)
            if kind == "col":
                yield fi, side, ks, g, src_k, fixed
            else:
                yield fi, side, ks, g, fixed, src_k


def _border_dest(side: str, ks: np.ndarray, resolution: int):
    """Padded coordinates of border pixels ``ks`` along ``side``."""
    r = resolution
    if side == "left":
        return ks + 1, np.zeros_like(ks)
    if side == "right":
        return ks + 1, np.full_like(ks, r + 1)
    if side == "top":
        return np.zeros_like(ks), ks + 1
    return np.full_like(ks, r + 1), ks + 1


_CORNERS = (  # padded corner -> its two adjacent border cells (offsets relative to R)
    ((0, 0), (0, 1), (1, 0)),
    ((0, -1), (0, -2), (1, -1)),
    ((-1, 0), (-2, 0), (-1, 1)),
    ((-1, -1), (-2, -1), (-1, -2)),
)


def pad_faces(f: CubemapFaceSet) -> CubemapFaceSet:
    """Add a 1-pixel border copied from the four neighbouring faces.

    Corners take the mean of their two adjacent border cells.
    """
    if f.pad != 0:
        raise ValueError("faces are already padded")
    r, c = f.resolution, f.channels
    out = np.zeros((6, r + 2, r + 2, c))
    out[:, 1:-1, 1:-1] = f.faces
    for fi, side, ks, g, sr, sc in _border_sources(r):
        dy, dx = _border_dest(side, ks, r)
        out[fi, dy, dx] = f.faces[g, sr, sc]
    for corner, a, b in _CORNERS:
        out[:, corner[0], corner[1]] = 0.5 * (out[:, a[0], a[1]] + out[:, b[0], b[1]])
    return CubemapFaceSet(out, pad=1)


def pad_faces_backward(grad_padded: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`pad_faces`: fold border gradients back onto face samples."""
    g = np.array(grad_padded, dtype=np.float64, copy=True)
    r = g.shape[1] - 2
    for corner, a, b in _CORNERS:
        half = 0.5 * g[:, corner[0], corner[1]]
        g[:, a[0], a[1]] += half
        g[:, b[0], b[1]] += half
    out = np.array(g[:, 1:-1, 1:-1], copy=True)
    for fi, side, ks, gi, sr, sc in _border_sources(r):
        dy, dx = _border_dest(side, ks, r)
        np.add.at(out[gi], (sr, sc), g[fi, dy, dx])
    return out


# ------------------------------------------------------------------ stitching


class StitchPlan:
    """Precomputed bilinear taps mapping ERP pixels onto padded cubemap faces."""

    def __init__(self, width: int, height: int, resolution: int):
        if width != 2 * height:
            raise ValueError("stitching needs W == 2H")
        self.width, self.height, self.resolution = width, height, resolution
        dirs = erp_directions(width, height).reshape(-1, 3)
        f, u, v = dir_to_face_uv(dirs, resolution)
        # padded coordinates lie in [0.5, R + 0.5]; taps stay inside the padded raster
        up = u + 1.0
        vp = v + 1.0
        x0 = np.clip(np.floor(up).astype(np.int64), 0, resolution)
        y0 = np.clip(np.floor(vp).astype(np.int64), 0, resolution)
        self.face = f
        self.x0, self.y0 = x0, y0
        self.fx = up - x0
        self.fy = vp - y0

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.face, self.x0, self.y0, self.fx, self.fy))

    def _taps(self):
        f, x0, y0, fx, fy = self.face, self.x0, self.y0, self.fx, self.fy
        return (
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x0 + 1, (1.0 - fy) * fx),
            (y0 + 1, x0, fy * (1.0 - fx)),
            (y0 + 1, x0 + 1, fy * fx),
        )

    def stitch(self, faces: CubemapFaceSet) -> np.ndarray:
        if faces.pad != 1:
            raise ValueError("stitch needs padded faces (pad=1)")
        if faces.resolution != self.resolution:
            raise ValueError("face resolution does not match the plan")
        p = faces.faces
        f, x0, y0, fx, fy = self.face, self.x0, self.y0, self.fx[:, None], self.fy[:, None]
        top = p[f, y0, x0] * (1.0 - fx) + p[f, y0, x0 + 1] * fx
        bot = p[f, y0 + 1, x0] * (1.0 - fx) + p[f, y0 + 1, x0 + 1] * fx
        out = top * (1.0 - fy) + bot * fy
        return out.reshape(self.height, self.width, -1)

    def stitch_backward(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`stitch` w.r.t. the padded faces, ``(6, R+2, R+2, C)``."""
        s = self.resolution + 2
        g = np.asarray(grad, dtype=np.float64).reshape(self.height * self.width, -1)
        c = g.shape[1]
        out = np.zeros((6 * s * s, c))
        for yy, xx, wgt in self._taps():
            idx = (self.face * s + yy) * s + xx
            for ch in range(c):
                out[:, ch] += np.bincount(idx, weights=wgt * g[:, ch], minlength=6 * s * s)
        return out.reshape(6, s, s, c)

    @cached_property
    def _face_maps(self):
        """Per face: (ERP pixel, weight, face-sample index) triples of the full
        stitch-after-pad operator restricted to that face's samples."""
        r = self.resolution
        s = r + 2
        # padded cell -> list of (source face, source flat index, weight)
        src_face = np.full((6, s, s, 2), -1, dtype=np.int64)
        src_idx = np.zeros((6, s, s, 2), dtype=np.int64)
        src_w = np.zeros((6, s, s, 2))
        yy, xx = np.meshgrid(np.arange(r), np.arange(r), indexing="ij")
        for fi in range(6):
            src_face[fi, 1:-1, 1:-1, 0] = fi
            src_idx[fi, 1:-1, 1:-1, 0] = yy * r + xx
            src_w[fi, 1:-1, 1:-1, 0] = 1.0
        for fi, side, ks, g, sr, sc in _border_sources(r):
            dy, dx = _border_dest(side, ks, r)
            src_face[fi, dy, dx, 0] = g
            src_idx[fi, dy, dx, 0] = sr * r + sc
            src_w[fi, dy, dx, 0] = 1.0
        for corner, a, b in _CORNERS:
            src_face[:, corner[0], corner[1], 0] = src_face[:, a[0], a[1], 0]
            src_idx[:, corner[0], corner[1], 0] = src_idx[:, a[0], a[1], 0]
            src_face[:, corner[0], corner[1], 1] = src_face[:, b[0], b[1], 0]
            src_idx[:, corner[0], corner[1], 1] = src_idx[:, b[0], b[1], 0]
            src_w[:, corner[0], corner[1]] = 0.5
        pix = np.arange(self.height * self.width)
        rows, cols, wts, fcs = [], [], [], []
        for yy_, xx_, wgt in self._taps():
            for slot in range(2):
                sf = src_face[self.face, yy_, xx_, slot]
                keep = sf >= 0
                rows.append(pix[keep])
                cols.append(src_idx[self.face, yy_, xx_, slot][keep])
                wts.append((wgt * src_w[self.face, yy_, xx_, slot])[keep])
                fcs.append(sf[keep])
        rows, cols, wts, fcs = (np.concatenate(a) for a in (rows, cols, wts, fcs))
        return [(rows[fcs == fi], wts[fcs == fi], cols[fcs == fi]) for fi in range(6)]

    def face_adjoint(self, grad: np.ndarray, face: int) -> np.ndarray:
        """Gradient of ``stitch(pad_faces(.))`` w.r.t. one unpadded face, ``(R, R, C)``."""
        r = self.resolution
        g = np.asarray(grad, dtype=np.float64).reshape(self.height * self.width, -1)
        rows, wts, cols = self._face_maps[face]
        out = np.zeros((r * r, g.shape[1]))
        for ch in range(g.shape[1]):
            out[:, ch] = np.bincount(cols, weights=wts * g[rows, ch], minlength=r * r)
        return out.reshape(r, r, -1)

    def face_erp_pixels(self, face: int) -> np.ndarray:
        """ERP pixels whose stitched value depends on ``face``."""
        return np.unique(self._face_maps[face][0])


def stitch(faces: CubemapFaceSet, width: int, height: int) -> np.ndarray:
    return StitchPlan(width, height, faces.resolution).stitch(faces)


def erp_to_cubemap(img: np.ndarray, resolution: int) -> CubemapFaceSet:
    """Bilinearly resample an ERP raster onto the six faces."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    dirs = face_pixel_dirs(resolution)
    u, v = dir_to_pixel(dirs, w, h)
    return CubemapFaceSet(sample_erp(img, u, v), pad=0)


__all__ = [
    "FACE_KEYS",
    "FACE_BASES",
    "EDGE_TABLE",
    "CubemapFaceSet",
    "StitchPlan",
    "dir_to_face_uv",
    "face_index",
    "face_pixel_dirs",
    "face_uv_to_dir",
    "pad_faces",
    "pad_faces_backward",
    "stitch",
    "erp_to_cubemap",
]
