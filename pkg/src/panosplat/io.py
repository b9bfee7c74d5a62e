"""File formats: PNG images, PFM depth maps, pose JSON, configs and the PSGP Gaussian file."""
from __future__ import annotations

import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

from .gaussians import GaussianPyramid, GaussianSet, lattice_pyramid, sh_coeff_count
from .geometry import CameraPose, pyramid_counts

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class FormatError(ValueError):
    """A file is unreadable or does not follow its format."""


class DimensionError(ValueError):
    """Inputs are well formed but their sizes disagree."""


# ------------------------------------------------------------------ PNG


def read_png(path) -> np.ndarray:
    """RGB image as float64 in ``[0, 1]``; grey is replicated and alpha dropped."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except (png.Error, OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    planes = info["planes"]
    img = data.reshape(h, w, planes).astype(np.float64) / (2 ** info["bitdepth"] - 1)
    if info.get("alpha"):
        img = img[..., :-1]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Quantise ``img`` (values clipped to ``[0, 1]``) to an 8- or 16-bit RGB PNG."""
    if bits not in (8, 16):
        raise ValueError("PNG bit depth must be 8 or 16")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) image, got {img.shape}")
    peak = 2**bits - 1
    q = np.round(np.clip(img, 0.0, 1.0) * peak).astype(np.uint16 if bits == 16 else np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=False, bitdepth=bits).write_array(f, q.reshape(-1))


# ------------------------------------------------------------------ PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; 2-D arrays become greyscale ``Pf``, ``(H, W, 3)`` colour ``PF``."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise DimensionError(f"PFM holds (H, W) or (H, W, 3) arrays, got {a.shape}")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """PFM as float32 ``(H, W)`` or ``(H, W, 3)``, top row first."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise FormatError(f"{path}: not a PFM file")
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    c = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) != w * h * c * 4:
        raise FormatError(f"{path}: payload is {len(body)} bytes, header implies {w * h * c * 4}")
    a = np.frombuffer(body, dtype=dtype).reshape((h, w, c) if c == 3 else (h, w))
    return a[::-1].astype(np.float32)


# ------------------------------------------------------------------ poses and configs


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def read_poses(path) -> list[CameraPose]:
    """A JSON list of ``{"position": [x, y, z], "quaternion": [w, x, y, z]}`` (a bare object is one pose)."""
    doc = load_json(path)
    if isinstance(doc, dict):
        doc = [doc]
    try:
        return [CameraPose.from_dict(d) for d in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad pose entry ({exc})") from exc


def write_poses(path, poses) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses], indent=2))


def load_config(path) -> dict:
    """TOML or JSON config by file suffix."""
    p = Path(path)
    if p.suffix == ".toml":
        try:
            return tomllib.loads(p.read_text())
        except OSError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise FormatError(f"{path}: invalid TOML ({exc})") from exc
    doc = load_json(p)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a table")
    return doc


# ------------------------------------------------------------------ PSGP

MAGIC = b"PSGP"
VERSION = 1
_HEAD = struct.Struct("<4sIIIII")  # magic, version, width, levels, sh degree, views


@dataclass
class GaussianFile:
    """Per-view Gaussian pyramids on a common lattice.

    Header: magic, version, W, L, SH degree, view count, per-level counts (u32), then
    one pose per view (7 f64: position, quaternion). Payload: f32 records
    ``(mean 3, opacity 1, scale 3, quat 4, sh 3K)``, level-major, then view, then lattice order.
    """

    width: int
    pyramids: list  # list[GaussianPyramid]
    sh_degree: int = 0

    @property
    def levels(self) -> int:
        return len(self.pyramids[0].levels)

    @property
    def record_floats(self) -> int:
        return 11 + 3 * sh_coeff_count(self.sh_degree)

    def counts(self) -> list[int]:
        return pyramid_counts(self.width, self.levels)

    def validate(self) -> None:
        if not self.pyramids:
            raise DimensionError("no views to store")
        expect = self.counts()
        for p in self.pyramids:
            if p.counts != expect:
                raise DimensionError(f"level counts {p.counts} differ from lattice counts {expect}")
            for g in p.levels:
                if g.sh.shape[1] != sh_coeff_count(self.sh_degree):
                    raise DimensionError("SH coefficient count does not match the declared degree")


def _records(g: GaussianSet) -> np.ndarray:
    n = len(g)
    return np.concatenate([g.means, g.opacity[:, None], g.scales, g.quats, g.sh.reshape(n, -1)], axis=1)


def write_psgp(path, gf: GaussianFile) -> None:
    gf.validate()
    counts = gf.counts()
    head = _HEAD.pack(MAGIC, VERSION, gf.width, gf.levels, gf.sh_degree, len(gf.pyramids))
    head += struct.pack(f"<{len(counts)}I", *counts)
    poses = np.array([np.concatenate([p.pose.position, p.pose.rotation]) for p in gf.pyramids], dtype="<f8")
    body = [_records(p.levels[lvl]) for lvl in range(gf.levels) for p in gf.pyramids]
    with open(path, "wb") as f:
        f.write(head)
        f.write(poses.tobytes())
        f.write(np.concatenate(body).astype("<f4").tobytes())


def read_psgp(path) -> GaussianFile:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, levels, sh_degree, views = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        k = sh_coeff_count(sh_degree)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    off = _HEAD.size
    if views < 1 or levels < 1 or len(raw) < off + 4 * levels + 56 * views:
        raise FormatError(f"{path}: truncated header")
    counts = list(struct.unpack_from(f"<{levels}I", raw, off))
    off += 4 * levels
    try:
        expect = pyramid_counts(width, levels)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if counts != expect:
        raise FormatError(f"{path}: level counts {counts} do not match lattice counts {expect}")
    poses = np.frombuffer(raw, dtype="<f8", count=7 * views, offset=off).reshape(views, 7)
    off += 56 * views
    rec = 11 + 3 * k
    n_total = views * sum(counts)
    if len(raw) - off != 4 * rec * n_total:
        raise FormatError(f"{path}: payload is {len(raw) - off} bytes, header implies {4 * rec * n_total}")
    data = np.frombuffer(raw, dtype="<f4", offset=off).reshape(n_total, rec).astype(np.float64)
    lattices = lattice_pyramid(width, levels)
    per_view = [[None] * levels for _ in range(views)]
    i = 0
    for lvl in range(levels):
        for v in range(views):
            d = data[i:i + counts[lvl]]
            i += counts[lvl]
            per_view[v][lvl] = GaussianSet(d[:, :3], d[:, 3], d[:, 4:7], d[:, 7:11], d[:, 11:].reshape(-1, k, 3))
    try:
        pyrs = [GaussianPyramid(per_view[v], lattices, width, v, CameraPose(poses[v, :3], poses[v, 3:]))
                for v in range(views)]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return GaussianFile(width, pyrs, sh_degree)
