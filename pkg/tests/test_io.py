import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panosplat import io
from panosplat.gaussians import DecodeConfig, build_pyramid
from panosplat.geometry import CameraPose, pyramid_counts, quat_from_axis_angle


def _file(width=16, levels=2, sh_degree=0, views=2, seed=0):
    cfg = DecodeConfig(width, (0.5, 1.0), sh_degree=sh_degree)
    rng = np.random.default_rng(seed)
    pyrs = []
    for v in range(views):
        raws = [rng.normal(size=(n, cfg.raw_size)) for n in pyramid_counts(width, levels)]
        pose = CameraPose(rng.normal(size=3), quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 3)))
        pyr = build_pyramid(raws, pose, cfg, view=v)
        # f32 payload: keep only values exactly representable so the round trip is bit-exact
        for g in pyr.levels:
            for a in g.arrays():
                a[...] = a.astype(np.float32)
        pyrs.append(pyr)
    return io.GaussianFile(width, pyrs, sh_degree)


@settings(max_examples=10)
@given(st.sampled_from([16, 32, 64]), st.integers(1, 3), st.integers(0, 1), st.integers(1, 3), st.integers(0, 99))
def test_psgp_round_trip(tmp_path_factory, width, levels, sh_degree, views, seed):
    path = tmp_path_factory.mktemp("g") / "g.psgp"
    gf = _file(width, levels, sh_degree, views, seed)
    io.write_psgp(path, gf)
    back = io.read_psgp(path)
    assert (back.width, back.levels, back.sh_degree) == (width, levels, sh_degree)
    for p, q in zip(gf.pyramids, back.pyramids):
        assert np.array_equal(p.pose.position, q.pose.position) and np.array_equal(p.pose.rotation, q.pose.rotation)
        for a, b in zip(p.levels, q.levels):
            assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    io.write_psgp(path.with_suffix(".2"), back)
    assert path.read_bytes() == path.with_suffix(".2").read_bytes()


def test_psgp_header_layout(tmp_path):
    path = tmp_path / "g.psgp"
    io.write_psgp(path, _file())
    raw = path.read_bytes()
    assert raw[:4] == b"PSGP"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 16, 2, 0, 2)
    assert struct.unpack_from("<2I", raw, 24) == (81, 20)
    assert len(raw) == 24 + 8 + 2 * 56 + 2 * 101 * 14 * 4


@pytest.mark.parametrize("mutate", ["magic", "version", "counts", "truncate", "extra", "sh"])
def test_psgp_rejects_corruption(tmp_path, mutate):
    path = tmp_path / "g.psgp"
    io.write_psgp(path, _file())
    raw = bytearray(path.read_bytes())
    if mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        struct.pack_into("<I", raw, 4, 9)
    elif mutate == "counts":
        struct.pack_into("<I", raw, 24, 80)
    elif mutate == "truncate":
        raw = raw[:-3]
    elif mutate == "extra":
        raw += b"\0" * 4
    elif mutate == "sh":
        struct.pack_into("<I", raw, 16, 5)
    path.write_bytes(bytes(raw))
    with pytest.raises(io.FormatError):
        io.read_psgp(path)


def test_psgp_validates_before_writing(tmp_path):
    gf = _file()
    gf.pyramids[0].levels[1] = gf.pyramids[0].levels[1].subset(slice(0, 5))
    with pytest.raises(io.DimensionError):
        io.write_psgp(tmp_path / "g.psgp", gf)
    with pytest.raises(io.FormatError):
        io.read_psgp(tmp_path / "missing.psgp")


def test_pfm_round_trip(tmp_path, rng):
    for shape in [(5, 10), (4, 8, 3)]:
        a = rng.uniform(0.1, 50, shape).astype(np.float32)
        io.write_pfm(tmp_path / "d.pfm", a)
        assert np.array_equal(io.read_pfm(tmp_path / "d.pfm"), a)
    with pytest.raises(io.DimensionError):
        io.write_pfm(tmp_path / "d.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "bad.pfm").write_bytes(b"P6\n1 1\n-1\n\0\0\0\0")
    with pytest.raises(io.FormatError):
        io.read_pfm(tmp_path / "bad.pfm")


def test_pfm_row_order(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    io.write_pfm(tmp_path / "d.pfm", a)
    body = (tmp_path / "d.pfm").read_bytes().split(b"\n", 3)[3]
    # PFM stores the bottom row first
    assert np.array_equal(np.frombuffer(body, "<f4"), [3, 4, 1, 2])


@pytest.mark.parametrize("bits", [8, 16])
def test_png_round_trip(tmp_path, rng, bits):
    peak = 2**bits - 1
    img = np.round(rng.uniform(size=(6, 12, 3)) * peak) / peak
    io.write_png(tmp_path / "a.png", img, bits)
    assert np.allclose(io.read_png(tmp_path / "a.png"), img, atol=1e-12)
    with pytest.raises(ValueError):
        io.write_png(tmp_path / "a.png", img, 12)


def test_png_errors(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(io.FormatError):
        io.read_png(tmp_path / "x.png")
    with pytest.raises(io.DimensionError):
        io.write_png(tmp_path / "y.png", np.zeros((2, 2, 4)))


def test_poses(tmp_path):
    poses = [CameraPose([1, 2, 3]), CameraPose([0, 0, 1], quat_from_axis_angle([0, 1, 0], 0.5))]
    io.write_poses(tmp_path / "p.json", poses)
    back = io.read_poses(tmp_path / "p.json")
    assert all(np.array_equal(a.position, b.position) and np.array_equal(a.rotation, b.rotation)
               for a, b in zip(poses, back))
    (tmp_path / "one.json").write_text(json.dumps(poses[0].to_dict()))
    assert len(io.read_poses(tmp_path / "one.json")) == 1
    (tmp_path / "bad.json").write_text('[{"position": [0, 0]}]')
    with pytest.raises(io.FormatError):
        io.read_poses(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(io.FormatError):
        io.read_poses(tmp_path / "broken.json")


def test_config(tmp_path):
    (tmp_path / "c.toml").write_text("width = 64\ntiles = 2\n")
    assert io.load_config(tmp_path / "c.toml") == {"width": 64, "tiles": 2}
    (tmp_path / "c.json").write_text('{"width": 32}')
    assert io.load_config(tmp_path / "c.json") == {"width": 32}
    (tmp_path / "l.json").write_text("[1]")
    with pytest.raises(io.FormatError):
        io.load_config(tmp_path / "l.json")
    (tmp_path / "b.toml").write_text("width = = 1")
    with pytest.raises(io.FormatError):
        io.load_config(tmp_path / "b.toml")
