import numpy as np
import pytest

from panosplat.deferred import (MODES, ParamLayout, PipelineSpec, bench_spec, cache_image_grad, init_theta,
                                memory_report, pipeline_loss, random_inputs, report_csv, run_mode)
from panosplat.gaussians import lattice_pyramid
from panosplat.render import RenderConfig


def small(head_width=32, tiles=2):
    return PipelineSpec(head_width=head_width, geo_width=16, levels=2, render=RenderConfig(32, 16, 12),
                        tiles=tiles, features=2, hidden=2, inv_depths=(0.3, 0.6))


def test_spec_validation():
    with pytest.raises(ValueError):
        PipelineSpec(head_width=30, levels=2)
    with pytest.raises(ValueError):
        PipelineSpec(geo_width=15, levels=2)
    assert small().level_dims(1) == (8, 16)


def test_layout_and_init():
    spec = small()
    lay = ParamLayout(spec)
    theta = init_theta(spec, 3)
    assert theta.size == lay.size == spec.levels * (lay.head_size + lay.lin_size)
    np.testing.assert_array_equal(theta, init_theta(spec, 3))
    assert not np.array_equal(theta, init_theta(spec, 4))
    w, b = lay.linear(theta, 1)
    assert w.shape == (spec.features, spec.decode.raw_size)
    sl = spec.decode.slices()
    assert np.all(b[sl["scale"]] == -4.0) and b[sl["quat"].start] == 1.0


def test_pack_level_skips_scalars():
    spec = small()
    lay = ParamLayout(spec)
    out = np.zeros(lay.size)
    lay.pack_level(1, 0.0, 0.0, np.ones(spec.decode.raw_size), out)
    assert out.sum() == spec.decode.raw_size
    _, b = lay.linear(out, 1)
    assert np.all(b == 1.0)


@pytest.mark.parametrize("head_width,tiles", [(32, 1), (32, 2), (64, 2)])
def test_modes_agree(head_width, tiles):
    spec = small(head_width, tiles)
    inputs = random_inputs(spec, 7)
    theta = init_theta(spec, 7)
    led = {m: run_mode(m, spec, inputs, theta) for m in MODES}
    ref = led["monolithic"].grads_theta
    assert np.abs(ref).max() > 0
    for m in ("one-step", "two-step"):
        np.testing.assert_allclose(led[m].grads_theta, ref, rtol=0, atol=1e-10 * max(1.0, np.abs(ref).max()))
        np.testing.assert_allclose(led[m].image, led["monolithic"].image, atol=1e-12)
        assert led[m].loss == pytest.approx(led["monolithic"].loss, abs=1e-14)
    for lg in led.values():
        assert lg.current_live_bytes == 0


def test_unknown_mode():
    spec = small()
    with pytest.raises(ValueError):
        run_mode("three-step", spec, random_inputs(spec), init_theta(spec))


def test_gradient_matches_finite_difference():
    spec = small()
    inputs = random_inputs(spec, 1)
    theta = init_theta(spec, 1)
    g = run_mode("two-step", spec, inputs, theta).grads_theta
    rng = np.random.default_rng(0)
    idx = rng.choice(theta.size, 12, replace=False)
    h = 1e-6
    ok = 0
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        (lp, dp), (lm, dm) = pipeline_loss(spec, inputs, tp), pipeline_loss(spec, inputs, tm)
        if dp != dm:
            ok += 1
            continue
        fd = (lp - lm) / (2 * h)
        ok += abs(fd - g[i]) <= 1e-3 * abs(fd) + 1e-8
    assert ok == len(idx)


def test_image_grad_shape_check():
    with pytest.raises(ValueError):
        cache_image_grad(np.zeros((2, 4, 3)), np.zeros((2, 2, 3)))


def test_memory_ordering_small():
    spec = bench_spec(64, tiles=4, geo_width=32, render_width=64, levels=3, hidden=8)
    rows = memory_report({"64": spec})
    peak = {r["mode"]: r["peak_live_bytes"] for r in rows}
    assert peak["two-step"] < peak["one-step"] < peak["monolithic"]
    text = report_csv(rows)
    assert text.splitlines()[0] == "mode,resolution,peak_live_bytes"
    assert len(text.splitlines()) == 4


def test_priors_accept_logit_or_raw_shapes():
    spec = small()
    inputs = random_inputs(spec, 2)
    theta = init_theta(spec, 2)
    base = pipeline_loss(spec, inputs, theta)[0]
    lats = lattice_pyramid(spec.geo_width, spec.levels)
    k = spec.decode.n_candidates
    for v in inputs.views:
        v.priors = [np.zeros((lat.n, k)) for lat in lats]
    assert pipeline_loss(spec, inputs, theta)[0] == base
    for v in inputs.views:
        v.priors = [np.zeros((lat.n, spec.decode.raw_size)) for lat in lats]
    assert pipeline_loss(spec, inputs, theta)[0] == base
    inputs.views[0].priors = [np.zeros((lat.n, 1)) for lat in lats]
    with pytest.raises(ValueError):
        pipeline_loss(spec, inputs, theta)
