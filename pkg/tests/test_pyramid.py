import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from nirflow.imagecore import UNKNOWN_FLOW, FlowField, MultispectralImage
from nirflow.pyramid import build_pyramid, level_shapes, rescale_flow, smoothing_sigma


def test_first_level_dimensions():
    assert level_shapes(322, 432)[1] == (242, 324)


@given(st.integers(16, 700), st.integers(16, 700), st.sampled_from([0.5, 0.6, 0.75, 0.9]),
       st.sampled_from([8, 16, 24]))
def test_level_count(h, w, factor, min_size):
    if min(h, w) < min_size:
        with pytest.raises(ValueError):
            level_shapes(h, w, factor, min_size)
        return
    shapes = level_shapes(h, w, factor, min_size)
    # independent loop with the ceil rule
    n, a, b = 1, h, w
    while True:
        a2, b2 = math.ceil(a * factor), math.ceil(b * factor)
        if min(a2, b2) < min_size or (a2, b2) == (a, b):
            break
        n, a, b = n + 1, a2, b2
    assert len(shapes) == n
    # ceil keeps every level at least s * factor^k, so the unrounded closed form is a
    # lower bound unless the sequence stalled at a fixed point of ceil(a * factor)
    s = min(h, w)
    closed = math.floor(math.log(min_size / s) / math.log(factor)) + 1
    last = shapes[-1]
    stalled = (math.ceil(last[0] * factor), math.ceil(last[1] * factor)) == last
    assert stalled or n >= closed
    assert all(min(p) >= min_size for p in shapes)
    for (h0, w0), (h1, w1) in zip(shapes, shapes[1:]):
        assert (h1, w1) == (math.ceil(h0 * factor), math.ceil(w0 * factor))


def test_closed_form_level_count_without_rounding_effects():
    # 512 * 0.5^k is exact, so ceil changes nothing and the log formula is exact
    shapes = level_shapes(512, 512, 0.5, 16)
    assert len(shapes) == math.floor(math.log(16 / 512) / math.log(0.5)) + 1 == 6


def test_stops_before_min_size():
    assert level_shapes(20, 20, 0.75, 16) == [(20, 20)]


def test_bad_arguments():
    with pytest.raises(ValueError):
        level_shapes(100, 100, 1.0)
    with pytest.raises(ValueError):
        level_shapes(100, 100, 0.0)
    with pytest.raises(ValueError):
        level_shapes(10, 100)


def test_sigma():
    assert smoothing_sigma(0.5) == pytest.approx(0.5 * math.sqrt(3))


def test_constant_image_stays_constant():
    img = MultispectralImage(np.full((60, 80, 3), 0.3), np.full((60, 80), 0.8))
    pyr = build_pyramid(img, np.full((60, 80), 0.25))
    assert len(pyr) > 2
    for lev in pyr.levels:
        assert np.allclose(lev.visible, 0.3, atol=1e-10)
        assert np.allclose(lev.nir, 0.8, atol=1e-10)
        assert np.allclose(lev.lam, 0.25, atol=1e-10)


def test_mean_preserved():
    rng = np.random.default_rng(0)
    vis = ndimage.gaussian_filter(rng.random((90, 120)), 2)
    pyr = build_pyramid(MultispectralImage(vis))
    for lev in pyr.levels:
        assert abs(lev.visible.mean() - vis.mean()) < 1e-3
        assert lev.visible.shape[2] == 1


def test_lambda_clipped():
    rng = np.random.default_rng(1)
    lam = (rng.random((64, 64)) > 0.5).astype(float)
    pyr = build_pyramid(MultispectralImage(np.zeros((64, 64))), lam)
    for lev in pyr.levels:
        assert lev.lam.min() >= 0.0 and lev.lam.max() <= 1.0


def test_rescale_constant_width_only():
    out = rescale_flow(FlowField.constant(10, 8, 2.0, 0.0), 16, 10)
    assert out.shape == (10, 16)
    assert np.allclose(out.u, 4.0, atol=1e-10) and np.allclose(out.v, 0.0, atol=1e-10)


def test_rescale_zero():
    out = rescale_flow(FlowField.zeros(7, 9), 13, 5)
    assert np.all(out.u == 0) and np.all(out.v == 0)


def test_rescale_identity():
    f = FlowField(np.array([[1.0, 1.0], [3.0, 3.0]]), np.array([[1.0, 1.0], [3.0, 3.0]]))
    assert rescale_flow(f, 2, 2) == f


@given(st.floats(-20, 20), st.floats(-20, 20), st.integers(2, 40), st.integers(2, 40),
       st.integers(2, 40), st.integers(2, 40))
def test_rescale_exact_on_constants(u, v, h, w, nh, nw):
    out = rescale_flow(FlowField.constant(h, w, u, v), nw, nh)
    assert np.allclose(out.u, u * nw / w, atol=1e-10)
    assert np.allclose(out.v, v * nh / h, atol=1e-10)


def test_rescale_propagates_unknown_through_stencil():
    f = FlowField.zeros(12, 12)
    f.u[6, 6] = UNKNOWN_FLOW
    out = rescale_flow(f, 12, 12)
    bad = ~out.valid
    # identity grid: the 4x4 stencil of target x covers source x-1 .. x+2
    expect = np.zeros((12, 12), bool)
    expect[4:8, 4:8] = True
    assert np.array_equal(bad, expect)
    assert np.all(out.u[~bad] == 0)


def test_rescale_bad_target():
    with pytest.raises(ValueError):
        rescale_flow(FlowField.zeros(4, 4), 0, 4)
