import numpy as np
import pytest

from nirflow.synth import SceneConfig, generate, max_displacement, parse_motion


def test_parse_motion():
    m = parse_motion("translation:1,2+rotation:3+bump:1,-1")
    assert m.translation == (1.0, 2.0) and m.rotation_deg == 3.0
    assert m.bumps == [(1.0, -1.0, 0.5, 0.5, 20.0)]
    assert parse_motion("identity").translation == (0.0, 0.0)
    with pytest.raises(ValueError):
        parse_motion("shear:1")


def test_translation_gives_constant_flow():
    seq = generate(SceneConfig(width=40, height=30, motion=parse_motion("translation:2,0")))
    assert np.all(seq.flows[0].u == 2.0) and np.all(seq.flows[0].v == 0.0)


def test_identity_gives_identical_frames():
    seq = generate(SceneConfig(width=40, height=30, motion=parse_motion("identity"), n_frames=3))
    assert np.array_equal(seq.frames[0].visible, seq.frames[2].visible)
    assert np.array_equal(seq.frames[0].nir, seq.frames[1].nir)
    assert all(not f.u.any() and not f.v.any() for f in seq.flows)


def test_frames_follow_the_flow():
    # frame 2 sampled at x + w(x) reproduces frame 1 for a pure translation by whole pixels
    seq = generate(SceneConfig(width=48, height=32, motion=parse_motion("translation:3,1")))
    a, b = seq.frames
    assert np.allclose(a.nir[:-1, :-3], b.nir[1:, 3:], atol=1e-12)
    assert np.allclose(a.visible[:-1, :-3], b.visible[1:, 3:], atol=1e-12)


def test_seeded_and_deterministic():
    cfg = SceneConfig(width=32, height=24, noise=0.01, seed=5)
    a, b = generate(cfg), generate(cfg)
    assert np.array_equal(a.frames[1].nir, b.frames[1].nir)
    c = generate(SceneConfig(width=32, height=24, noise=0.01, seed=6))
    assert not np.array_equal(a.frames[0].nir, c.frames[0].nir)


def test_halves_layout():
    seq = generate(SceneConfig(width=64, height=32, layout="halves"))
    vis = seq.frames[0].visible
    nir = seq.frames[0].nir
    # one half has flat visible channels, the other flat NIR
    flat_vis = vis.std(axis=(0, 2))
    flat_nir = nir.std(axis=0)
    assert (flat_vis < 1e-9).sum() > 20 and (flat_nir < 1e-9).sum() > 20


def test_max_displacement():
    seq = generate(SceneConfig(width=32, height=24, motion=parse_motion("translation:3,4")))
    assert max_displacement(seq) == pytest.approx(5.0)
