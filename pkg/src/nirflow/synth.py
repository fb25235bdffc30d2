"""Synthetic RGB-NIR sequences with exact ground-truth flow.

The scene lives in "material" coordinates.  Frame ``k`` shows the material
point ``m`` at image position ``m + k * w(m)``, where ``w`` is a smooth
forward displacement field, so the exact flow between frames ``k`` and
``k + 1`` at image pixel ``y`` is ``w(m_k(y))``.

Visible channels carry band-limited texture; NIR carries a dye-like speckle
of small dark Gaussian dots plus a weak copy of the scene texture.  Either
texture can be switched off per half-image to build featureless regions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imagecore import FlowField, MultispectralImage


@dataclass
class Motion:
    translation: tuple[float, float] = (0.0, 0.0)
    rotation_deg: float = 0.0
    # each bump: (amplitude_u, amplitude_v, centre_x_frac, centre_y_frac, sigma_px)
    bumps: list = field(default_factory=list)

    def flow_at(self, x, y, width, height):
        u = np.full(np.shape(x), float(self.translation[0]))
        v = np.full(np.shape(x), float(self.translation[1]))
        if self.rotation_deg:
            cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
            t = np.deg2rad(self.rotation_deg)
            dx, dy = x - cx, y - cy
            u = u + (np.cos(t) - 1.0) * dx - np.sin(t) * dy
            v = v + np.sin(t) * dx + (np.cos(t) - 1.0) * dy
        for au, av, fx, fy, s in self.bumps:
            g = np.exp(-((x - fx * (width - 1)) ** 2 + (y - fy * (height - 1)) ** 2) / (2.0 * s * s))
            u = u + au * g
            v = v + av * g
        return u, v


def parse_motion(text: str) -> Motion:
    """``translation:U,V``, ``rotation:DEG``, ``bump:AU,AV[,CX,CY,SIGMA]``, ``identity``; join with ``+``."""
    m = Motion()
    tx = ty = 0.0
    for part in text.split("+"):
        part = part.strip()
        if not part or part == "identity":
            continue
        kind, _, args = part.partition(":")
        vals = [float(a) for a in args.split(",") if a.strip()]
        if kind == "translation" and len(vals) == 2:
            tx += vals[0]
            ty += vals[1]
        elif kind == "rotation" and len(vals) == 1:
            m.rotation_deg += vals[0]
        elif kind == "bump" and len(vals) in (2, 5):
            if len(vals) == 2:
                vals += [0.5, 0.5, 20.0]
            m.bumps.append(tuple(vals))
        else:
            raise ValueError(f"cannot parse motion component {part!r}")
    m.translation = (tx, ty)
    return m


@dataclass
class SceneConfig:
    width: int = 256
    height: int = 192
    motion: Motion = field(default_factory=Motion)
    n_frames: int = 2
    layout: str = "full"            # "full" or "halves"
    rgb_contrast: float = 0.15
    nir_scene_gain: float = 0.3
    speckle_contrast: float = 0.6
    speckle_density: float = 0.12   # dots per pixel
    speckle_sigma: float = 1.0
    freq_band: tuple[float, float] = (0.015, 0.12)
    n_waves: int = 48
    rgb_blur: float = 0.0
    shadow: float = 0.0
    noise: float = 0.0
    seed: int = 0


@dataclass
class SyntheticSequence:
    frames: list
    flows: list
    config: SceneConfig


def _wave_params(rng, n, band):
    f = rng.uniform(band[0], band[1], n)
    ang = rng.uniform(0, 2 * np.pi, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.5, 1.0, n)
    return np.stack([f * np.cos(ang), f * np.sin(ang), phase, amp], axis=1)


def _texture(waves, mx, my):
    acc = np.zeros(mx.shape)
    for fx, fy, ph, a in waves:
        acc += a * np.cos(2 * np.pi * (fx * mx + fy * my) + ph)
    return acc / np.sqrt(0.5 * np.sum(waves[:, 3] ** 2))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _region_masks(layout, mx, width):
    if layout == "full":
        one = np.ones(mx.shape)
        return one, one
    if layout == "halves":
        # left half: NIR texture only; right half: visible texture only
        right = _smoothstep((mx - (width / 2.0 - 3.0)) / 6.0)
        return right, 1.0 - right
    raise ValueError(f"unknown layout {layout!r}")


def _material_coords(motion: Motion, k: int, width: int, height: int, iters: int = 60):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    if k == 0:
        return xs, ys
    mx, my = xs.copy(), ys.copy()
    for _ in range(iters):
        u, v = motion.flow_at(mx, my, width, height)
        nx, ny = xs - k * u, ys - k * v
        delta = max(np.abs(nx - mx).max(), np.abs(ny - my).max())
        mx, my = nx, ny
        if delta < 1e-12:
            break
    u, v = motion.flow_at(mx, my, width, height)
    if max(np.abs(mx + k * u - xs).max(), np.abs(my + k * v - ys).max()) > 1e-6:
        raise ValueError("motion field is not invertible (displacement gradient too large)")
    return mx, my


def _render_speckle(dots, amps, sigma, mx, my, motion, k, width, height):
    """Sum of Gaussian dots evaluated at each pixel's material coordinate."""
    h, w = mx.shape
    out = np.zeros(h * w)
    pu, pv = motion.flow_at(dots[:, 0], dots[:, 1], width, height)
    cx = dots[:, 0] + k * pu
    cy = dots[:, 1] + k * pv
    r = int(np.ceil(4 * sigma)) + 2
    offs = np.arange(-r, r + 1)
    ox, oy = np.meshgrid(offs, offs)
    px = np.rint(cx)[:, None] + ox.ravel()[None, :]
    py = np.rint(cy)[:, None] + oy.ravel()[None, :]
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    px = px.astype(np.intp)
    py = py.astype(np.intp)
    k_idx, o_idx = np.nonzero(inside)
    lin = py[k_idx, o_idx] * w + px[k_idx, o_idx]
    d2 = (mx.ravel()[lin] - dots[k_idx, 0]) ** 2 + (my.ravel()[lin] - dots[k_idx, 1]) ** 2
    np.add.at(out, lin, amps[k_idx] * np.exp(-d2 / (2 * sigma * sigma)))
    return np.minimum(out.reshape(h, w), 1.0)


def generate(config: SceneConfig) -> SyntheticSequence:
    """Render ``n_frames`` aligned RGB-NIR frames and the ``n_frames - 1`` exact flows."""
    c = config
    if c.n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(c.seed)
    w1 = _wave_params(rng, c.n_waves, c.freq_band)
    w2 = _wave_params(rng, c.n_waves, c.freq_band)
    gains = np.array([[1.0, 0.25], [0.85, -0.2], [0.7, 0.35]])
    # dots are seeded over a margin so content entering the frame is textured too
    margin = 8 + 2 * max(abs(c.motion.translation[0]), abs(c.motion.translation[1])) * max(c.n_frames - 1, 1)
    n_dots = int(c.speckle_density * (c.width + 2 * margin) * (c.height + 2 * margin))
    dots = np.column_stack([rng.uniform(-margin, c.width + margin, n_dots),
                            rng.uniform(-margin, c.height + margin, n_dots)])
    amps = rng.uniform(0.5, 1.0, n_dots)
    ys, xs = np.mgrid[0:c.height, 0:c.width].astype(np.float64)
    shadow = np.ones((c.height, c.width))
    if c.shadow > 0:
        cxs, cys = rng.uniform(0.2, 0.8) * c.width, rng.uniform(0.2, 0.8) * c.height
        rad = 0.35 * min(c.width, c.height)
        shadow = 1.0 - c.shadow * np.exp(-((xs - cxs) ** 2 + (ys - cys) ** 2) / (2 * rad * rad))
    noise_rng = np.random.default_rng(rng.integers(2 ** 63))

    frames = []
    flows = []
    for k in range(c.n_frames):
        mx, my = _material_coords(c.motion, k, c.width, c.height)
        t1 = _texture(w1, mx, my)
        t2 = _texture(w2, mx, my)
        rgb_mask, nir_mask = _region_masks(c.layout, mx, c.width)
        vis = np.empty((c.height, c.width, 3))
        for ch in range(3):
            tex = gains[ch, 0] * t1 + gains[ch, 1] * t2
            vis[..., ch] = 0.5 + c.rgb_contrast * rgb_mask * tex
        vis *= shadow[..., None]
        if c.rgb_blur > 0:
            vis = ndimage.gaussian_filter(vis, sigma=(c.rgb_blur, c.rgb_blur, 0), mode="nearest")
        speck = _render_speckle(dots, amps, c.speckle_sigma, mx, my, c.motion, k, c.width, c.height)
        # weak scene copy in NIR, kept out of the NIR-flat half of the split layout
        nir = 0.6 + c.nir_scene_gain * c.rgb_contrast * rgb_mask * nir_mask * t1 \
            - c.speckle_contrast * 0.5 * nir_mask * speck
        if c.noise > 0:
            vis = vis + noise_rng.normal(0, c.noise, vis.shape)
            nir = nir + noise_rng.normal(0, c.noise, nir.shape)
        frames.append(MultispectralImage(np.clip(vis, 0, 1), np.clip(nir, 0, 1)))
        if k + 1 < c.n_frames:
            u, v = c.motion.flow_at(mx, my, c.width, c.height)
            flows.append(FlowField(u, v))
    return SyntheticSequence(frames, flows, config)


def max_displacement(seq: SyntheticSequence) -> float:
    if not seq.flows:
        return 0.0
    return max(float(np.hypot(f.u, f.v).max()) for f in seq.flows)
