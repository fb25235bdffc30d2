"""Fractional-factor image pyramids and flow rescaling between levels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .imagecore import UNKNOWN_FLOW, FlowField, MultispectralImage, bicubic_sample, resize_bicubic

DEFAULT_FACTOR = 0.75
DEFAULT_MIN_SIZE = 16


@dataclass
class PyramidLevel:
    visible: np.ndarray
    nir: Optional[np.ndarray]
    lam: Optional[np.ndarray]

    @property
    def shape(self) -> tuple[int, int]:
        return self.visible.shape[:2]


@dataclass
class Pyramid:
    levels: list[PyramidLevel] = field(default_factory=list)
    factor: float = DEFAULT_FACTOR

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


def smoothing_sigma(factor: float) -> float:
    return 0.5 * math.sqrt(1.0 / factor ** 2 - 1.0)


def level_shapes(height: int, width: int, factor: float = DEFAULT_FACTOR,
                 min_size: int = DEFAULT_MIN_SIZE) -> list[tuple[int, int]]:
    """Per-level ``(H, W)``, finest first, stopping before the shorter side drops below ``min_size``."""
    if not 0.0 < factor < 1.0:
        raise ValueError(f"pyramid factor must lie in (0, 1), got {factor}")
    if min(height, width) < min_size:
        raise ValueError(f"image {width}x{height} is smaller than min_size={min_size}")
    shapes = [(height, width)]
    while True:
        h, w = shapes[-1]
        nh, nw = math.ceil(h * factor), math.ceil(w * factor)
        if min(nh, nw) < min_size or (nh, nw) == (h, w):
            return shapes
        shapes.append((nh, nw))


def downsample(img: np.ndarray, new_height: int, new_width: int, factor: float) -> np.ndarray:
    """Gaussian anti-alias then bicubic resample."""
    sigma = smoothing_sigma(factor)
    spatial = (sigma, sigma) + (0,) * (img.ndim - 2)
    smoothed = ndimage.gaussian_filter(img, sigma=spatial, mode="nearest")
    return resize_bicubic(smoothed, new_height, new_width)


def build_pyramid(image: MultispectralImage, lam: Optional[np.ndarray] = None,
                  factor: float = DEFAULT_FACTOR,
                  min_size: int = DEFAULT_MIN_SIZE) -> Pyramid:
    shapes = level_shapes(image.height, image.width, factor, min_size)
    vis = image.visible
    nir = image.nir
    lam_k = None if lam is None else np.asarray(lam, dtype=np.float64)
    pyr = Pyramid([PyramidLevel(vis, nir, lam_k)], factor)
    for h, w in shapes[1:]:
        vis = downsample(vis, h, w, factor)
        nir = None if nir is None else downsample(nir, h, w, factor)
        if lam_k is not None:
            lam_k = np.clip(downsample(lam_k, h, w, factor), 0.0, 1.0)
        pyr.levels.append(PyramidLevel(vis, nir, lam_k))
    return pyr


def rescale_flow(flow: FlowField, new_width: int, new_height: int) -> FlowField:
    """Resample a flow onto another grid, converting displacements to target-grid pixels.

    Any target pixel whose 4x4 interpolation stencil touches an unknown
    source pixel becomes unknown.
    """
    if new_width <= 0 or new_height <= 0:
        raise ValueError("target dimensions must be positive")
    h, w = flow.shape
    valid = flow.valid
    u = np.where(valid, flow.u, 0.0)
    v = np.where(valid, flow.v, 0.0)
    xs = (np.arange(new_width) + 0.5) * (w / new_width) - 0.5
    ys = (np.arange(new_height) + 0.5) * (h / new_height) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    uv, _ = bicubic_sample(np.stack([u, v], axis=-1), gx, gy)
    nu = uv[..., 0] * (new_width / w)
    nv = uv[..., 1] * (new_height / h)
    if not valid.all():
        bad = _stencil_touches(~valid, gx, gy)
        nu = np.where(bad, UNKNOWN_FLOW, nu)
        nv = np.where(bad, UNKNOWN_FLOW, nv)
    return FlowField(nu, nv)


def _stencil_touches(mask: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    x0 = np.floor(np.clip(gx, -1.0, w)).astype(np.intp)
    y0 = np.floor(np.clip(gy, -1.0, h)).astype(np.intp)
    hit = np.zeros(gx.shape, dtype=bool)
    for dy in (-1, 0, 1, 2):
        rows = np.clip(y0 + dy, 0, h - 1)
        for dx in (-1, 0, 1, 2):
            hit |= mask[rows, np.clip(x0 + dx, 0, w - 1)]
    return hit
