"""Detail-aware per-pixel weight between the NIR and visible data terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import DimensionMismatchError, sobel_gradient, write_pnm_u8

DEFAULT_STEEPNESS = 10.0
DEFAULT_MIDPOINT = 0.5
DEGENERATE_GRADIENT = 1e-8


@dataclass(frozen=True)
class WeightMap:
    lam: np.ndarray

    @property
    def height(self) -> int:
        return self.lam.shape[0]

    @property
    def width(self) -> int:
        return self.lam.shape[1]

    @classmethod
    def constant(cls, height: int, width: int, value: float) -> "WeightMap":
        return cls(np.full((height, width), float(value)))


def lambda_from_gradients(grad_visible, grad_nir, a: float = DEFAULT_STEEPNESS,
                          b: float = DEFAULT_MIDPOINT) -> np.ndarray:
    """Logistic weight from visible / NIR gradient magnitudes.

    Where both magnitudes vanish (sum below 1e-8) the ratio is taken as ``b``,
    which gives exactly 0.5.
    """
    gv = np.asarray(grad_visible, dtype=np.float64)
    gn = np.asarray(grad_nir, dtype=np.float64)
    denom = gv + gn
    flat = denom < DEGENERATE_GRADIENT
    ratio = np.where(flat, b, gn / np.where(flat, 1.0, denom))
    return 1.0 / (1.0 + np.exp(-a * (ratio - b)))


def compute_lambda(visible, nir, a: float = DEFAULT_STEEPNESS,
                   b: float = DEFAULT_MIDPOINT) -> WeightMap:
    """Weight map for the first frame of a pair.

    ``visible`` is ``(H, W)`` or ``(H, W, C)``; ``nir`` is ``(H, W)``.
    Gradient magnitudes come from the normalized Sobel pair; for colour input
    the magnitude is the Euclidean norm over all channel gradients.
    """
    if a <= 0:
        raise ValueError("steepness a must be positive")
    if not 0.0 <= b <= 1.0:
        raise ValueError("midpoint b must lie in [0, 1]")
    visible = np.asarray(visible, dtype=np.float64)
    nir = np.asarray(nir, dtype=np.float64)
    if visible.shape[:2] != nir.shape[:2]:
        raise DimensionMismatchError(
            f"visible {visible.shape[:2]} and nir {nir.shape[:2]} frames differ in size")
    gv = sobel_gradient(visible).magnitude
    gn = sobel_gradient(nir).magnitude
    return WeightMap(lambda_from_gradients(gv, gn, a, b))


def write_lambda_debug(weights: WeightMap, path) -> None:
    write_pnm_u8(path, np.rint(np.clip(weights.lam, 0.0, 1.0) * 255.0).astype(np.uint8))
