"""Raster and flow-field types, bicubic sampling, Sobel gradients and file I/O.

Rasters are plain float64 numpy arrays in ``(H, W)`` or ``(H, W, C)`` layout
with intensities in [0, 1].  Flow fields keep ``u`` and ``v`` as separate
``(H, W)`` arrays; unknown / occluded pixels carry :data:`UNKNOWN_FLOW`.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

UNKNOWN_FLOW = 1e10
UNKNOWN_THRESHOLD = 1e9
FLOW_MAGIC = b"PIEH"


class ImageFormatError(ValueError):
    """Raised for unreadable or unsupported raster / flow files."""


class DimensionMismatchError(ValueError):
    """Raised when rasters that must be aligned have different shapes."""


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultispectralImage:
    """Aligned visible (1-3 channels) and optional NIR rasters of one frame."""

    visible: np.ndarray
    nir: Optional[np.ndarray] = None

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.float64)
        if vis.ndim == 2:
            vis = vis[:, :, None]
        if vis.ndim != 3 or not 1 <= vis.shape[2] <= 3:
            raise ValueError(f"visible raster must have 1-3 channels, got shape {vis.shape}")
        _check_unit_range(vis, "visible")
        vis.setflags(write=False)
        object.__setattr__(self, "visible", vis)
        if self.nir is not None:
            nir = np.asarray(self.nir, dtype=np.float64)
            if nir.ndim == 3 and nir.shape[2] == 1:
                nir = nir[:, :, 0]
            if nir.shape != vis.shape[:2]:
                raise DimensionMismatchError(
                    f"visible is {vis.shape[1]}x{vis.shape[0]} but nir is "
                    f"{nir.shape[-1]}x{nir.shape[0]}")
            _check_unit_range(nir, "nir")
            nir.setflags(write=False)
            object.__setattr__(self, "nir", nir)

    @property
    def height(self) -> int:
        return self.visible.shape[0]

    @property
    def width(self) -> int:
        return self.visible.shape[1]

    @property
    def has_nir(self) -> bool:
        return self.nir is not None


def _check_unit_range(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} raster contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} raster must lie in [0, 1]")


@dataclass
class FlowField:
    """Dense displacement field.  ``u`` is horizontal, ``v`` vertical, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise DimensionMismatchError("u and v must be 2-D arrays of equal shape")

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        return cls(np.full((height, width), float(u)), np.full((height, width), float(v)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return valid_mask(self.u, self.v)

    def copy(self) -> "FlowField":
        return FlowField(self.u.copy(), self.v.copy())

    def stacked(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)


def valid_mask(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """True where both components are finite and below the unknown threshold."""
    with np.errstate(invalid="ignore"):
        return (np.abs(u) < UNKNOWN_THRESHOLD) & (np.abs(v) < UNKNOWN_THRESHOLD)


# ---------------------------------------------------------------------------
# raster I/O (binary PGM / PPM)
# ---------------------------------------------------------------------------

def _read_pnm_header(data: bytes) -> tuple[str, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    pos += 1
    magic = tokens[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise ImageFormatError(f"malformed PNM header: {exc}") from None
    return magic, width, height, maxval, pos


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file, returning intensities scaled to [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from None
    magic, width, height, maxval, offset = _read_pnm_header(data)
    if magic not in ("P5", "P6"):
        raise ImageFormatError(f"{path}: unsupported PNM type {magic!r}")
    if maxval not in (255, 65535):
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (need 255 or 65535)")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    channels = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated raster payload")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    img = raw.astype(np.float64) / maxval
    if channels == 3:
        return img.reshape(height, width, 3)
    return img.reshape(height, width)


def write_pnm(path: str | os.PathLike, img: np.ndarray, bits: int = 8) -> None:
    """Write a [0, 1] raster as binary PGM (2-D) or PPM (3 channels)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 3 and img.shape[2] != 3:
        raise ValueError("PPM output needs exactly 3 channels")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    payload = q.astype(">u2" if bits == 16 else "u1").tobytes()
    magic = "P6" if img.ndim == 3 else "P5"
    header = f"{magic}\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_pnm_u8(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an already-quantized uint8 raster."""
    img = np.asarray(img, dtype=np.uint8)
    magic = "P6" if img.ndim == 3 else "P5"
    header = f"{magic}\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + img.tobytes())


def load_image(path: str | os.PathLike, role: str = "visible") -> np.ndarray:
    """Load one raster for the given role.

    ``visible`` rasters come back as ``(H, W, C)``; ``nir`` rasters must be
    single-channel and come back as ``(H, W)``.
    """
    if role not in ("visible", "nir"):
        raise ValueError(f"unknown raster role {role!r}")
    img = read_pnm(path)
    if role == "nir":
        if img.ndim == 3:
            raise ImageFormatError(f"{path}: NIR raster must be single-channel")
        return img
    return img if img.ndim == 3 else img[:, :, None]


def load_multispectral(visible_path, nir_path=None) -> MultispectralImage:
    vis = load_image(visible_path, "visible")
    nir = load_image(nir_path, "nir") if nir_path is not None else None
    return MultispectralImage(vis, nir)


# ---------------------------------------------------------------------------
# flow I/O
# ---------------------------------------------------------------------------

def write_flow(flow: FlowField, path: str | os.PathLike) -> None:
    """Write a flow field in the PIEH interchange format."""
    h, w = flow.shape
    if h <= 0 or w <= 0:
        raise ValueError("flow field dimensions must be positive")
    if not (np.all(np.isfinite(flow.u)) and np.all(np.isfinite(flow.v))):
        raise ValueError("flow contains non-finite values; mark unknown pixels with UNKNOWN_FLOW")
    valid = flow.valid
    u = np.where(valid, flow.u, UNKNOWN_FLOW)
    v = np.where(valid, flow.v, UNKNOWN_FLOW)
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = u
    data[..., 1] = v
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flow(path: str | os.PathLike) -> FlowField:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise ImageFormatError(f"{path}: bad flow magic")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: invalid flow dimensions {w}x{h}")
    need = w * h * 2 * 4
    if len(data) - 12 < need:
        raise ImageFormatError(f"{path}: truncated flow payload")
    arr = np.frombuffer(data, dtype="<f4", count=w * h * 2, offset=12).reshape(h, w, 2)
    return FlowField(arr[..., 0].astype(np.float64), arr[..., 1].astype(np.float64))


# ---------------------------------------------------------------------------
# bicubic (Catmull-Rom) sampling
# ---------------------------------------------------------------------------

def out_of_bounds(shape: tuple[int, int], xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample positions outside the pixel-centre domain [0, W-1] x [0, H-1]."""
    h, w = shape[:2]
    return (xs < 0) | (xs > w - 1) | (ys < 0) | (ys > h - 1)


def bicubic_sample(img: np.ndarray, xs, ys, derivatives: bool = False):
    """Sample ``img`` at real coordinates with clamped-edge Catmull-Rom.

    Returns ``(values, oob)`` or, with ``derivatives=True``,
    ``(values, d/dx, d/dy, oob)`` where the derivatives are those of the
    interpolant itself.  Trailing channel axes of ``img`` are preserved.
    """
    from . import _kernels

    img = np.asarray(img, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = img.shape[:2]
    chan_shape = img.shape[2:]
    flat = np.ascontiguousarray(img.reshape(h, w, -1))
    out_shape = xs.shape + chan_shape
    val, dx, dy = _kernels.bicubic(flat, np.ascontiguousarray(xs.ravel()),
                                   np.ascontiguousarray(ys.ravel()), derivatives)
    oob = out_of_bounds((h, w), xs, ys)
    if not derivatives:
        return val.reshape(out_shape), oob
    return val.reshape(out_shape), dx.reshape(out_shape), dy.reshape(out_shape), oob


def sample_bicubic(raster: np.ndarray, x: float, y: float):
    """Scalar convenience wrapper: returns ``(value, out_of_bounds)``."""
    val, oob = bicubic_sample(raster, np.array([x]), np.array([y]))
    return val[0], bool(oob[0])


def resize_bicubic(img: np.ndarray, new_height: int, new_width: int) -> np.ndarray:
    """Resample onto a new grid with pixel-centre alignment."""
    h, w = img.shape[:2]
    sx = w / new_width
    sy = h / new_height
    xs = (np.arange(new_width) + 0.5) * sx - 0.5
    ys = (np.arange(new_height) + 0.5) * sy - 0.5
    gx, gy = np.meshgrid(xs, ys)
    val, _ = bicubic_sample(img, gx, gy)
    return val


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

_DIFF = np.array([-1.0, 0.0, 1.0])
_SMOOTH = np.array([1.0, 2.0, 1.0]) / 4.0


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        """Euclidean norm over both directions and all channels."""
        sq = self.gx ** 2 + self.gy ** 2
        if sq.ndim == 3:
            sq = sq.sum(axis=2)
        return np.sqrt(sq)


def sobel_gradient(raster: np.ndarray) -> GradientField:
    """3x3 Sobel pair (weights /4) per channel with replicated edges."""
    img = np.asarray(raster, dtype=np.float64)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError("image smaller than the 3x3 Sobel kernel")
    # difference first, then smooth: exact zeros on constant regions
    gx = ndimage.correlate1d(ndimage.correlate1d(img, _DIFF, axis=1, mode="nearest"),
                             _SMOOTH, axis=0, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(img, _DIFF, axis=0, mode="nearest"),
                             _SMOOTH, axis=1, mode="nearest")
    return GradientField(gx, gy)


def central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated edges.

    Matches the derivative of the Catmull-Rom interpolant at grid nodes.
    """
    img = np.asarray(img, dtype=np.float64)
    xp = np.concatenate([img[:, 1:], img[:, -1:]], axis=1)
    xm = np.concatenate([img[:, :1], img[:, :-1]], axis=1)
    yp = np.concatenate([img[1:], img[-1:]], axis=0)
    ym = np.concatenate([img[:1], img[:-1]], axis=0)
    return 0.5 * (xp - xm), 0.5 * (yp - ym)
