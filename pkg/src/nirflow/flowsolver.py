"""Coarse-to-fine minimization of the combined RGB-NIR flow energy.

The energy at every pixel is

    (1 - lam) * E_visible + lam * E_nir + gamma * E_smooth

with ``E_visible`` holding intensity and gradient constancy over the visible
channels, ``E_nir`` intensity constancy in NIR, and a first-order robust
smoothness term.  All penalties use ``phi(s2) = sqrt(s2 + eps^2)``.

Each pyramid level runs warping (outer) iterations.  An outer iteration
linearizes the data terms about the current warp, then alternates lagged
updates of the ``phi'`` weights (inner iterations) with SOR solves of the
resulting 5-point coupled system for the flow increment.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
from scipy import sparse

from . import _kernels
from .imagecore import (
    DimensionMismatchError,
    FlowField,
    MultispectralImage,
    bicubic_sample,
    central_gradient,
    out_of_bounds,
)
from .pyramid import build_pyramid, rescale_flow
from .weightmap import DEFAULT_MIDPOINT, DEFAULT_STEEPNESS, WeightMap, compute_lambda

log = logging.getLogger(__name__)

MODES = ("detail_aware", "fixed", "rgb_only", "nir_only")
MAX_STEP_HALVINGS = 3


class MissingChannelError(ValueError):
    """The requested mode needs a channel the input does not have."""


@dataclass
class SolverParams:
    gamma: float = 0.2
    theta: float = 0.5
    epsilon: float = 1e-3
    pyramid_factor: float = 0.75
    min_size: int = 16
    outer_iters: int = 5
    inner_iters: int = 5
    sor_iters: int = 30
    sor_omega: float = 1.9
    sor_tol: float = 1e-4
    sor_order: str = "red_black"
    mode: str = "detail_aware"
    fixed_lambda: float = 0.5
    lambda_a: float = DEFAULT_STEEPNESS
    lambda_b: float = DEFAULT_MIDPOINT
    lambda_per_level: bool = False
    step_control: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("gamma", "theta", "epsilon", "sor_omega", "sor_tol", "fixed_lambda",
                     "pyramid_factor", "lambda_a", "lambda_b"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.sor_omega < 2.0:
            raise ValueError("sor_omega must lie in (0, 2)")
        if not 0.0 < self.pyramid_factor < 1.0:
            raise ValueError("pyramid_factor must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError("fixed_lambda must lie in [0, 1]")
        if self.sor_order not in ("red_black", "sequential"):
            raise ValueError("sor_order must be 'red_black' or 'sequential'")
        for name in ("outer_iters", "inner_iters", "sor_iters", "min_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def needs_nir(self) -> bool:
        return self.mode != "rgb_only"

    @property
    def mode_label(self) -> str:
        if self.mode == "fixed":
            return f"fixed:{self.fixed_lambda:g}"
        return self.mode

    def to_dict(self) -> dict:
        return asdict(self)


def parse_mode(text: str) -> dict:
    """Translate the CLI spelling (``da``, ``fixed:0.5``, ``rgb``, ``nir``) into params fields."""
    text = text.strip().lower()
    if text in ("da", "detail_aware"):
        return {"mode": "detail_aware"}
    if text in ("rgb", "rgb_only"):
        return {"mode": "rgb_only"}
    if text in ("nir", "nir_only"):
        return {"mode": "nir_only"}
    if text.startswith("fixed:"):
        return {"mode": "fixed", "fixed_lambda": float(text.split(":", 1)[1])}
    raise ValueError(f"unrecognised mode {text!r}")


def load_params(path, **overrides) -> SolverParams:
    """Read ``key = value`` lines mirroring :class:`SolverParams` fields.

    The file may be headerless or carry a ``[solver]`` section (other
    sections are ignored).
    """
    with open(path) as fh:
        text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not text.lstrip().startswith("["):
        text = "[solver]\n" + text
    cp.read_string(text)
    if not cp.has_section("solver"):
        cp.add_section("solver")
    kinds = {f.name: f.type for f in fields(SolverParams)}
    values = {}
    for key, raw in cp["solver"].items():
        if key == "mode":
            values.update(parse_mode(raw))
            continue
        if key not in kinds:
            raise ValueError(f"unknown solver parameter {key!r} in {path}")
        kind = kinds[key]
        if kind == "bool":
            values[key] = cp["solver"].getboolean(key)
        elif kind == "int":
            values[key] = int(raw)
        elif kind == "float":
            values[key] = float(raw)
        else:
            values[key] = raw.strip()
    values.update(overrides)
    return SolverParams(**values)


@dataclass(frozen=True)
class EnergyBreakdown:
    """Pixel-sum energies.  ``e_visible``/``e_nir`` are unweighted; the
    ``*_weighted`` sums carry the per-pixel ``1 - lam`` / ``lam`` factors."""

    e_visible: float
    e_nir: float
    e_smooth: float
    e_visible_weighted: float
    e_nir_weighted: float
    e_total: float


# ---------------------------------------------------------------------------
# penalty
# ---------------------------------------------------------------------------

def phi(s2, eps):
    return np.sqrt(s2 + eps * eps)


def dphi(s2, eps):
    """Derivative of phi with respect to its argument ``s2``."""
    return 0.5 / np.sqrt(s2 + eps * eps)


# ---------------------------------------------------------------------------
# warping and energy
# ---------------------------------------------------------------------------

def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def _as_3d(img):
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def warp_image(image: np.ndarray, flow: FlowField):
    """Sample ``image`` at ``x + w(x)``.  Returns ``(warped, out_of_bounds)``."""
    if np.asarray(image).shape[:2] != flow.shape:
        raise DimensionMismatchError(f"image {np.asarray(image).shape[:2]} vs flow {flow.shape}")
    xs, ys = _grid(*flow.shape)
    return bicubic_sample(image, xs + flow.u, ys + flow.v)


def _gradient_stack(img3):
    """(H, W, C, 2) central-difference gradients of every channel."""
    gx = np.empty_like(img3)
    gy = np.empty_like(img3)
    for c in range(img3.shape[2]):
        gx[..., c], gy[..., c] = central_gradient(img3[..., c])
    return np.stack([gx, gy], axis=-1)


def _forward_diff(a):
    dx = np.zeros_like(a)
    dy = np.zeros_like(a)
    dx[:, :-1] = a[:, 1:] - a[:, :-1]
    dy[:-1, :] = a[1:, :] - a[:-1, :]
    return dx, dy


def smoothness_argument(u, v):
    ux, uy = _forward_diff(u)
    vx, vy = _forward_diff(v)
    return ux * ux + uy * uy + vx * vx + vy * vy


def _lambda_array(lam, shape):
    if isinstance(lam, WeightMap):
        lam = lam.lam
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        return np.full(shape, float(lam))
    if lam.shape != shape:
        raise DimensionMismatchError(f"weight map {lam.shape} vs images {shape}")
    return lam


def pixel_energies(V1, V2, N1, N2, u, v, params: SolverParams, grads=None):
    """Per-pixel ``(e_visible, e_nir, e_smooth, oob)``; data terms are zero off-image.

    ``grads`` optionally supplies precomputed ``(grad V1, grad V2)`` stacks.
    """
    eps = params.epsilon
    h, w = u.shape
    xs, ys = _grid(h, w)
    X, Y = xs + u, ys + v
    V1 = _as_3d(V1)
    V2 = _as_3d(V2)
    V2w, oob = bicubic_sample(V2, X, Y)
    ev = phi(((V2w - V1) ** 2).sum(axis=2), eps)
    if params.theta > 0:
        G1, G2 = grads if grads is not None else (_gradient_stack(V1), _gradient_stack(V2))
        G2w, _ = bicubic_sample(G2, X, Y)
        ev = ev + params.theta * phi(((G2w - G1) ** 2).sum(axis=(2, 3)), eps)
    ev = np.where(oob, 0.0, ev)
    if N1 is not None and N2 is not None:
        N2w, _ = bicubic_sample(N2, X, Y)
        en = np.where(oob, 0.0, phi((N2w - N1) ** 2, eps))
    else:
        en = np.zeros((h, w))
    es = phi(smoothness_argument(u, v), eps)
    return ev, en, es, oob


def _energy_from_arrays(V1, V2, N1, N2, u, v, lam, params, grads=None):
    ev, en, es, _ = pixel_energies(V1, V2, N1, N2, u, v, params, grads)
    e_vw = float(((1.0 - lam) * ev).sum())
    e_nw = float((lam * en).sum())
    e_s = float(es.sum())
    return EnergyBreakdown(
        e_visible=float(ev.sum()),
        e_nir=float(en.sum()),
        e_smooth=e_s,
        e_visible_weighted=e_vw,
        e_nir_weighted=e_nw,
        e_total=e_vw + e_nw + params.gamma * e_s,
    )


def evaluate_energy(I1: MultispectralImage, I2: MultispectralImage, flow: FlowField,
                    lambda_map, params: SolverParams) -> EnergyBreakdown:
    shape = (I1.height, I1.width)
    if (I2.height, I2.width) != shape or flow.shape != shape:
        raise DimensionMismatchError("images and flow must share dimensions")
    lam = _lambda_for_mode(I1, params, lambda_map)
    use_nir = I1.has_nir and I2.has_nir and params.mode != "rgb_only"
    return _energy_from_arrays(I1.visible, I2.visible,
                               I1.nir if use_nir else None, I2.nir if use_nir else None,
                               flow.u, flow.v, lam, params)


def _lambda_for_mode(I1: MultispectralImage, params: SolverParams, lambda_map=None):
    shape = (I1.height, I1.width)
    if params.mode == "rgb_only":
        return np.zeros(shape)
    if params.mode == "nir_only":
        return np.ones(shape)
    if params.mode == "fixed":
        return np.full(shape, params.fixed_lambda)
    if lambda_map is None:
        if not I1.has_nir:
            raise MissingChannelError("detail-aware weighting needs the NIR channel")
        return compute_lambda(I1.visible, I1.nir, params.lambda_a, params.lambda_b).lam
    return _lambda_array(lambda_map, shape)


# ---------------------------------------------------------------------------
# linearization and system assembly
# ---------------------------------------------------------------------------

@dataclass
class Linearization:
    """First-order expansion of the warped data residuals about the current flow.

    For each residual ``r(du, dv) ~ z + dx * du + dy * dv``.  Visible
    intensity arrays are ``(H, W, C)``; gradient-constancy arrays are
    ``(H, W, C, 2)``; NIR arrays are ``(H, W)``.  Unused terms are ``None``.
    All coefficients are zero at out-of-bounds pixels.
    """

    vz: Optional[np.ndarray]
    vx: Optional[np.ndarray]
    vy: Optional[np.ndarray]
    gz: Optional[np.ndarray]
    gx: Optional[np.ndarray]
    gy: Optional[np.ndarray]
    nz: Optional[np.ndarray]
    nx: Optional[np.ndarray]
    ny: Optional[np.ndarray]
    oob: np.ndarray


def linearize(V1, V2, N1, N2, u, v, theta: float, use_visible: bool = True,
              use_nir: bool = True, grads=None) -> Linearization:
    h, w = u.shape
    xs, ys = _grid(h, w)
    X, Y = xs + u, ys + v
    vz = vx = vy = gz = gx = gy = nz = nx = ny = None
    oob = None
    if use_visible:
        V1 = _as_3d(V1)
        V2 = _as_3d(V2)
        val, dx, dy, oob = bicubic_sample(V2, X, Y, derivatives=True)
        keep = ~oob[..., None]
        vz, vx, vy = (val - V1) * keep, dx * keep, dy * keep
        if theta > 0:
            G1, G2 = grads if grads is not None else (_gradient_stack(V1), _gradient_stack(V2))
            gval, gdx, gdy, _ = bicubic_sample(G2, X, Y, derivatives=True)
            keep4 = keep[..., None]
            gz = (gval - G1) * keep4
            gx, gy = gdx * keep4, gdy * keep4
    if use_nir:
        val, dx, dy, oob_n = bicubic_sample(N2, X, Y, derivatives=True)
        oob = oob_n if oob is None else oob
        keep = ~oob
        nz, nx, ny = (val - N1) * keep, dx * keep, dy * keep
    if oob is None:
        oob = out_of_bounds((h, w), X, Y)
    return Linearization(vz, vx, vy, gz, gx, gy, nz, nx, ny, oob)


@dataclass
class StencilSystem:
    """Coupled 5-point system for the increment ``(du, dv)``.

    Row for pixel p (and symmetrically for ``dv``)::

        (a11 + S_p) du_p + a12 dv_p - sum_q c_pq du_q = ru_p

    with ``c_pq`` the edge weights ``wx`` (p to its right neighbour) and
    ``wy`` (p to the pixel below), and ``S_p`` the sum of the edge weights
    touching p.  The matrix is symmetric positive semi-definite.
    """

    a11: np.ndarray
    a12: np.ndarray
    a22: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    ru: np.ndarray
    rv: np.ndarray

    @property
    def shape(self):
        return self.a11.shape

    def arrays(self):
        return (self.a11, self.a12, self.a22, self.wx, self.wy, self.ru, self.rv)

    def to_sparse(self) -> sparse.csr_matrix:
        """Matrix over unknowns ordered ``[du (row-major), dv (row-major)]``."""
        h, w = self.shape
        n = h * w
        idx = np.arange(n).reshape(h, w)
        s = np.zeros((h, w))
        s[:, :-1] += self.wx[:, :-1]
        s[:, 1:] += self.wx[:, :-1]
        s[:-1, :] += self.wy[:-1, :]
        s[1:, :] += self.wy[:-1, :]
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(v.ravel())

        for off in (0, n):
            add(idx + off, idx + off, (self.a11 if off == 0 else self.a22) + s)
            add(idx[:, :-1] + off, idx[:, 1:] + off, -self.wx[:, :-1])
            add(idx[:, 1:] + off, idx[:, :-1] + off, -self.wx[:, :-1])
            add(idx[:-1, :] + off, idx[1:, :] + off, -self.wy[:-1, :])
            add(idx[1:, :] + off, idx[:-1, :] + off, -self.wy[:-1, :])
        add(idx, idx + n, self.a12)
        add(idx + n, idx, self.a12)
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * n, 2 * n))

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.ru.ravel(), self.rv.ravel()])


@dataclass
class RobustWeights:
    """Lagged ``phi'`` weights already multiplied by the per-pixel term factors."""

    visible: Optional[np.ndarray]
    gradient: Optional[np.ndarray]
    nir: Optional[np.ndarray]
    smooth: np.ndarray


def robust_weights(lin: Linearization, u, v, du, dv, lam, params: SolverParams) -> RobustWeights:
    eps = params.epsilon
    wv = wg = wn = None
    if lin.vz is not None:
        r = lin.vz + lin.vx * du[..., None] + lin.vy * dv[..., None]
        wv = (1.0 - lam) * dphi((r * r).sum(axis=2), eps)
        if lin.gz is not None:
            rg = lin.gz + lin.gx * du[..., None, None] + lin.gy * dv[..., None, None]
            wg = (1.0 - lam) * params.theta * dphi((rg * rg).sum(axis=(2, 3)), eps)
    if lin.nz is not None:
        rn = lin.nz + lin.nx * du + lin.ny * dv
        wn = lam * dphi(rn * rn, eps)
    ws = params.gamma * dphi(smoothness_argument(u + du, v + dv), eps)
    return RobustWeights(wv, wg, wn, ws)


def assemble_system(lin: Linearization, u, v, weights: RobustWeights) -> StencilSystem:
    """Normal equations of the lagged quadratic surrogate (half its gradient)."""
    h, w = u.shape
    a11 = np.zeros((h, w))
    a12 = np.zeros((h, w))
    a22 = np.zeros((h, w))
    ru = np.zeros((h, w))
    rv = np.zeros((h, w))
    if weights.visible is not None:
        k = weights.visible
        a11 += k * (lin.vx * lin.vx).sum(axis=2)
        a12 += k * (lin.vx * lin.vy).sum(axis=2)
        a22 += k * (lin.vy * lin.vy).sum(axis=2)
        ru -= k * (lin.vx * lin.vz).sum(axis=2)
        rv -= k * (lin.vy * lin.vz).sum(axis=2)
    if weights.gradient is not None:
        k = weights.gradient
        a11 += k * (lin.gx * lin.gx).sum(axis=(2, 3))
        a12 += k * (lin.gx * lin.gy).sum(axis=(2, 3))
        a22 += k * (lin.gy * lin.gy).sum(axis=(2, 3))
        ru -= k * (lin.gx * lin.gz).sum(axis=(2, 3))
        rv -= k * (lin.gy * lin.gz).sum(axis=(2, 3))
    if weights.nir is not None:
        k = weights.nir
        a11 += k * lin.nx * lin.nx
        a12 += k * lin.nx * lin.ny
        a22 += k * lin.ny * lin.ny
        ru -= k * lin.nx * lin.nz
        rv -= k * lin.ny * lin.nz
    wx = weights.smooth.copy()
    wx[:, -1] = 0.0
    wy = weights.smooth.copy()
    wy[-1, :] = 0.0
    # smoothness acting on the current flow moves to the right-hand side
    ru += _neighbour_pull(u, wx, wy)
    rv += _neighbour_pull(v, wx, wy)
    return StencilSystem(a11, a12, a22, wx, wy, ru, rv)


def _neighbour_pull(a, wx, wy):
    """sum_q c_pq (a_q - a_p)."""
    out = np.zeros_like(a)
    dx = wx[:, :-1] * (a[:, 1:] - a[:, :-1])
    out[:, :-1] += dx
    out[:, 1:] -= dx
    dy = wy[:-1, :] * (a[1:, :] - a[:-1, :])
    out[:-1, :] += dy
    out[1:, :] -= dy
    return out


def data_gradient(lin: Linearization, weights: RobustWeights):
    """Gradient of the weighted data energy w.r.t. per-pixel (u, v) at the linearization point.

    With ``weights`` evaluated at ``du = dv = 0`` this is the exact derivative
    of the data part of the pixel-sum energy (the factor 2 is ``phi' * 2s``).
    """
    h, w = lin.oob.shape
    gu = np.zeros((h, w))
    gv = np.zeros((h, w))
    if weights.visible is not None:
        gu += 2 * weights.visible * (lin.vx * lin.vz).sum(axis=2)
        gv += 2 * weights.visible * (lin.vy * lin.vz).sum(axis=2)
    if weights.gradient is not None:
        gu += 2 * weights.gradient * (lin.gx * lin.gz).sum(axis=(2, 3))
        gv += 2 * weights.gradient * (lin.gy * lin.gz).sum(axis=(2, 3))
    if weights.nir is not None:
        gu += 2 * weights.nir * lin.nx * lin.nz
        gv += 2 * weights.nir * lin.ny * lin.nz
    return gu, gv


# ---------------------------------------------------------------------------
# SOR
# ---------------------------------------------------------------------------

@dataclass
class SorResult:
    du: np.ndarray
    dv: np.ndarray
    iterations: int
    residual: float
    initial_residual: float


def sor_solve(system: StencilSystem, omega: float = 1.9, max_iters: int = 30,
              tol: float = 1e-4, x0=None, order: str = "red_black") -> SorResult:
    """Block (per-pixel 2x2) successive over-relaxation.

    Stops once the residual L2 norm is at most ``tol`` times the initial one,
    or after ``max_iters`` sweeps.
    """
    if not 0.0 < omega < 2.0:
        raise ValueError(f"SOR relaxation omega must lie in (0, 2), got {omega}")
    if order not in ("red_black", "sequential"):
        raise ValueError(f"unknown sweep order {order!r}")
    arrays = [np.ascontiguousarray(a, dtype=np.float64) for a in system.arrays()]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("SOR system has non-finite coefficients")
    h, w = system.shape
    if x0 is None:
        du = np.zeros((h, w))
        dv = np.zeros((h, w))
    else:
        du = np.array(x0[0], dtype=np.float64)
        dv = np.array(x0[1], dtype=np.float64)
    it, r, r0 = _kernels.sor_sweeps(*arrays, du, dv, float(omega), int(max_iters), float(tol),
                                    order == "red_black")
    return SorResult(du, dv, int(it), float(r), float(r0))


# ---------------------------------------------------------------------------
# per-level and full solver
# ---------------------------------------------------------------------------

@dataclass
class TraceEntry:
    level: int
    iteration: int
    energy: EnergyBreakdown


def _term_usage(lam, has_nir):
    use_visible = not np.all(lam == 1.0)
    use_nir = has_nir and bool(np.any(lam != 0.0))
    return use_visible, use_nir


def solve_level(V1, V2, N1, N2, lam, w_init: FlowField, params: SolverParams,
                trace: Optional[list] = None, level: int = 0) -> FlowField:
    """Warping iterations on one pyramid level, starting from ``w_init``.

    ``lam`` may be an array or a scalar.  Terms whose weight is identically
    zero are skipped entirely, so ``lam == 0`` reproduces visible-only and
    ``lam == 1`` NIR-only solving exactly.

    With ``params.step_control`` an increment that raises the level energy is
    halved up to :data:`MAX_STEP_HALVINGS` times and dropped if it still does.
    """
    shape = w_init.shape
    if np.asarray(V1).shape[:2] != shape or np.asarray(V2).shape[:2] != shape:
        raise DimensionMismatchError("level images and initial flow differ in size")
    lam = _lambda_array(lam, shape)
    use_visible, use_nir = _term_usage(lam, N1 is not None and N2 is not None)
    if not use_visible and not use_nir:
        raise MissingChannelError("no data term available for this weight map")
    u = w_init.u.copy()
    v = w_init.v.copy()
    n1 = N1 if use_nir else None
    n2 = N2 if use_nir else None
    grads = None
    if use_visible and params.theta > 0:
        grads = (_gradient_stack(_as_3d(V1)), _gradient_stack(_as_3d(V2)))

    def energy(uu, vv):
        return _energy_from_arrays(V1, V2, n1, n2, uu, vv, lam, params, grads)

    track = params.step_control or trace is not None
    current = energy(u, v) if track else None
    if trace is not None:
        trace.append(TraceEntry(level, 0, current))
    for outer in range(params.outer_iters):
        lin = linearize(V1, V2, N1, N2, u, v, params.theta, use_visible, use_nir, grads)
        du = np.zeros(shape)
        dv = np.zeros(shape)
        for _ in range(params.inner_iters):
            weights = robust_weights(lin, u, v, du, dv, lam, params)
            system = assemble_system(lin, u, v, weights)
            res = sor_solve(system, params.sor_omega, params.sor_iters, params.sor_tol,
                            x0=(du, dv), order=params.sor_order)
            du, dv = res.du, res.dv
        if params.step_control:
            step = 1.0
            for _ in range(MAX_STEP_HALVINGS + 1):
                trial = energy(u + step * du, v + step * dv)
                if trial.e_total <= current.e_total:
                    break
                step *= 0.5
            else:
                step = 0.0
                log.debug("level %d iteration %d: increment rejected", level, outer + 1)
            if step > 0.0:
                u = u + step * du
                v = v + step * dv
                current = trial
        else:
            u = u + du
            v = v + dv
            if track:
                current = energy(u, v)
        if trace is not None:
            trace.append(TraceEntry(level, outer + 1, current))
    return FlowField(u, v)


def _check_pair(I1: MultispectralImage, I2: MultispectralImage, params: SolverParams):
    if (I1.height, I1.width) != (I2.height, I2.width):
        raise DimensionMismatchError("frames differ in size")
    if I1.visible.shape[2] != I2.visible.shape[2]:
        raise DimensionMismatchError("frames differ in visible channel count")
    if params.needs_nir and not (I1.has_nir and I2.has_nir):
        raise MissingChannelError(f"mode {params.mode_label} needs the NIR channel in both frames")


def compute_flow(I1: MultispectralImage, I2: MultispectralImage,
                 params: Optional[SolverParams] = None,
                 trace: Optional[list] = None) -> FlowField:
    """Dense flow from ``I1`` to ``I2``."""
    params = params or SolverParams()
    _check_pair(I1, I2, params)
    per_level_lambda = params.mode == "detail_aware" and params.lambda_per_level
    lam_full = None
    if params.mode == "detail_aware" and not per_level_lambda:
        lam_full = compute_lambda(I1.visible, I1.nir, params.lambda_a, params.lambda_b).lam
    use_nir = params.mode != "rgb_only"
    src1 = MultispectralImage(I1.visible, I1.nir if use_nir else None)
    src2 = MultispectralImage(I2.visible, I2.nir if use_nir else None)
    pyr1 = build_pyramid(src1, lam_full, params.pyramid_factor, params.min_size)
    pyr2 = build_pyramid(src2, None, params.pyramid_factor, params.min_size)
    n = len(pyr1)
    flow = None
    for k in range(n - 1, -1, -1):
        l1, l2 = pyr1[k], pyr2[k]
        h, w = l1.shape
        if flow is None:
            flow = FlowField.zeros(h, w)
        else:
            flow = rescale_flow(flow, w, h)
        if params.mode == "detail_aware":
            lam = (compute_lambda(l1.visible, l1.nir, params.lambda_a, params.lambda_b).lam
                   if per_level_lambda else l1.lam)
        elif params.mode == "fixed":
            lam = params.fixed_lambda
        elif params.mode == "rgb_only":
            lam = 0.0
        else:
            lam = 1.0
        level_trace = [] if trace is not None else None
        flow = solve_level(l1.visible, l2.visible, l1.nir, l2.nir, lam, flow, params,
                           trace=level_trace, level=k)
        if trace is not None:
            trace.extend(level_trace)
        log.debug("level %d (%dx%d) done", k, w, h)
    return flow
