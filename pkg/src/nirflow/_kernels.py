"""Compiled inner loops: block SOR on the 5-point coupled system and window matching.

The neighbour gathering is written out inline in each kernel; routing it
through a helper returning a tuple is roughly ten times slower under numba.
"""
import os

import numba as nb
import numpy as np

# prefer OpenMP: older TBB builds trigger a warning on every parallel launch
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ and "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

_jit = {"nogil": True, "cache": True}


@nb.njit(**_jit)
def residual_norm(a11, a12, a22, wx, wy, ru, rv, du, dv):
    h, w = du.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            s = 0.0
            nu = 0.0
            nv = 0.0
            if j + 1 < w:
                c = wx[i, j]
                s += c
                nu += c * du[i, j + 1]
                nv += c * dv[i, j + 1]
            if j > 0:
                c = wx[i, j - 1]
                s += c
                nu += c * du[i, j - 1]
                nv += c * dv[i, j - 1]
            if i + 1 < h:
                c = wy[i, j]
                s += c
                nu += c * du[i + 1, j]
                nv += c * dv[i + 1, j]
            if i > 0:
                c = wy[i - 1, j]
                s += c
                nu += c * du[i - 1, j]
                nv += c * dv[i - 1, j]
            r1 = ru[i, j] + nu - (a11[i, j] + s) * du[i, j] - a12[i, j] * dv[i, j]
            r2 = rv[i, j] + nv - a12[i, j] * du[i, j] - (a22[i, j] + s) * dv[i, j]
            acc += r1 * r1 + r2 * r2
    return np.sqrt(acc)


@nb.njit(**_jit)
def _sweep(a11, a12, a22, wx, wy, ru, rv, du, dv, omega, colour):
    """One pass over the pixels with ``(i + j) % 2 == colour``; ``colour < 0`` visits all in raster order."""
    h, w = du.shape
    for i in range(h):
        if colour < 0:
            start = 0
            step = 1
        else:
            start = (i + colour) % 2
            step = 2
        for j in range(start, w, step):
            s = 0.0
            nu = 0.0
            nv = 0.0
            if j + 1 < w:
                c = wx[i, j]
                s += c
                nu += c * du[i, j + 1]
                nv += c * dv[i, j + 1]
            if j > 0:
                c = wx[i, j - 1]
                s += c
                nu += c * du[i, j - 1]
                nv += c * dv[i, j - 1]
            if i + 1 < h:
                c = wy[i, j]
                s += c
                nu += c * du[i + 1, j]
                nv += c * dv[i + 1, j]
            if i > 0:
                c = wy[i - 1, j]
                s += c
                nu += c * du[i - 1, j]
                nv += c * dv[i - 1, j]
            m11 = a11[i, j] + s
            m22 = a22[i, j] + s
            m12 = a12[i, j]
            det = m11 * m22 - m12 * m12
            if det <= 0.0:
                continue
            bu = ru[i, j] + nu
            bv = rv[i, j] + nv
            su = (m22 * bu - m12 * bv) / det
            sv = (m11 * bv - m12 * bu) / det
            du[i, j] = (1.0 - omega) * du[i, j] + omega * su
            dv[i, j] = (1.0 - omega) * dv[i, j] + omega * sv


@nb.njit(**_jit)
def sor_sweeps(a11, a12, a22, wx, wy, ru, rv, du, dv, omega, max_iters, tol, red_black):
    """Run SOR sweeps in place.  Returns (sweeps done, final residual, initial residual)."""
    r0 = residual_norm(a11, a12, a22, wx, wy, ru, rv, du, dv)
    r = r0
    if r0 == 0.0:
        return 0, r, r0
    it = 0
    while it < max_iters:
        if red_black:
            _sweep(a11, a12, a22, wx, wy, ru, rv, du, dv, omega, 0)
            _sweep(a11, a12, a22, wx, wy, ru, rv, du, dv, omega, 1)
        else:
            _sweep(a11, a12, a22, wx, wy, ru, rv, du, dv, omega, -1)
        it += 1
        r = residual_norm(a11, a12, a22, wx, wy, ru, rv, du, dv)
        if r <= tol * r0:
            break
    return it, r, r0


@nb.njit(parallel=True, **_jit)
def match_offsets(desc1, desc2, offsets):
    """For each pixel keep the first offset (in the given order) of minimal distance.

    ``offsets`` is an ``(K, 2)`` array of (dy, dx) already sorted into the
    tie-break order; later offsets replace the best only when strictly closer.
    """
    h, w, d = desc1.shape
    best_dx = np.zeros((h, w), dtype=np.int64)
    best_dy = np.zeros((h, w), dtype=np.int64)
    for i in nb.prange(h):
        for j in range(w):
            best = np.inf
            for k in range(offsets.shape[0]):
                dy = offsets[k, 0]
                dx = offsets[k, 1]
                ii = i + dy
                jj = j + dx
                if ii < 0 or ii >= h or jj < 0 or jj >= w:
                    continue
                dist = 0.0
                for c in range(d):
                    diff = np.float64(desc1[i, j, c]) - np.float64(desc2[ii, jj, c])
                    dist += diff * diff
                if dist < best:
                    best = dist
                    best_dx[i, j] = dx
                    best_dy[i, j] = dy
    return best_dx, best_dy


@nb.njit(**_jit)
def bicubic(img, xs, ys, derivatives):
    """Clamped-edge Catmull-Rom samples of ``img`` (H, W, C) at flat coordinate arrays.

    Returns ``(values, d/dx, d/dy)`` each of shape (N, C); the derivative
    arrays are empty unless requested.
    """
    h, w, nc = img.shape
    n = xs.shape[0]
    val = np.zeros((n, nc))
    if derivatives:
        dxo = np.zeros((n, nc))
        dyo = np.zeros((n, nc))
    else:
        dxo = np.zeros((0, nc))
        dyo = np.zeros((0, nc))
    wx = np.empty(4)
    wy = np.empty(4)
    dwx = np.empty(4)
    dwy = np.empty(4)
    for p in range(n):
        x = min(max(xs[p], -1.0), float(w))
        y = min(max(ys[p], -1.0), float(h))
        fx = np.floor(x)
        fy = np.floor(y)
        tx = x - fx
        ty = y - fy
        x0 = int(fx)
        y0 = int(fy)
        t2 = tx * tx
        t3 = t2 * tx
        wx[0] = 0.5 * (-t3 + 2.0 * t2 - tx)
        wx[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
        wx[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + tx)
        wx[3] = 0.5 * (t3 - t2)
        t2 = ty * ty
        t3 = t2 * ty
        wy[0] = 0.5 * (-t3 + 2.0 * t2 - ty)
        wy[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
        wy[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + ty)
        wy[3] = 0.5 * (t3 - t2)
        if derivatives:
            t2 = tx * tx
            dwx[0] = 0.5 * (-3.0 * t2 + 4.0 * tx - 1.0)
            dwx[1] = 0.5 * (9.0 * t2 - 10.0 * tx)
            dwx[2] = 0.5 * (-9.0 * t2 + 8.0 * tx + 1.0)
            dwx[3] = 0.5 * (3.0 * t2 - 2.0 * tx)
            t2 = ty * ty
            dwy[0] = 0.5 * (-3.0 * t2 + 4.0 * ty - 1.0)
            dwy[1] = 0.5 * (9.0 * t2 - 10.0 * ty)
            dwy[2] = 0.5 * (-9.0 * t2 + 8.0 * ty + 1.0)
            dwy[3] = 0.5 * (3.0 * t2 - 2.0 * ty)
            # the interpolant is constant beyond the clamped range
            if xs[p] < -1.0 or xs[p] > w:
                for k in range(4):
                    dwx[k] = 0.0
            if ys[p] < -1.0 or ys[p] > h:
                for k in range(4):
                    dwy[k] = 0.0
        for c in range(nc):
            acc = 0.0
            accx = 0.0
            accy = 0.0
            for a in range(4):
                r = min(max(y0 + a - 1, 0), h - 1)
                row = 0.0
                rowd = 0.0
                for b in range(4):
                    q = min(max(x0 + b - 1, 0), w - 1)
                    pix = img[r, q, c]
                    row += wx[b] * pix
                    if derivatives:
                        rowd += dwx[b] * pix
                acc += wy[a] * row
                if derivatives:
                    accx += wy[a] * rowd
                    accy += dwy[a] * row
            val[p, c] = acc
            if derivatives:
                dxo[p, c] = accx
                dyo[p, c] = accy
    return val, dxo, dyo
