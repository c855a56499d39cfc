"""Hot numeric kernels with a compiled path and a pure-numpy path.

Public functions dispatch on :func:`semimap._accel.use_numba`.  Both paths
compute the same quantity; summation order may differ, so results agree to
rounding rather than bit-for-bit.  Within one path every kernel is
deterministic.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, use_numba

__all__ = [
    "conv_out_size",
    "im2col",
    "col2im",
    "maxpool2x2",
    "maxpool2x2_backward",
    "raster_capsules",
]


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im on NHWC arrays.  Rows are (n, oy, ox), columns are
# (ky, kx, c), matching a weight reshaped from (k, k, c_in, c_out).


@njit
def _im2col_nb(x, k, stride, pad, ho, wo):
    n_, h, w, c_ = x.shape
    cols = np.zeros((n_ * ho * wo, k * k * c_), dtype=x.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                r = (n * ho + i) * wo + j
                for a in range(k):
                    y = i * stride - pad + a
                    if y < 0 or y >= h:
                        continue
                    for b in range(k):
                        xx = j * stride - pad + b
                        if xx < 0 or xx >= w:
                            continue
                        base = (a * k + b) * c_
                        for c in range(c_):
                            cols[r, base + c] = x[n, y, xx, c]
    return cols


@njit
def _col2im_nb(cols, n_, h, w, c_, k, stride, pad, ho, wo):
    out = np.zeros((n_, h, w, c_), dtype=cols.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                r = (n * ho + i) * wo + j
                for a in range(k):
                    y = i * stride - pad + a
                    if y < 0 or y >= h:
                        continue
                    for b in range(k):
                        xx = j * stride - pad + b
                        if xx < 0 or xx >= w:
                            continue
                        base = (a * k + b) * c_
                        for c in range(c_):
                            out[n, y, xx, c] += cols[r, base + c]
    return out


def _im2col_np(x, k, stride, pad, ho, wo):
    n_, _, _, c_ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n_ * ho * wo, k * k * c_)


def _col2im_np(cols, n_, h, w, c_, k, stride, pad, ho, wo):
    out = np.zeros((n_, h + 2 * pad, w + 2 * pad, c_), dtype=cols.dtype)
    c6 = cols.reshape(n_, ho, wo, k, k, c_)
    for a in range(k):
        for b in range(k):
            out[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride] += c6[:, :, :, a, b]
    return np.ascontiguousarray(out[:, pad : pad + h, pad : pad + w])


def im2col(x: np.ndarray, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    ho = conv_out_size(x.shape[1], k, stride, pad)
    wo = conv_out_size(x.shape[2], k, stride, pad)
    if use_numba():
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad, ho, wo)
    return _im2col_np(x, k, stride, pad, ho, wo)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to NHWC ``shape``."""
    n_, h, w, c_ = shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(w, k, stride, pad)
    if use_numba():
        return _col2im_nb(np.ascontiguousarray(cols), n_, h, w, c_, k, stride, pad, ho, wo)
    return _col2im_np(cols, n_, h, w, c_, k, stride, pad, ho, wo)


# --------------------------------------------------------------------------
# 2x2 max pooling, stride 2, NHWC.  Ties route to the first element in
# row-major window order.


@njit
def _maxpool_nb(x):
    n_, h, w, c_ = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n_, ho, wo, c_), dtype=x.dtype)
    arg = np.empty((n_, ho, wo, c_), dtype=np.int8)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_):
                    best = x[n, 2 * i, 2 * j, c]
                    bi = 0
                    for q in range(1, 4):
                        v = x[n, 2 * i + q // 2, 2 * j + q % 2, c]
                        if v > best:
                            best = v
                            bi = q
                    out[n, i, j, c] = best
                    arg[n, i, j, c] = bi
    return out, arg


@njit
def _maxpool_back_nb(g, arg):
    n_, ho, wo, c_ = g.shape
    dx = np.zeros((n_, 2 * ho, 2 * wo, c_), dtype=g.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                for c in range(c_):
                    q = arg[n, i, j, c]
                    dx[n, 2 * i + q // 2, 2 * j + q % 2, c] = g[n, i, j, c]
    return dx


def _windows(x):
    n_, h, w, c_ = x.shape
    return x.reshape(n_, h // 2, 2, w // 2, 2, c_).transpose(0, 1, 3, 5, 2, 4).reshape(n_, h // 2, w // 2, c_, 4)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return pooled values and the argmax slot (0..3) of every window."""
    if use_numba():
        return _maxpool_nb(np.ascontiguousarray(x))
    win = _windows(x)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    if use_numba():
        return _maxpool_back_nb(np.ascontiguousarray(g), arg)
    n_, ho, wo, c_ = g.shape
    slots = (np.arange(4) == arg[..., None].astype(np.intp)) * g[..., None]
    out = slots.reshape(n_, ho, wo, c_, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n_, 2 * ho, 2 * wo, c_)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# Orthographic capsule rasterisation.  Rays run along +z through pixel
# centres; the stored value is the smallest z at which any capsule is hit.
# A capsule row is (ax, ay, az, bx, by, bz, radius); a sphere has a == b.


@njit
def _raster_nb(xs, ys, caps, far):
    h = ys.shape[0]
    w = xs.shape[0]
    depth = np.full((h, w), far)
    for q in range(caps.shape[0]):
        ax, ay, az = caps[q, 0], caps[q, 1], caps[q, 2]
        bx, by, bz = caps[q, 3], caps[q, 4], caps[q, 5]
        r = caps[q, 6]
        r2 = r * r
        dx, dy, dz = bx - ax, by - ay, bz - az
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        body = length > 1e-12
        ux = uy = uz = 0.0
        if body:
            ux, uy, uz = dx / length, dy / length, dz / length
        qa = 1.0 - uz * uz
        for i in range(h):
            py = ys[i]
            for j in range(w):
                px = xs[j]
                best = depth[i, j]
                d2 = (px - ax) ** 2 + (py - ay) ** 2
                if d2 <= r2:
                    s = az - np.sqrt(r2 - d2)
                    if s < best:
                        best = s
                d2 = (px - bx) ** 2 + (py - by) ** 2
                if d2 <= r2:
                    s = bz - np.sqrt(r2 - d2)
                    if s < best:
                        best = s
                if body and qa > 1e-12:
                    wx, wy, wz = px - ax, py - ay, -az
                    wu = wx * ux + wy * uy + wz * uz
                    pwx, pwy, pwz = wx - wu * ux, wy - wu * uy, wz - wu * uz
                    pex, pey, pez = -uz * ux, -uz * uy, 1.0 - uz * uz
                    qb = 2.0 * (pwx * pex + pwy * pey + pwz * pez)
                    qc = pwx * pwx + pwy * pwy + pwz * pwz - r2
                    disc = qb * qb - 4.0 * qa * qc
                    if disc >= 0.0:
                        s = (-qb - np.sqrt(disc)) / (2.0 * qa)
                        t = wu + s * uz
                        if t >= 0.0 and t <= length and s < best:
                            best = s
                depth[i, j] = best
    return depth


def _raster_np(xs, ys, caps, far):
    px, py = np.meshgrid(xs, ys)
    depth = np.full(px.shape, far, dtype=np.float64)
    for ax, ay, az, bx, by, bz, r in caps:
        r2 = r * r
        for cx, cy, cz in ((ax, ay, az), (bx, by, bz)):
            d2 = (px - cx) ** 2 + (py - cy) ** 2
            hit = d2 <= r2
            s = cz - np.sqrt(np.where(hit, r2 - d2, 0.0))
            depth = np.where(hit & (s < depth), s, depth)
        d = np.array([bx - ax, by - ay, bz - az])
        length = float(np.sqrt(d @ d))
        if length <= 1e-12:
            continue
        u = d / length
        qa = 1.0 - u[2] * u[2]
        if qa <= 1e-12:
            continue
        wx, wy, wz = px - ax, py - ay, -az
        wu = wx * u[0] + wy * u[1] + wz * u[2]
        pw = (wx - wu * u[0], wy - wu * u[1], wz - wu * u[2])
        pe = (-u[2] * u[0], -u[2] * u[1], 1.0 - u[2] * u[2])
        qb = 2.0 * (pw[0] * pe[0] + pw[1] * pe[1] + pw[2] * pe[2])
        qc = pw[0] ** 2 + pw[1] ** 2 + pw[2] ** 2 - r2
        disc = qb * qb - 4.0 * qa * qc
        ok = disc >= 0.0
        s = (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * qa)
        t = wu + s * u[2]
        hit = ok & (t >= 0.0) & (t <= length) & (s < depth)
        depth = np.where(hit, s, depth)
    return depth


def raster_capsules(xs: np.ndarray, ys: np.ndarray, caps: np.ndarray, far: float) -> np.ndarray:
    """Nearest-surface depth map of a union of capsules, shape ``(len(ys), len(xs))``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.float64).reshape(-1, 7)
    if use_numba():
        return _raster_nb(xs, ys, caps, float(far))
    return _raster_np(xs, ys, caps, float(far))
