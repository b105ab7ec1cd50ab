"""Numba twins of the reference kernels.

Importing this module compiles nothing; compilation happens lazily on
first call and is cached on disk. Kernels are single-threaded on purpose:
BLAS already owns the cores during training, and a second thread pool
just fights it. Float kernels run with fastmath, so agreement with the
reference path is to tolerance, not bit-exact; integer raster kernels
are exact.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .reference import LN_EPS, _GELU_C, _SQRT_2_OVER_PI


@njit(fastmath=True, cache=True)
def layernorm_forward(x):
    r, d = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty(r, dtype=x.dtype)
    for i in range(r):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        rs = 1.0 / math.sqrt(var + LN_EPS)
        rstd[i] = rs
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean) * rs
    return xhat, rstd


@njit(fastmath=True, cache=True)
def layernorm_backward(dy, xhat, rstd):
    r, d = xhat.shape
    dx = np.empty_like(dy)
    for i in range(r):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            s1 += dy[i, j]
            s2 += dy[i, j] * xhat[i, j]
        s1 /= d
        s2 /= d
        rs = rstd[i]
        for j in range(d):
            dx[i, j] = rs * (dy[i, j] - s1 - xhat[i, j] * s2)
    return dx


@njit(fastmath=True, cache=True)
def masked_softmax(scores, blocked_lo, blocked_hi, apply_mask):
    r, t, _ = scores.shape
    out = np.empty_like(scores)
    for idx in range(r * t):
        i = idx // t
        q = idx % t
        row = scores[i, q]
        orow = out[i, q]
        skip = apply_mask and blocked_hi > blocked_lo and not (blocked_lo <= q < blocked_hi)
        m = -np.inf
        for j in range(t):
            if skip and blocked_lo <= j < blocked_hi:
                continue
            if row[j] > m:
                m = row[j]
        tot = 0.0
        for j in range(t):
            if skip and blocked_lo <= j < blocked_hi:
                orow[j] = 0.0
            else:
                e = math.exp(row[j] - m)
                orow[j] = e
                tot += e
        inv = 1.0 / tot
        for j in range(t):
            orow[j] *= inv
    return out


@njit(fastmath=True, cache=True)
def softmax_backward(dprobs, probs):
    r, t, _ = probs.shape
    ds = np.empty_like(dprobs)
    for idx in range(r * t):
        i = idx // t
        q = idx % t
        inner = 0.0
        for j in range(t):
            inner += dprobs[i, q, j] * probs[i, q, j]
        for j in range(t):
            ds[i, q, j] = probs[i, q, j] * (dprobs[i, q, j] - inner)
    return ds


@njit(fastmath=True, cache=True)
def gelu_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    th = np.empty_like(flat)
    for i in range(flat.size):
        xv = flat[i]
        inner = _SQRT_2_OVER_PI * (xv + _GELU_C * xv * xv * xv)
        t = math.tanh(inner)
        th[i] = t
        out[i] = 0.5 * xv * (1.0 + t)
    return out.reshape(x.shape), th.reshape(x.shape)


@njit(fastmath=True, cache=True)
def gelu_backward(x, th, dy):
    flat = x.ravel()
    tflat = th.ravel()
    dflat = dy.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        xv = flat[i]
        x2 = xv * xv
        t = tflat[i]
        sech2 = 1.0 - t * t
        out[i] = dflat[i] * (0.5 * (1.0 + t)
                             + 0.5 * xv * sech2 * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x2))
    return out.reshape(x.shape)


@njit(fastmath=True, cache=True)
def silu_forward(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        out[i] = flat[i] / (1.0 + math.exp(-flat[i]))
    return out.reshape(x.shape)


@njit(fastmath=True, cache=True)
def silu_backward(x, dy):
    flat = x.ravel()
    dflat = dy.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        sig = 1.0 / (1.0 + math.exp(-flat[i]))
        out[i] = dflat[i] * sig * (1.0 + flat[i] * (1.0 - sig))
    return out.reshape(x.shape)


@njit(fastmath=True, cache=True)
def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps) + weight_decay * p[i])


@njit(cache=True)
def scale_bitmap(bitmap, h, w):
    gh, gw = bitmap.shape
    out = np.empty((h, w), dtype=bitmap.dtype)
    for iy in range(h):
        sy = (iy * gh) // h
        for ix in range(w):
            out[iy, ix] = bitmap[sy, (ix * gw) // w]
    return out


@njit(cache=True)
def dilate_mask(mask, radius):
    if radius <= 0:
        return mask
    h, w = mask.shape
    out = np.zeros_like(mask)
    for iy in range(h):
        for ix in range(w):
            if mask[iy, ix]:
                for dy in range(-radius, radius + 1):
                    ny = iy + dy
                    if ny < 0 or ny >= h:
                        continue
                    for dx in range(-radius, radius + 1):
                        nx = ix + dx
                        if 0 <= nx < w:
                            out[ny, nx] = True
    return out


@njit(cache=True)
def shear_mask(mask, shear):
    if shear == 0.0:
        return mask
    h, w = mask.shape
    out = np.zeros_like(mask)
    c = (h - 1) / 2.0
    for iy in range(h):
        off = int(round(shear * (iy - c)))
        for ix in range(w):
            nx = ix + off
            if 0 <= nx < w and mask[iy, ix]:
                out[iy, nx] = True
    return out


@njit(cache=True)
def jitter_mask(mask, offsets):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for iy in range(h):
        for ix in range(w):
            if mask[iy, ix]:
                ny = min(max(iy + offsets[iy, ix, 0], 0), h - 1)
                nx = min(max(ix + offsets[iy, ix, 1], 0), w - 1)
                out[ny, nx] = True
    return out


@njit(cache=True)
def composite_ink(canvas, mask, top, left, ink):
    h, w = mask.shape
    ch, cw = canvas.shape
    for iy in range(h):
        cyy = top + iy
        if cyy < 0 or cyy >= ch:
            continue
        for ix in range(w):
            cxx = left + ix
            if 0 <= cxx < cw and mask[iy, ix] and ink < canvas[cyy, cxx]:
                canvas[cyy, cxx] = ink


@njit(cache=True)
def decode_labels(image, palette, threshold):
    h, w, _ = image.shape
    p = palette.shape[0]
    labels = np.empty((h, w), dtype=np.int16)
    for iy in range(h):
        for ix in range(w):
            best = 32767
            arg = -1
            for pi in range(p):
                dist = 0
                for c in range(3):
                    # uint8 - uint8 wraps under numba's numpy semantics
                    d = np.int64(image[iy, ix, c]) - np.int64(palette[pi, c])
                    if d < 0:
                        d = -d
                    if d > dist:
                        dist = d
                if dist < best:
                    best = dist
                    arg = pi
            labels[iy, ix] = arg if best <= threshold else -1
    return labels


@njit(cache=True)
def paint_ellipse(image, cy, cx, a, b, theta, value):
    h, w = image.shape
    r = int(math.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    ct, st = math.cos(theta), math.sin(theta)
    for iy in range(y0, y1):
        for ix in range(x0, x1):
            dy = iy - cy
            dx = ix - cx
            u = (dx * ct + dy * st) / a
            v = (-dx * st + dy * ct) / b
            if u * u + v * v <= 1.0:
                image[iy, ix] = value
