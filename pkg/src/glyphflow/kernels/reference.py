"""Pure-numpy reference implementations of the hot kernels.

Every function here has an @njit twin in `accelerated.py`; the twin must
agree within float tolerance (integer kernels: exactly). Matrix products
are delegated to BLAS on both paths, so this module only owns the fused
elementwise/reduction work and the integer raster loops.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6
_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


def layernorm_forward(x):
    """Affine-free layer norm over the last axis.

    Returns (xhat, rstd) with xhat = (x - mean) * rstd; rstd has the
    trailing axis reduced.
    """
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.square(centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    return centered * rstd, rstd[..., 0]


def layernorm_backward(dy, xhat, rstd):
    d = xhat.shape[-1]
    sum_dy = dy.sum(axis=-1, keepdims=True)
    sum_dy_xhat = (dy * xhat).sum(axis=-1, keepdims=True)
    return rstd[..., None] * (dy - (sum_dy + xhat * sum_dy_xhat) / d)


def masked_softmax(scores, blocked_lo, blocked_hi, apply_mask):
    """Row softmax over the last axis of [R, T, T] scores.

    When `apply_mask`, key columns [blocked_lo, blocked_hi) are excluded
    for every query row OUTSIDE [blocked_lo, blocked_hi): only queries of
    the blocked segment itself may attend into it. Excluded entries get
    probability exactly 0.
    """
    out = scores.astype(scores.dtype, copy=True)
    if apply_mask and blocked_hi > blocked_lo:
        t = scores.shape[-2]
        rows = np.ones(t, dtype=bool)
        rows[blocked_lo:blocked_hi] = False
        out[:, rows, blocked_lo:blocked_hi] = -np.inf
    m = out.max(axis=-1, keepdims=True)
    np.exp(out - m, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def softmax_backward(dprobs, probs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def gelu_forward(x):
    """Returns (gelu(x), tanh_cache); the cache feeds the backward pass."""
    c1 = x.dtype.type(_SQRT_2_OVER_PI)
    c2 = x.dtype.type(_GELU_C)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    inner = x * x
    inner *= c2
    inner += one
    inner *= x
    inner *= c1
    np.tanh(inner, out=inner)
    th = inner
    y = th + one
    y *= x
    y *= half
    return y, th


def gelu_backward(x, th, dy):
    c1 = x.dtype.type(_SQRT_2_OVER_PI)
    c2 = x.dtype.type(_GELU_C)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    three = x.dtype.type(3.0)
    x2 = x * x
    out = one - th * th
    out *= half * c1
    out *= x
    x2 *= three * c2
    x2 += one
    out *= x2
    out += half * (th + one)
    out *= dy
    return out


def silu_forward(x):
    one = x.dtype.type(1.0)
    sig = np.exp(-x)
    sig += one
    return x / sig


def silu_backward(x, dy):
    one = x.dtype.type(1.0)
    sig = one / (one + np.exp(-x))
    return dy * (sig * (one + x * (one - sig)))


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place decoupled-weight-decay Adam step on flat arrays.

    bc1/bc2 are the bias corrections 1 - beta^step, precomputed by the
    optimizer so the kernel stays stateless.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def scale_bitmap(bitmap, h, w):
    """Nearest-neighbour upscale of a binary bitmap to (h, w)."""
    gh, gw = bitmap.shape
    ys = (np.arange(h) * gh) // h
    xs = (np.arange(w) * gw) // w
    return bitmap[ys][:, xs]


def dilate_mask(mask, radius):
    """Chebyshev-ball binary dilation."""
    if radius <= 0:
        return mask
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(-radius, radius + 1):
        ys0, ys1 = max(0, dy), min(h, h + dy)
        yd0, yd1 = max(0, -dy), min(h, h - dy)
        for dx in range(-radius, radius + 1):
            xs0, xs1 = max(0, dx), min(w, w + dx)
            xd0, xd1 = max(0, -dx), min(w, w - dx)
            np.logical_or(out[yd0:yd1, xd0:xd1], mask[ys0:ys1, xs0:xs1],
                          out=out[yd0:yd1, xd0:xd1])
    return out


def shear_mask(mask, shear):
    """Shift row iy horizontally by round(shear * (iy - (h-1)/2))."""
    if shear == 0.0:
        return mask
    h, w = mask.shape
    out = np.zeros_like(mask)
    c = (h - 1) / 2.0
    for iy in range(h):
        off = int(np.rint(shear * (iy - c)))
        xs0, xs1 = max(0, -off), min(w, w - off)
        if xs1 > xs0:
            out[iy, xs0 + off:xs1 + off] = mask[iy, xs0:xs1]
    return out


def jitter_mask(mask, offsets):
    """Scatter each ON pixel by its (dy, dx) integer offset, clipped."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return np.zeros_like(mask)
    ny = np.clip(ys + offsets[ys, xs, 0], 0, h - 1)
    nx = np.clip(xs + offsets[ys, xs, 1], 0, w - 1)
    out = np.zeros_like(mask)
    out[ny, nx] = True
    return out


def composite_ink(canvas, mask, top, left, ink):
    """Darken canvas pixels under ON mask cells to min(current, ink)."""
    h, w = mask.shape
    ch, cw = canvas.shape
    y0, y1 = max(0, top), min(ch, top + h)
    x0, x1 = max(0, left), min(cw, left + w)
    if y1 <= y0 or x1 <= x0:
        return
    sub = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    region = canvas[y0:y1, x0:x1]
    region[sub] = np.minimum(region[sub], ink)


def decode_labels(image, palette, threshold):
    """Classify each pixel to its nearest palette color by max-channel
    distance; ties pick the lower palette index; distances above the
    threshold map to -1 (background)."""
    img = image.astype(np.int16)
    pal = palette.astype(np.int16)
    diff = np.abs(img[:, :, None, :] - pal[None, None, :, :]).max(axis=-1)
    labels = diff.argmin(axis=-1).astype(np.int16)
    best = diff.min(axis=-1)
    labels[best > threshold] = -1
    return labels


def paint_ellipse(image, cy, cx, a, b, theta, value):
    """Fill an oriented ellipse in-place on a grayscale canvas."""
    h, w = image.shape
    r = int(np.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y1 <= y0 or x1 <= x0:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None] - cy
    xs = np.arange(x0, x1, dtype=np.float64)[None, :] - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (xs * ct + ys * st) / a
    v = (-xs * st + ys * ct) / b
    inside = u * u + v * v <= 1.0
    region = image[y0:y1, x0:x1]
    region[inside] = value
