"""Differentiable operations recorded on the active :class:`~rainforge.tensor.Tape`.

Shapes are deliberately strict: there is no implicit broadcasting.  Images are
``(H, W, C)`` or batched ``(B, H, W, C)``; dense inputs are ``(F,)`` or ``(B, F)``.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ContractError, InvalidArgumentError
from .tensor import Tensor, active_tape

__all__ = [
    "as_tensor", "add", "sub", "mul", "scale", "add_scalar", "weighted_sum", "sum", "mean",
    "reshape", "repeat_channels", "clamp", "relu", "silu", "sigmoid", "sign_grad",
    "conv2d", "max_pool2d", "avg_pool2d", "global_avg_pool", "dense",
    "softmax_cross_entropy", "bce_with_logits", "smooth_l1",
    "resize_bilinear", "translate_bilinear", "splat_streaks",
]


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, rule, name):
    tape = active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.grad = np.zeros_like(data) if needs else None
    if needs:
        tape.record(inputs, out, rule, name)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c):
    a = as_tensor(a)
    return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar")


def weighted_sum(tensors, weights):
    tensors = [as_tensor(t) for t in tensors]
    weights = [float(w) for w in weights]
    if not tensors or len(tensors) != len(weights):
        raise ContractError("weighted_sum needs one weight per tensor")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "weighted_sum")
    out = np.zeros_like(tensors[0].data)
    for t, w in zip(tensors, weights):
        out += t.dtype.type(w) * t.data
    return _result(out, tuple(tensors), lambda g: tuple(g * w for w in weights), "weighted_sum")


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def repeat_channels(a, channels):
    """(…, 1) -> (…, channels) by copying the single channel."""
    a = as_tensor(a)
    if a.shape[-1] != 1:
        raise ContractError(f"repeat_channels expects a trailing axis of 1, got {a.shape}")
    data = np.repeat(a.data, channels, axis=-1)
    return _result(data, (a,), lambda g: (g.sum(axis=-1, keepdims=True),), "repeat_channels")


def clamp(a, lo, hi):
    """Clip to ``[lo, hi]``; gradient passes unchanged inside the closed range, zero outside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def silu(a):
    """``a * sigmoid(a)``: a smooth stand-in for relu."""
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    x = a.data
    return _result(x * s, (a,), lambda g: (g * (s + x * s * (1 - s)),), "silu")


def sigmoid(a):
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sign_grad(a):
    """Identity forward; replaces the incoming gradient by its sign."""
    a = as_tensor(a)
    return _result(a.data, (a,), lambda g: (np.sign(g),), "sign_grad")


# -- layers -------------------------------------------------------------------


def _batched(x, ndim):
    return (x[None], True) if x.ndim == ndim - 1 else (x, False)


def conv2d(x, w, b=None):
    """Same-padded stride-1 convolution. ``w`` is (kh, kw, Cin, Cout), ``b`` is (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, squeeze = _batched(x.data, 4)
    if xd.shape[-1] != w.shape[2]:
        raise ContractError(f"conv2d: input has {xd.shape[-1]} channels, weights expect {w.shape[2]}")
    out, cols = kernels.conv_forward(xd, w.data)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)
    out = out.astype(x.dtype, copy=False)

    def rule(g):
        gb = g[None] if squeeze else g
        gx, gw = kernels.conv_backward(cols, xd.shape, w.data, gb)
        gx = gx[0] if squeeze else gx
        if b is None:
            return gx, gw
        return gx, gw, gb.sum(axis=(0, 1, 2))

    return _result(np.ascontiguousarray(out[0] if squeeze else out), inputs, rule, "conv2d")


def max_pool2d(x):
    """2x2 stride-2 max pooling; an odd trailing row/column is dropped."""
    x = as_tensor(x)
    xd, squeeze = _batched(x.data, 4)
    out, arg = kernels.maxpool_forward(xd)
    in_shape = xd.shape

    def rule(g):
        gx = kernels.maxpool_backward(arg, g[None] if squeeze else g, in_shape)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), rule, "max_pool2d")


def avg_pool2d(x):
    """2x2 stride-2 mean pooling; an odd trailing row/column is dropped."""
    x = as_tensor(x)
    xd, squeeze = _batched(x.data, 4)
    b, h, w, c = xd.shape
    h2, w2 = h // 2, w // 2
    out = xd[:, :2 * h2, :2 * w2].reshape(b, h2, 2, w2, 2, c).mean(axis=(2, 4))
    in_shape = xd.shape

    def rule(g):
        g = g[None] if squeeze else g
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), rule, "avg_pool2d")


def global_avg_pool(x):
    """(B, H, W, C) -> (B, C) spatial mean (unbatched input gives (C,))."""
    x = as_tensor(x)
    shape = x.shape
    hw = shape[-3] * shape[-2]
    out = x.data.mean(axis=(-3, -2))

    def rule(g):
        return (np.broadcast_to(g[..., None, None, :] / hw, shape).copy(),)

    return _result(out.astype(x.dtype, copy=False), (x,), rule, "global_avg_pool")


def dense(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape (F, O)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)
    xd, wd = x.data, w.data

    def rule(g):
        gx = g @ wd.T
        gw = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        if b is None:
            return gx, gw
        return gx, gw, (g if g.ndim == 1 else g.sum(axis=0))

    return _result(out, inputs, rule, "dense")


# -- losses -------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels."""
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != z2.shape[0]:
        raise ContractError("softmax_cross_entropy: one label per row required")
    k = z2.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidArgumentError(f"label out of range [0, {k})")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z2.shape[0])
    loss = -logp[rows, labels].mean()
    probs = np.exp(logp)

    def rule(g):
        d = probs.copy()
        d[rows, labels] -= 1
        d *= g / z2.shape[0]
        return (d[0] if single else d,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), rule, "softmax_cross_entropy")


def bce_with_logits(logits, targets, weights=None):
    """Weighted mean binary cross-entropy on raw logits (weights default to 1)."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype)
    if t.shape != z.shape or w.shape != z.shape:
        raise ContractError("bce_with_logits: targets/weights must match logits")
    denom = max(float(w.sum()), 1e-12)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = (w * per).sum() / denom
    s = _stable_sigmoid(z)

    def rule(g):
        return (g * w * (s - t) / denom,)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), rule, "bce_with_logits")


def smooth_l1(pred, target, mask=None, beta=1.0):
    """Huber-style loss, summed over elements where ``mask`` is set and divided by
    the number of masked rows (mask broadcasts over the last axis)."""
    pred = as_tensor(pred)
    p = pred.data
    t = np.asarray(target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ContractError("smooth_l1: target must match prediction")
    m = np.ones(p.shape[:-1], dtype=p.dtype) if mask is None else np.asarray(mask, dtype=p.dtype)
    count = max(float(m.sum()), 1.0)
    d = p - t
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss = (per * m[..., None]).sum() / count
    slope = np.where(ad < beta, d / beta, np.sign(d))

    def rule(g):
        return (g * slope * m[..., None] / count,)

    return _result(np.asarray(loss, dtype=p.dtype), (pred,), rule, "smooth_l1")


# -- geometry -----------------------------------------------------------------


def _offset_pair(offset):
    if isinstance(offset, Tensor):
        vals = offset.data.astype(np.float64).reshape(-1)
    else:
        vals = np.asarray(offset, dtype=np.float64).reshape(-1)
    if vals.shape != (2,):
        raise InvalidArgumentError("offset must be a pair (dx, dy)")
    if not np.all(np.isfinite(vals)):
        raise InvalidArgumentError(f"offset must be finite, got {tuple(vals)}")
    return float(vals[0]), float(vals[1])


def _resize_matrix(n_out, n_in):
    """Rows interpolate ``n_in`` samples at ``n_out`` evenly spaced centres;
    downscaling widens the tent so every input sample contributes."""
    scale = n_in / n_out
    support = max(scale, 1.0)
    centres = (np.arange(n_out) + 0.5) * scale - 0.5
    d = np.abs(np.arange(n_in)[None, :] - centres[:, None]) / support
    m = np.clip(1.0 - d, 0.0, None)
    return m / m.sum(axis=1, keepdims=True)


def resize_bilinear(img, size):
    """Resize an (H, W, C) image to ``size = (h, w)`` (antialiased when shrinking)."""
    img = as_tensor(img)
    if img.data.ndim != 3:
        raise ContractError(f"resize_bilinear expects (H, W, C), got {img.shape}")
    h, w = size
    H, W = img.shape[:2]
    if (h, w) == (H, W):
        return img
    ry = _resize_matrix(h, H).astype(img.dtype)
    rx = _resize_matrix(w, W).astype(img.dtype)
    out = np.einsum("yi,ijc,xj->yxc", ry, img.data, rx, optimize=True)

    def rule(g):
        return (np.einsum("yi,yxc,xj->ijc", ry, g, rx, optimize=True),)

    return _result(np.ascontiguousarray(out), (img,), rule, "resize_bilinear")


def translate_bilinear(img, offset):
    """Shift an (H, W, C) image by ``offset = (dx, dy)`` pixels.

    ``out[y, x] = img(y - dy, x - dx)`` sampled bilinearly; samples outside the
    frame read as zero.  Differentiable in both ``img`` and ``offset``.
    """
    img = as_tensor(img)
    ox, oy = _offset_pair(offset)
    off_t = offset if isinstance(offset, Tensor) else None
    if img.data.ndim != 3:
        raise ContractError(f"translate_bilinear expects (H, W, C), got {img.shape}")
    data = img.data
    out = kernels.translate_forward(data, ox, oy)
    inputs = (img,) if off_t is None else (img, off_t)

    def rule(g):
        g_img, g_ox, g_oy = kernels.translate_backward(data, ox, oy, g)
        if off_t is None:
            return (g_img,)
        return g_img, np.array([g_ox, g_oy], dtype=off_t.dtype).reshape(off_t.shape)

    return _result(out, inputs, rule, "translate_bilinear")


def splat_streaks(intensities, kernels_, theta, ys, xs, height, width, steps):
    """Render a single-channel rain layer of shape (H, W, 1).

    Support pixel ``p`` at ``(ys[p], xs[p])`` contributes ``intensities[p] *
    kernels_[p, i]`` translated by ``i * theta_px / steps`` for i = 0..steps,
    where ``theta_px = (theta[0] * width, theta[1] * height)``.  This equals the
    sum of ``steps + 1`` bilinear translations of the kernel-weighted noise
    field, evaluated sparsely.
    """
    a, k, th = as_tensor(intensities), as_tensor(kernels_), as_tensor(theta)
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    if k.shape != (a.shape[0], steps + 1):
        raise ContractError(f"kernels must be ({a.shape[0]}, {steps + 1}), got {k.shape}")
    tx, ty = _offset_pair(th)
    sx_per, sy_per = width / steps, height / steps
    sdx, sdy = tx * sx_per, ty * sy_per
    if not (math.isfinite(sdx) and math.isfinite(sdy)):
        raise InvalidArgumentError("theta must be finite")
    out = kernels.splat_forward(ys, xs, a.data, k.data, sdx, sdy, height, width)

    def rule(g):
        g_a, g_k, g_sdx, g_sdy = kernels.splat_backward(ys, xs, a.data, k.data, sdx, sdy, g[..., 0])
        g_th = np.array([g_sdx * sx_per, g_sdy * sy_per], dtype=th.dtype)
        return g_a, g_k, g_th

    return _result(out[..., None], (a, k, th), rule, "splat_streaks")
