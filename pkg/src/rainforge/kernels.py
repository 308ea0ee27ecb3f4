"""Inner loops of the rain renderer and the CNN layers.

Each kernel exists twice: a numba ``@njit`` loop nest and a vectorised numpy
version.  ``_accel.enabled()`` picks one at call time.  Both write into
arrays of the caller's dtype, so float32 and float64 pipelines share code.

Convolution is numpy-only in both modes: im2col + BLAS beats a scalar loop
nest by a wide margin on the layer sizes used here.
"""
import numpy as np

from . import _accel
from ._accel import optional_njit

# ---------------------------------------------------------------------------
# streak splatting: sum_i k_{p,i} * a_p placed at support_p + i * step
# ---------------------------------------------------------------------------


@optional_njit(cache=True)
def _splat_forward_nb(ys, xs, amp, kern, sdx, sdy, out):
    H, W = out.shape
    P, S1 = kern.shape
    for p in range(P):
        for i in range(S1):
            v = amp[p] * kern[p, i]
            if v == 0.0:
                continue
            cy = ys[p] + i * sdy
            cx = xs[p] + i * sdx
            fy0 = np.floor(cy)
            fx0 = np.floor(cx)
            y0 = int(fy0)
            x0 = int(fx0)
            fy = cy - fy0
            fx = cx - fx0
            if 0 <= y0 < H:
                if 0 <= x0 < W:
                    out[y0, x0] += v * ((1.0 - fy) * (1.0 - fx))
                if 0 <= x0 + 1 < W:
                    out[y0, x0 + 1] += v * ((1.0 - fy) * fx)
            if 0 <= y0 + 1 < H:
                if 0 <= x0 < W:
                    out[y0 + 1, x0] += v * (fy * (1.0 - fx))
                if 0 <= x0 + 1 < W:
                    out[y0 + 1, x0 + 1] += v * (fy * fx)
    return out


@optional_njit(cache=True)
def _splat_backward_nb(ys, xs, amp, kern, sdx, sdy, g, g_amp, g_kern):
    H, W = g.shape
    P, S1 = kern.shape
    g_sdx = 0.0
    g_sdy = 0.0
    for p in range(P):
        acc = 0.0
        for i in range(S1):
            cy = ys[p] + i * sdy
            cx = xs[p] + i * sdx
            fy0 = np.floor(cy)
            fx0 = np.floor(cx)
            y0 = int(fy0)
            x0 = int(fx0)
            fy = cy - fy0
            fx = cx - fx0
            g00 = 0.0
            g01 = 0.0
            g10 = 0.0
            g11 = 0.0
            if 0 <= y0 < H:
                if 0 <= x0 < W:
                    g00 = g[y0, x0]
                if 0 <= x0 + 1 < W:
                    g01 = g[y0, x0 + 1]
            if 0 <= y0 + 1 < H:
                if 0 <= x0 < W:
                    g10 = g[y0 + 1, x0]
                if 0 <= x0 + 1 < W:
                    g11 = g[y0 + 1, x0 + 1]
            s = ((1.0 - fy) * (1.0 - fx)) * g00 + ((1.0 - fy) * fx) * g01 \
                + (fy * (1.0 - fx)) * g10 + (fy * fx) * g11
            acc += kern[p, i] * s
            g_kern[p, i] = amp[p] * s
            v = amp[p] * kern[p, i]
            d_fx = (1.0 - fy) * (g01 - g00) + fy * (g11 - g10)
            d_fy = (1.0 - fx) * (g10 - g00) + fx * (g11 - g01)
            g_sdx += v * i * d_fx
            g_sdy += v * i * d_fy
        g_amp[p] = acc
    return g_sdx, g_sdy


def _splat_geometry(ys, xs, S1, sdx, sdy):
    steps = np.arange(S1, dtype=np.float64)
    cy = ys[:, None].astype(np.float64) + steps[None, :] * sdy
    cx = xs[:, None].astype(np.float64) + steps[None, :] * sdx
    y0 = np.floor(cy)
    x0 = np.floor(cx)
    return y0.astype(np.int64), x0.astype(np.int64), cy - y0, cx - x0, steps


_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _corner_weights(fy, fx):
    return ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx)


def _splat_forward_np(ys, xs, amp, kern, sdx, sdy, out):
    H, W = out.shape
    y0, x0, fy, fx, _ = _splat_geometry(ys, xs, kern.shape[1], sdx, sdy)
    v = amp[:, None].astype(np.float64) * kern
    total = np.zeros(H * W)
    for (dy, dx), w in zip(_CORNERS, _corner_weights(fy, fx)):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        total += np.bincount((yy * W + xx)[ok], weights=(v * w)[ok], minlength=H * W)
    out += total.reshape(H, W).astype(out.dtype)
    return out


def _gather_padded(g, yy, xx):
    H, W = g.shape
    ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
    vals = np.zeros(yy.shape, dtype=np.float64)
    vals[ok] = g[yy[ok], xx[ok]]
    return vals


def _splat_backward_np(ys, xs, amp, kern, sdx, sdy, g, g_amp, g_kern):
    y0, x0, fy, fx, steps = _splat_geometry(ys, xs, kern.shape[1], sdx, sdy)
    g00, g01, g10, g11 = (_gather_padded(g, y0 + dy, x0 + dx) for dy, dx in _CORNERS)
    w00, w01, w10, w11 = _corner_weights(fy, fx)
    s = w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11
    g_amp[:] = (kern * s).sum(axis=1)
    g_kern[:] = amp[:, None] * s
    v = amp[:, None].astype(np.float64) * kern
    d_fx = (1.0 - fy) * (g01 - g00) + fy * (g11 - g10)
    d_fy = (1.0 - fx) * (g10 - g00) + fx * (g11 - g01)
    return float((v * steps * d_fx).sum()), float((v * steps * d_fy).sum())


def splat_forward(ys, xs, amp, kern, sdx, sdy, height, width):
    """Render streaks: every support pixel ``p`` deposits ``amp[p] * kern[p, i]``
    bilinearly at ``(ys[p] + i*sdy, xs[p] + i*sdx)``; out-of-frame mass is dropped."""
    out = np.zeros((height, width), dtype=amp.dtype)
    fn = _splat_forward_nb if _accel.enabled() else _splat_forward_np
    return fn(ys, xs, amp, kern, float(sdx), float(sdy), out)


def splat_backward(ys, xs, amp, kern, sdx, sdy, g):
    """Vector-Jacobian product of :func:`splat_forward`.

    Returns ``(g_amp, g_kern, g_sdx, g_sdy)`` where the last two are
    derivatives with respect to the per-step pixel offsets.
    """
    g = np.ascontiguousarray(g)
    g_amp = np.zeros_like(amp)
    g_kern = np.zeros_like(kern)
    fn = _splat_backward_nb if _accel.enabled() else _splat_backward_np
    g_sdx, g_sdy = fn(ys, xs, amp, kern, float(sdx), float(sdy), g, g_amp, g_kern)
    return g_amp, g_kern, g_sdx, g_sdy


# ---------------------------------------------------------------------------
# dense bilinear translation with zero padding
# ---------------------------------------------------------------------------


def _translate_split(ox, oy):
    # out(y, x) samples img at (y - oy, x - ox) = (y + iy + fy, x + ix + fx)
    iy = np.floor(-oy)
    ix = np.floor(-ox)
    return int(iy), int(ix), -oy - iy, -ox - ix


@optional_njit(cache=True)
def _translate_forward_nb(img, iy, ix, fy, fx, out):
    H, W, C = img.shape
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    for y in range(H):
        sy = y + iy
        for x in range(W):
            sx = x + ix
            for c in range(C):
                acc = 0.0
                if 0 <= sy < H:
                    if 0 <= sx < W:
                        acc += w00 * img[sy, sx, c]
                    if 0 <= sx + 1 < W:
                        acc += w01 * img[sy, sx + 1, c]
                if 0 <= sy + 1 < H:
                    if 0 <= sx < W:
                        acc += w10 * img[sy + 1, sx, c]
                    if 0 <= sx + 1 < W:
                        acc += w11 * img[sy + 1, sx + 1, c]
                out[y, x, c] = acc
    return out


@optional_njit(cache=True)
def _translate_backward_nb(img, iy, ix, fy, fx, g, g_img):
    H, W, C = img.shape
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    d_fx = 0.0
    d_fy = 0.0
    for y in range(H):
        sy = y + iy
        for x in range(W):
            sx = x + ix
            for c in range(C):
                gv = g[y, x, c]
                if gv == 0.0:
                    continue
                a = 0.0
                b = 0.0
                cc = 0.0
                d = 0.0
                if 0 <= sy < H:
                    if 0 <= sx < W:
                        a = img[sy, sx, c]
                        g_img[sy, sx, c] += w00 * gv
                    if 0 <= sx + 1 < W:
                        b = img[sy, sx + 1, c]
                        g_img[sy, sx + 1, c] += w01 * gv
                if 0 <= sy + 1 < H:
                    if 0 <= sx < W:
                        cc = img[sy + 1, sx, c]
                        g_img[sy + 1, sx, c] += w10 * gv
                    if 0 <= sx + 1 < W:
                        d = img[sy + 1, sx + 1, c]
                        g_img[sy + 1, sx + 1, c] += w11 * gv
                d_fx += gv * ((1.0 - fy) * (b - a) + fy * (d - cc))
                d_fy += gv * ((1.0 - fx) * (cc - a) + fx * (d - b))
    return d_fx, d_fy


def _shift(img, sy, sx):
    """``out[y, x] = img[y + sy, x + sx]`` with zeros outside."""
    H, W = img.shape[:2]
    out = np.zeros_like(img)
    if abs(sy) >= H or abs(sx) >= W:
        return out
    dst_y = slice(max(0, -sy), H - max(0, sy))
    src_y = slice(max(0, sy), H - max(0, -sy))
    dst_x = slice(max(0, -sx), W - max(0, sx))
    src_x = slice(max(0, sx), W - max(0, -sx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def _translate_forward_np(img, iy, ix, fy, fx, out):
    out[...] = 0
    for (dy, dx), w in zip(_CORNERS, _corner_weights(fy, fx)):
        if w != 0.0:
            out += w * _shift(img, iy + dy, ix + dx)
    return out


def _translate_backward_np(img, iy, ix, fy, fx, g, g_img):
    s = [_shift(img, iy + dy, ix + dx) for dy, dx in _CORNERS]
    for (dy, dx), w in zip(_CORNERS, _corner_weights(fy, fx)):
        if w != 0.0:
            g_img += w * _shift(g, -(iy + dy), -(ix + dx))
    d_fx = float((g * ((1.0 - fy) * (s[1] - s[0]) + fy * (s[3] - s[2]))).sum())
    d_fy = float((g * ((1.0 - fx) * (s[2] - s[0]) + fx * (s[3] - s[1]))).sum())
    return d_fx, d_fy


def translate_forward(img, ox, oy):
    """Bilinear translation of an (H, W, C) image by ``(ox, oy)`` pixels."""
    iy, ix, fy, fx = _translate_split(ox, oy)
    out = np.empty_like(img)
    fn = _translate_forward_nb if _accel.enabled() else _translate_forward_np
    return fn(img, iy, ix, fy, fx, out)


def translate_backward(img, ox, oy, g):
    """Returns ``(g_img, g_ox, g_oy)``."""
    iy, ix, fy, fx = _translate_split(ox, oy)
    g_img = np.zeros_like(img)
    fn = _translate_backward_nb if _accel.enabled() else _translate_backward_np
    d_fx, d_fy = fn(img, iy, ix, fy, fx, np.ascontiguousarray(g), g_img)
    # fx = -ox - floor(-ox)
    return g_img, -d_fx, -d_fy


# ---------------------------------------------------------------------------
# 2x2 max pooling, NHWC, trailing odd row/column dropped
# ---------------------------------------------------------------------------


@optional_njit(cache=True)
def _maxpool_forward_nb(x, out, arg):
    B, Ho, Wo, C = out.shape
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = x[b, 2 * i, 2 * j, c]
                    k = 0
                    v = x[b, 2 * i, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, 2 * i + 1, 2 * j, c]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, c]
                    if v > best:
                        best = v
                        k = 3
                    out[b, i, j, c] = best
                    arg[b, i, j, c] = k
    return out


@optional_njit(cache=True)
def _maxpool_backward_nb(arg, g, gx):
    B, Ho, Wo, C = g.shape
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    k = arg[b, i, j, c]
                    gx[b, 2 * i + k // 2, 2 * j + k % 2, c] = g[b, i, j, c]
    return gx


def _pool_windows(x):
    B, H, W, C = x.shape
    Ho, Wo = H // 2, W // 2
    v = x[:, : 2 * Ho, : 2 * Wo].reshape(B, Ho, 2, Wo, 2, C)
    return v.transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, 4)


def maxpool_forward(x):
    """Returns ``(out, argmax)``; argmax is the 0..3 position inside each window
    (first maximum wins on ties)."""
    B, H, W, C = x.shape
    if _accel.enabled():
        out = np.empty((B, H // 2, W // 2, C), dtype=x.dtype)
        arg = np.empty(out.shape, dtype=np.int8)
        _maxpool_forward_nb(np.ascontiguousarray(x), out, arg)
        return out, arg
    win = _pool_windows(x)
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(arg, g, in_shape):
    gx = np.zeros(in_shape, dtype=g.dtype)
    if _accel.enabled():
        return _maxpool_backward_nb(arg, np.ascontiguousarray(g), gx)
    B, Ho, Wo, C = g.shape
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)) * g[..., None]
    block = onehot.reshape(B, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    gx[:, : 2 * Ho, : 2 * Wo] = block.reshape(B, 2 * Ho, 2 * Wo, C)
    return gx


# ---------------------------------------------------------------------------
# same-padded stride-1 convolution, NHWC input, (kh, kw, Cin, Cout) weights
# ---------------------------------------------------------------------------


def _im2col(x, kh, kw):
    B, H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((B, H, W, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, kh * kw * C)


def _col2im(cols, x_shape, kh, kw):
    B, H, W, C = x_shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(B, H, W, kh, kw, C)
    xp = np.zeros((B, H + 2 * ph, W + 2 * pw, C), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + H, j:j + W, :] += cols[:, :, :, i, j, :]
    return xp[:, ph:ph + H, pw:pw + W, :]


def conv_forward(x, w):
    """Returns ``(out, cols)``; keep ``cols`` for :func:`conv_backward`."""
    kh, kw, cin, cout = w.shape
    B, H, W, _ = x.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(kh * kw * cin, cout)
    return out.reshape(B, H, W, cout), cols


def conv_backward(cols, x_shape, w, g):
    """Returns ``(g_x, g_w)`` for :func:`conv_forward`."""
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    g_w = (cols.T @ g2).reshape(w.shape)
    g_x = _col2im(g2 @ w.reshape(kh * kw * cin, cout).T, x_shape, kh, kw)
    return g_x, g_w
