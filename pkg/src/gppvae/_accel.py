"""Hot numeric kernels: direct 2-D convolution and bilinear image rotation.

Every kernel has a numba ``@njit`` implementation and a pure-numpy one.
Rotation uses numba when numba imports cleanly and the environment
variable ``GPPVAE_DISABLE_NUMBA`` is unset (or ``0``).  Convolution always
dispatches to the numpy version: its im2col layout hands the work to BLAS,
which beats the direct numba loops at the network's shapes (see
``benchmarks/bench_kernels.py``).  Kernels write
into caller-allocated output arrays so that all large buffers come from
numpy and are visible to ``tracemalloc``.
"""

import os

import numpy as np

_DISABLED = os.environ.get("GPPVAE_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by GPPVAE_DISABLE_NUMBA")
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _windows(x, kh, kw, stride, pad, ho, wo):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * ho : stride, : stride * wo : stride]


def np_conv2d(x, w, stride, pad, out):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = out.shape[2], out.shape[3]
    win = _windows(x, kh, kw, stride, pad, ho, wo)
    # (B, Ci, Ho, Wo, kh, kw) x (Co, Ci, kh, kw) -> (B, Ho, Wo, Co)
    res = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out[...] = res.transpose(0, 3, 1, 2)
    return out


def np_conv2d_grad_input(dout, w, stride, pad, dx):
    b, ci, h, wd = dx.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    # (B, Co, Ho, Wo) x (Co, Ci, kh, kw) -> (B, Ho, Wo, Ci, kh, kw)
    cols = np.tensordot(dout, w, axes=([1], [0]))
    dxp = np.zeros((b, ci, h + 2 * pad + stride, wd + 2 * pad + stride), dtype=dx.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx[...] = dxp[:, :, pad : pad + h, pad : pad + wd]
    return dx


def np_conv2d_grad_weight(x, dout, stride, pad, dw):
    kh, kw = dw.shape[2], dw.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    win = _windows(x, kh, kw, stride, pad, ho, wo)
    # (B, Co, Ho, Wo) x (B, Ci, Ho, Wo, kh, kw) -> (Co, Ci, kh, kw)
    dw[...] = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def np_rotate_bilinear(img, angle, out):
    s0, s1 = img.shape
    cy, cx = (s0 - 1) / 2.0, (s1 - 1) / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    ii, jj = np.meshgrid(np.arange(s0, dtype=np.float64), np.arange(s1, dtype=np.float64),
                         indexing="ij")
    dy, dx = ii - cy, jj - cx
    # inverse map: rotate output coordinates by -angle
    sy = ca * dy - sa * dx + cy
    sx = sa * dy + ca * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    padded = np.zeros((s0 + 2, s1 + 2), dtype=img.dtype)
    padded[1:-1, 1:-1] = img
    y0c = np.clip(y0 + 1, 0, s0 + 1)
    x0c = np.clip(x0 + 1, 0, s1 + 1)
    y1c = np.clip(y0 + 2, 0, s0 + 1)
    x1c = np.clip(x0 + 2, 0, s1 + 1)
    inside = (y0 >= -1) & (y0 <= s0 - 1) & (x0 >= -1) & (x0 <= s1 - 1)
    val = (padded[y0c, x0c] * (1 - fy) * (1 - fx) + padded[y0c, x1c] * (1 - fy) * fx
           + padded[y1c, x0c] * fy * (1 - fx) + padded[y1c, x1c] * fy * fx)
    out[...] = np.where(inside, val, 0.0)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def nb_conv2d(x, w, stride, pad, out):
        b, ci, h, wd = x.shape
        co, _, kh, kw = w.shape
        ho, wo = out.shape[2], out.shape[3]
        for n in prange(b):
            for o in range(co):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for c in range(ci):
                            for i in range(kh):
                                ih = oh * stride - pad + i
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(kw):
                                    iw = ow * stride - pad + j
                                    if iw < 0 or iw >= wd:
                                        continue
                                    acc += x[n, c, ih, iw] * w[o, c, i, j]
                        out[n, o, oh, ow] = acc
        return out

    @njit(cache=True, parallel=True)
    def nb_conv2d_grad_input(dout, w, stride, pad, dx):
        b, ci, h, wd = dx.shape
        co, _, kh, kw = w.shape
        ho, wo = dout.shape[2], dout.shape[3]
        for n in prange(b):
            for c in range(ci):
                for ih in range(h):
                    for iw in range(wd):
                        acc = 0.0
                        for i in range(kh):
                            t = ih + pad - i
                            if t < 0 or t % stride != 0:
                                continue
                            oh = t // stride
                            if oh >= ho:
                                continue
                            for j in range(kw):
                                u = iw + pad - j
                                if u < 0 or u % stride != 0:
                                    continue
                                ow = u // stride
                                if ow >= wo:
                                    continue
                                for o in range(co):
                                    acc += dout[n, o, oh, ow] * w[o, c, i, j]
                        dx[n, c, ih, iw] = acc
        return dx

    @njit(cache=True, parallel=True)
    def nb_conv2d_grad_weight(x, dout, stride, pad, dw):
        # one thread per output channel; the batch sum is serial so the
        # reduction order is fixed
        b, ci, h, wd = x.shape
        co, _, kh, kw = dw.shape
        ho, wo = dout.shape[2], dout.shape[3]
        for o in prange(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for n in range(b):
                            for oh in range(ho):
                                ih = oh * stride - pad + i
                                if ih < 0 or ih >= h:
                                    continue
                                for ow in range(wo):
                                    iw = ow * stride - pad + j
                                    if iw < 0 or iw >= wd:
                                        continue
                                    acc += x[n, c, ih, iw] * dout[n, o, oh, ow]
                        dw[o, c, i, j] = acc
        return dw

    @njit(cache=True)
    def nb_rotate_bilinear(img, angle, out):
        s0, s1 = img.shape
        cy, cx = (s0 - 1) / 2.0, (s1 - 1) / 2.0
        ca, sa = np.cos(angle), np.sin(angle)
        for i in range(s0):
            for j in range(s1):
                dy, dx = i - cy, j - cx
                sy = ca * dy - sa * dx + cy
                sx = sa * dy + ca * dx + cx
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                fy, fx = sy - y0, sx - x0
                acc = 0.0
                for di in range(2):
                    yy = y0 + di
                    if yy < 0 or yy >= s0:
                        continue
                    wy = fy if di == 1 else 1.0 - fy
                    for dj in range(2):
                        xx = x0 + dj
                        if xx < 0 or xx >= s1:
                            continue
                        wx = fx if dj == 1 else 1.0 - fx
                        acc += img[yy, xx] * wy * wx
                out[i, j] = acc
        return out

    rotate_bilinear = nb_rotate_bilinear
    BACKEND = "numba"
else:
    rotate_bilinear = np_rotate_bilinear
    BACKEND = "numpy"

conv2d = np_conv2d
conv2d_grad_input = np_conv2d_grad_input
conv2d_grad_weight = np_conv2d_grad_weight
