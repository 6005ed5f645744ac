"""Hot loops of the conv/pool layers.

Every kernel has a numba and a numpy version with identical semantics. The
public names are bound at import time according to ``_accel.USE_NUMBA``.
Images are NHWC; im2col columns are ordered (kernel_row, kernel_col, channel).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


def _out_size(n, k, stride):
    return (n - k) // stride + 1


# -- numpy ------------------------------------------------------------------


def im2col_numpy(x, kh, kw, stride):
    n, h, w, c = x.shape
    oh, ow = _out_size(h, kh, stride), _out_size(w, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :oh, :ow].transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * oh * ow, kh * kw * c)


def col2im_numpy(cols, x_shape, kh, kw, stride):
    n, h, w, c = x_shape
    oh, ow = _out_size(h, kh, stride), _out_size(w, kw, stride)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return dx


def maxpool_forward_numpy(x, window):
    n, h, w, c = x.shape
    oh, ow = h // window, w // window
    xr = x.reshape(n, oh, window, ow, window, c).transpose(0, 1, 3, 5, 2, 4)
    xr = xr.reshape(n, oh, ow, c, window * window)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward_numpy(dout, idx, x_shape, window):
    n, h, w, c = x_shape
    oh, ow = h // window, w // window
    g = np.zeros((n, oh, ow, c, window * window))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, oh, ow, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    return g.reshape(n, h, w, c)


# -- numba ------------------------------------------------------------------


@njit
def _im2col_numba(xf, n, h, w, c, kh, kw, stride):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    span = kw * c  # one kernel row is a contiguous run of the (w * c) image row
    cols = np.empty((n * oh * ow, kh * span))
    for b in range(n):
        for r in range(oh):
            for q in range(ow):
                row = (b * oh + r) * ow + q
                start = q * stride * c
                for i in range(kh):
                    src = r * stride + i
                    for t in range(span):
                        cols[row, i * span + t] = xf[b, src, start + t]
    return cols


def im2col_numba(x, kh, kw, stride):
    n, h, w, c = x.shape
    xf = np.ascontiguousarray(x).reshape(n, h, w * c)
    return _im2col_numba(xf, n, h, w, c, kh, kw, stride)


@njit
def _col2im_numba(cols, n, h, w, c, kh, kw, stride):
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    dx = np.zeros((n, h, w, c))
    for b in range(n):
        for r in range(oh):
            for q in range(ow):
                row = (b * oh + r) * ow + q
                col = 0
                for i in range(kh):
                    for j in range(kw):
                        for ch in range(c):
                            dx[b, r * stride + i, q * stride + j, ch] += cols[row, col]
                            col += 1
    return dx


def col2im_numba(cols, x_shape, kh, kw, stride):
    n, h, w, c = x_shape
    return _col2im_numba(np.ascontiguousarray(cols), n, h, w, c, kh, kw, stride)


@njit
def maxpool_forward_numba(x, window):
    n, h, w, c = x.shape
    oh = h // window
    ow = w // window
    out = np.empty((n, oh, ow, c))
    idx = np.empty((n, oh, ow, c), dtype=np.int64)
    for b in range(n):
        for r in range(oh):
            for q in range(ow):
                for ch in range(c):
                    best = x[b, r * window, q * window, ch]
                    arg = 0
                    for i in range(window):
                        for j in range(window):
                            v = x[b, r * window + i, q * window + j, ch]
                            if v > best:
                                best = v
                                arg = i * window + j
                    out[b, r, q, ch] = best
                    idx[b, r, q, ch] = arg
    return out, idx


@njit
def _maxpool_backward_numba(dout, idx, n, h, w, c, window):
    dx = np.zeros((n, h, w, c))
    oh, ow = dout.shape[1], dout.shape[2]
    for b in range(n):
        for r in range(oh):
            for q in range(ow):
                for ch in range(c):
                    k = idx[b, r, q, ch]
                    dx[b, r * window + k // window, q * window + k % window, ch] += dout[b, r, q, ch]
    return dx


def maxpool_backward_numba(dout, idx, x_shape, window):
    n, h, w, c = x_shape
    return _maxpool_backward_numba(np.ascontiguousarray(dout), idx, n, h, w, c, window)


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    maxpool_forward = maxpool_forward_numba
    maxpool_backward = maxpool_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool_forward = maxpool_forward_numpy
    maxpool_backward = maxpool_backward_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
