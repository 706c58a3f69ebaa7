"""Compiled inner loops for channels-last max pooling."""

import numba
import numpy as np


@numba.njit(cache=True)
def maxpool2x2_forward(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty((n, h // 2, w // 2, c), dtype=np.uint8)
    for b in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    best = x[b, 2 * i, 2 * j, ch]
                    k = 0
                    v = x[b, 2 * i, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, 2 * i + 1, 2 * j, ch]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, 2 * i + 1, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 3
                    out[b, i, j, ch] = best
                    arg[b, i, j, ch] = k
    return out, arg


@numba.njit(cache=True)
def maxpool2x2_backward(g, arg):
    n, h2, w2, c = g.shape
    gx = np.zeros((n, 2 * h2, 2 * w2, c), dtype=g.dtype)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    k = arg[b, i, j, ch]
                    gx[b, 2 * i + k // 2, 2 * j + k % 2, ch] = g[b, i, j, ch]
    return gx


@numba.njit(cache=True)
def im2col_into(xp, start, stop, k, stride, ho, wo, cols):
    """Write patches of images ``start:stop`` of padded channels-last ``xp`` into ``cols``.

    Rows are (image, out_row, out_col); columns are (kernel_row, kernel_col,
    channel), so each kernel row is one contiguous run of ``k * c`` values.
    """
    n, hp, wp, c = xp.shape
    run = k * c
    flat = xp.reshape(n, hp, wp * c)
    row = 0
    for b in range(start, stop):
        for i in range(ho):
            for j in range(wo):
                base = j * stride * c
                for di in range(k):
                    src = flat[b, i * stride + di]
                    off = di * run
                    for m in range(run):
                        cols[row, off + m] = src[base + m]
                row += 1


@numba.njit(cache=True)
def col2im_add(dcols, start, stop, k, stride, ho, wo, gxp):
    n, hp, wp, c = gxp.shape
    run = k * c
    flat = gxp.reshape(n, hp, wp * c)
    row = 0
    for b in range(start, stop):
        for i in range(ho):
            for j in range(wo):
                base = j * stride * c
                for di in range(k):
                    dst = flat[b, i * stride + di]
                    off = di * run
                    for m in range(run):
                        dst[base + m] += dcols[row, off + m]
                row += 1
