"""Compiled loops for the memory-bound parts of convolution and pooling."""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x.shape
    cols = np.zeros((c * kh * kw, n * ho * wo), x.dtype)
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                r = (ci * kh + u) * kw + v
                for a in range(n):
                    for i in range(ho):
                        y = i * stride + u - pad
                        if y < 0 or y >= h:
                            continue
                        base = (a * ho + i) * wo
                        for j in range(wo):
                            xx = j * stride + v - pad
                            if 0 <= xx < w:
                                cols[r, base + j] = x[a, ci, y, xx]
    return cols


@numba.njit(cache=True)
def col2im(cols, n, c, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((n, c, h, w), cols.dtype)
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                r = (ci * kh + u) * kw + v
                for a in range(n):
                    for i in range(ho):
                        y = i * stride + u - pad
                        if y < 0 or y >= h:
                            continue
                        base = (a * ho + i) * wo
                        for j in range(wo):
                            xx = j * stride + v - pad
                            if 0 <= xx < w:
                                out[a, ci, y, xx] += cols[r, base + j]
    return out


@numba.njit(cache=True)
def maxpool_forward(x, k, stride, ho, wo):
    n, c, h, w = x.shape
    out = np.empty((n, c, ho, wo), x.dtype)
    idx = np.empty((n, c, ho, wo), np.int32)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[a, b, i * stride, j * stride]
                    bi = 0
                    for u in range(k):
                        for v in range(k):
                            val = x[a, b, i * stride + u, j * stride + v]
                            # strict comparison keeps the first maximum in row-major order
                            if val > best:
                                best = val
                                bi = u * k + v
                    out[a, b, i, j] = best
                    idx[a, b, i, j] = bi
    return out, idx


@numba.njit(cache=True)
def maxpool_backward(g, idx, k, stride, h, w):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, h, w), g.dtype)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    u = idx[a, b, i, j] // k
                    v = idx[a, b, i, j] % k
                    dx[a, b, i * stride + u, j * stride + v] += g[a, b, i, j]
    return dx
