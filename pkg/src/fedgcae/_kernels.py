"""Compiled data-movement kernels (im2col, pooling, shifts).

Only memory-bound loops live here; the arithmetic-heavy products stay as
BLAS matmuls in :mod:`fedgcae.nn`.  Every loop runs in a fixed order, so
results are bitwise reproducible.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def im2col(x, k):
    n, h, w, c = x.shape
    p = k // 2
    cols = np.zeros((n * h * w, k * k * c))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                row = (i * h + y) * w + xx
                for dy in range(k):
                    sy = y + dy - p
                    if sy < 0 or sy >= h:
                        continue
                    for dx in range(k):
                        sx = xx + dx - p
                        if sx < 0 or sx >= w:
                            continue
                        base = (dy * k + dx) * c
                        for ch in range(c):
                            cols[row, base + ch] = x[i, sy, sx, ch]
    return cols


@njit(cache=True, nogil=True)
def col2im(cols, n, h, w, c, k):
    p = k // 2
    out = np.zeros((n, h, w, c))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                row = (i * h + y) * w + xx
                for dy in range(k):
                    sy = y + dy - p
                    if sy < 0 or sy >= h:
                        continue
                    for dx in range(k):
                        sx = xx + dx - p
                        if sx < 0 or sx >= w:
                            continue
                        base = (dy * k + dx) * c
                        for ch in range(c):
                            out[i, sy, sx, ch] += cols[row, base + ch]
    return out


@njit(cache=True, nogil=True)
def tap_sum(part, n, h, w, k, c_out):
    """out[y, x] = sum over taps of part[y + dy - p, x + dx - p, tap]."""
    p = k // 2
    part = part.reshape(n, h, w, k * k, c_out)
    out = np.zeros((n, h, w, c_out))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                for dy in range(k):
                    sy = y + dy - p
                    if sy < 0 or sy >= h:
                        continue
                    for dx in range(k):
                        sx = xx + dx - p
                        if sx < 0 or sx >= w:
                            continue
                        t = dy * k + dx
                        for ch in range(c_out):
                            out[i, y, xx, ch] += part[i, sy, sx, t, ch]
    return out


@njit(cache=True, nogil=True)
def phases_to_image(ph, n, h, w, c, bias):
    """(n*h*w, 2*2*c) phase-major rows -> (n, 2h, 2w, c) image, plus bias."""
    out = np.empty((n, 2 * h, 2 * w, c))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                row = (i * h + y) * w + xx
                for a in range(2):
                    for b in range(2):
                        base = (a * 2 + b) * c
                        for ch in range(c):
                            out[i, 2 * y + a, 2 * xx + b, ch] = ph[row, base + ch] + bias[ch]
    return out


@njit(cache=True, nogil=True)
def image_to_phases(g):
    n, h2, w2, c = g.shape
    h, w = h2 // 2, w2 // 2
    ph = np.empty((n * h * w, 4 * c))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                row = (i * h + y) * w + xx
                for a in range(2):
                    for b in range(2):
                        base = (a * 2 + b) * c
                        for ch in range(c):
                            ph[row, base + ch] = g[i, 2 * y + a, 2 * xx + b, ch]
    return ph


@njit(cache=True, nogil=True)
def maxpool_forward(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c))
    idx = np.empty((n, h // 2, w // 2, c), np.int8)
    for i in range(n):
        for y in range(h // 2):
            for xx in range(w // 2):
                for ch in range(c):
                    m = x[i, 2 * y, 2 * xx, ch]
                    best = 0
                    v = x[i, 2 * y, 2 * xx + 1, ch]
                    if v > m:
                        m = v
                        best = 1
                    v = x[i, 2 * y + 1, 2 * xx, ch]
                    if v > m:
                        m = v
                        best = 2
                    v = x[i, 2 * y + 1, 2 * xx + 1, ch]
                    if v > m:
                        m = v
                        best = 3
                    out[i, y, xx, ch] = m
                    idx[i, y, xx, ch] = best
    return out, idx


@njit(cache=True, nogil=True)
def maxpool_backward(g, idx):
    n, h, w, c = g.shape
    out = np.zeros((n, 2 * h, 2 * w, c))
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                for ch in range(c):
                    j = idx[i, y, xx, ch]
                    out[i, 2 * y + j // 2, 2 * xx + j % 2, ch] = g[i, y, xx, ch]
    return out


@njit(cache=True, nogil=True)
def relu_mask_(g, out):
    """In place: zero ``g`` wherever the ReLU output is not positive."""
    gf = g.reshape(-1)
    of = out.reshape(-1)
    for i in range(gf.size):
        if of[i] <= 0.0:
            gf[i] = 0.0
    return g
