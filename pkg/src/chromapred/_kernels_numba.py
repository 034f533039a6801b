"""numba-compiled kernels; same contracts as ``_kernels_numpy``."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, k):
    b, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    out = np.empty((b, ho, wo, c * k * k), dtype=x.dtype)
    for n in range(b):
        for y in range(ho):
            for xx in range(wo):
                j = 0
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            out[n, y, xx, j] = x[n, ch, y + u, xx + v]
                            j += 1
    return out


@njit(cache=True)
def col2im(cols, c, h, w, k):
    b, ho, wo, _ = cols.shape
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for n in range(b):
        for y in range(ho):
            for xx in range(wo):
                j = 0
                for ch in range(c):
                    for u in range(k):
                        for v in range(k):
                            out[n, ch, y + u, xx + v] += cols[n, y, xx, j]
                            j += 1
    return out


@njit(cache=True)
def int_conv(x, w, bias, shift):
    co, ci, k, _ = w.shape
    _, h, wd = x.shape
    ho, wo = h - k + 1, wd - k + 1
    out = np.empty((co, ho, wo), dtype=np.int64)
    rnd = np.int64(1) << (shift - 1) if shift > 0 else np.int64(0)
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                acc = np.int64(bias[o])
                for ch in range(ci):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, ch, u, v] * x[ch, y + u, xx + v]
                if shift > 0:
                    acc = (acc + rnd) >> shift
                out[o, y, xx] = acc
    return out


@njit(cache=True)
def int_softmax_rows(logits, temp_mult, temp_shift, exp_shift, floor_index, lut_exp, lut_sum, q):
    r, n = logits.shape
    out = np.empty((r, n), dtype=np.int64)
    z = np.empty(n, dtype=np.int64)
    last = lut_sum.shape[0] - 1
    for row in range(r):
        zmax = (logits[row, 0] * temp_mult) >> temp_shift
        for i in range(n):
            z[i] = (logits[row, i] * temp_mult) >> temp_shift
            if z[i] > zmax:
                zmax = z[i]
        den = np.int64(0)
        for i in range(n):
            d = z[i] - zmax
            if exp_shift > 0:
                e = (d + (np.int64(1) << (exp_shift - 1))) >> exp_shift
            else:
                e = d << (-exp_shift)
            if e < floor_index:
                e = floor_index
            out[row, i] = lut_exp[e - floor_index]
            den += out[row, i]
        l = den // q
        if l < 1:
            l = 1
        if l > last:
            l = last
        m = lut_sum[l]
        for i in range(n):
            out[row, i] = out[row, i] * m
    return out


@njit(cache=True)
def xoshiro_fill(state, n):
    out = np.empty(n, dtype=np.uint64)
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    five, nine = np.uint64(5), np.uint64(9)
    for i in range(n):
        r = s1 * five
        r = (r << np.uint64(7)) | (r >> np.uint64(57))
        out[i] = r * nine
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out
