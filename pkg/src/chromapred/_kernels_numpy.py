"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_kernels_numba`` with the same
signature and bit-identical integer results.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_MASK64 = (1 << 64) - 1


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H-k+1, W-k+1, C*k*k), patch order (c, u, v)."""
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
    ho, wo = h - k + 1, w - k + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * k * k)


def col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto a (B, C, H, W) grid."""
    b, ho, wo, _ = cols.shape
    patches = cols.reshape(b, ho, wo, c, k, k)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + ho, v:v + wo] += patches[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return out


def int_conv(x: np.ndarray, w: np.ndarray, bias: np.ndarray, shift: int) -> np.ndarray:
    """Valid integer convolution with round-half-up right shift.

    x: (C, H, W) int64, w: (Co, C, k, k) int64, bias: (Co,) int64.
    Accumulates in int64; returns int64 (Co, Ho, Wo).
    """
    co, ci, k, _ = w.shape
    _, h, wd = x.shape
    ho, wo = h - k + 1, wd - k + 1
    acc = np.zeros((co, ho, wo), dtype=np.int64)
    for u in range(k):
        for v in range(k):
            patch = x[:, u:u + ho, v:v + wo].reshape(ci, ho * wo)
            acc += (w[:, :, u, v] @ patch).reshape(co, ho, wo)
    acc += bias[:, None, None]
    if shift > 0:
        acc = (acc + (1 << (shift - 1))) >> shift
    return acc


def int_softmax_rows(
    logits: np.ndarray,
    temp_mult: int,
    temp_shift: int,
    exp_shift: int,
    floor_index: int,
    lut_exp: np.ndarray,
    lut_sum: np.ndarray,
    q: int,
) -> np.ndarray:
    """LUT softmax over the last axis of an int64 (R, B) array.

    ``floor_index`` is the clamp floor in LUT-grid units (negative).
    """
    z = (logits * temp_mult) >> temp_shift
    d = z - z.max(axis=1, keepdims=True)
    if exp_shift > 0:
        e = (d + (1 << (exp_shift - 1))) >> exp_shift
    else:
        e = d << (-exp_shift)
    e = np.maximum(e, floor_index)
    num = lut_exp[e - floor_index]
    den = num.sum(axis=1)
    idx = np.clip(den // q, 1, lut_sum.shape[0] - 1)
    return num * lut_sum[idx][:, None]


def xoshiro_fill(state: np.ndarray, n: int) -> np.ndarray:
    """Draw n raw 64-bit outputs of xoshiro256** and advance ``state`` in place."""
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        r = ((s1 * 5) & _MASK64)
        r = ((r << 7) | (r >> 57)) & _MASK64
        out[i] = (r * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return out
