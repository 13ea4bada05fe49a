"""Block codec kernels: numba-jitted loops with a pure-numpy twin.

The two backends are bit-identical; both operate on a C-contiguous
(n_blocks, 32) float64 view. Selection happens at import time: numba is
used when importable unless the environment variable MXQUANT_DISABLE_NUMBA
is set to a non-empty value.

Shared conventions (both backends):
  * scale exponent = floor(log2(max|v|)) - emax, clamped to [-127, 127];
    an all-zero block gets exponent 0
  * element index = nearest entry of the ascending magnitude table,
    ties on exact midpoints resolved to the even index
  * scaling by 2^e is done with ldexp, which is exact
"""

import math
import os

import numpy as np

BLOCK = 32


# -- pure numpy backend --------------------------------------------------


def _scale_exps_np(xb, emax):
    maxabs = np.max(np.abs(xb), axis=1)
    _, ex = np.frexp(maxabs)  # maxabs = m * 2^ex, m in [0.5, 1)
    se = np.clip(ex.astype(np.int64) - 1 - emax, -127, 127)
    se[maxabs == 0.0] = 0
    return se


def _nearest_idx_np(r, values):
    hi = np.minimum(np.searchsorted(values, r, side="left"), len(values) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = r - values[lo]
    d_hi = values[hi] - r
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    return np.where(take_hi, hi, lo)


def encode_blocks_np(xb, values, emax, sign_shift):
    se = _scale_exps_np(xb, emax)
    r = np.abs(np.ldexp(xb, -se[:, None]))
    idx = _nearest_idx_np(r, values)
    codes = (np.signbit(xb).astype(np.uint8) << sign_shift) | idx.astype(np.uint8)
    return se.astype(np.int8), codes


def decode_blocks_np(scale_exps, codes, values, sign_shift):
    idx = codes & np.uint8((1 << sign_shift) - 1)
    mag = values[idx]
    out = np.ldexp(mag, scale_exps.astype(np.int64)[:, None])
    neg = (codes >> sign_shift) != 0
    return np.where(neg, -out, out)


def qdq_blocks_np(xb, values, emax):
    se = _scale_exps_np(xb, emax)
    r = np.abs(np.ldexp(xb, -se[:, None]))
    idx = _nearest_idx_np(r, values)
    mag = values[idx]
    y = np.ldexp(np.where(np.signbit(xb), -mag, mag), se[:, None])
    mask = r <= values[-1]
    return y, mask


# -- numba backend -------------------------------------------------------

_want_numba = not os.environ.get("MXQUANT_DISABLE_NUMBA")
HAS_NUMBA = False

if _want_numba:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        pass

if HAS_NUMBA:

    @njit(cache=True)
    def _scale_exp_nb(row, emax):
        maxabs = 0.0
        for j in range(row.shape[0]):
            a = abs(row[j])
            if a > maxabs:
                maxabs = a
        if maxabs == 0.0:
            return 0
        _, ex = math.frexp(maxabs)
        se = ex - 1 - emax
        if se < -127:
            se = -127
        elif se > 127:
            se = 127
        return se

    @njit(cache=True)
    def _nearest_idx_nb(r, values):
        n = values.shape[0]
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) >> 1
            if values[mid] < r:
                lo = mid + 1
            else:
                hi = mid
        i_hi = lo if lo < n else n - 1
        i_lo = i_hi - 1 if i_hi > 0 else 0
        d_lo = r - values[i_lo]
        d_hi = values[i_hi] - r
        if d_hi < d_lo or (d_hi == d_lo and i_hi % 2 == 0):
            return i_hi
        return i_lo

    @njit(cache=True)
    def encode_blocks_nb(xb, values, emax, sign_shift):
        n = xb.shape[0]
        se = np.empty(n, dtype=np.int8)
        codes = np.empty((n, BLOCK), dtype=np.uint8)
        for i in range(n):
            e = _scale_exp_nb(xb[i], emax)
            se[i] = e
            for j in range(BLOCK):
                x = xb[i, j]
                r = abs(math.ldexp(x, -e))
                idx = _nearest_idx_nb(r, values)
                neg = math.copysign(1.0, x) < 0.0
                codes[i, j] = (np.uint8(1) << sign_shift if neg else np.uint8(0)) | np.uint8(idx)
        return se, codes

    @njit(cache=True)
    def decode_blocks_nb(scale_exps, codes, values, sign_shift):
        n = codes.shape[0]
        out = np.empty((n, BLOCK), dtype=np.float64)
        mask = np.uint8((1 << sign_shift) - 1)
        for i in range(n):
            e = int(scale_exps[i])
            for j in range(BLOCK):
                c = codes[i, j]
                v = math.ldexp(values[c & mask], e)
                out[i, j] = -v if (c >> sign_shift) != 0 else v
        return out

    @njit(cache=True)
    def qdq_blocks_nb(xb, values, emax):
        n = xb.shape[0]
        y = np.empty((n, BLOCK), dtype=np.float64)
        mask = np.empty((n, BLOCK), dtype=np.bool_)
        vmax = values[values.shape[0] - 1]
        for i in range(n):
            e = _scale_exp_nb(xb[i], emax)
            for j in range(BLOCK):
                x = xb[i, j]
                r = abs(math.ldexp(x, -e))
                idx = _nearest_idx_nb(r, values)
                mag = values[idx]
                if math.copysign(1.0, x) < 0.0:
                    mag = -mag
                y[i, j] = math.ldexp(mag, e)
                mask[i, j] = r <= vmax
        return y, mask


if HAS_NUMBA:
    BACKEND = "numba"
    encode_blocks = encode_blocks_nb
    decode_blocks = decode_blocks_nb
    qdq_blocks = qdq_blocks_nb
else:
    BACKEND = "numpy"
    encode_blocks = encode_blocks_np
    decode_blocks = decode_blocks_np
    qdq_blocks = qdq_blocks_np
