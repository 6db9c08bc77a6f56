"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names ``col2im``, ``local_maxima`` and ``distance_filter`` dispatch
to the numba versions unless ``PHYSMLE_DISABLE_NUMBA`` is set; ``im2col`` always
uses the numpy strided copy, which is faster. All variants are importable
under ``*_numpy`` / ``*_numba`` for tests and the benchmark.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# im2col / col2im
#
# ``xp`` is an already padded input of shape (B, C, Hp, Wp). Columns are laid
# out as (B, C*kh*kw, oh*ow) so that ``weight.reshape(Co, -1) @ cols`` yields
# (B, Co, oh*ow) without a transpose.
# --------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, sh, sw, oh, ow):
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return view.reshape(b, c * kh * kw, oh * ow)


def col2im_numpy(cols, shape, kh, kw, sh, sw, oh, ow):
    b, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    c6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += c6[:, :, i, j]
    return out


@njit
def _im2col_nb(xp, kh, kw, sh, sw, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=xp.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        src = y * sh + i
                        base = y * ow
                        for x in range(ow):
                            cols[n, row, base + x] = xp[n, ch, src, x * sw + j]
    return cols


@njit
def _col2im_nb(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow):
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        dst = y * sh + i
                        base = y * ow
                        for x in range(ow):
                            out[n, ch, dst, x * sw + j] += cols[n, row, base + x]
    return out


def im2col_numba(xp, kh, kw, sh, sw, oh, ow):
    return _im2col_nb(np.ascontiguousarray(xp), kh, kw, sh, sw, oh, ow)


def col2im_numba(cols, shape, kh, kw, sh, sw, oh, ow):
    b, c, hp, wp = shape
    return _col2im_nb(np.ascontiguousarray(cols), b, c, hp, wp, kh, kw, sh, sw, oh, ow)


# --------------------------------------------------------------------------
# Peak scanning
# --------------------------------------------------------------------------


def local_maxima_numpy(x):
    """Indices of local maxima; plateaus report their (left-biased) midpoint."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n < 3:
        return np.empty(0, dtype=np.int64)
    # compress plateaus: keep the first sample of every run of equal values
    change = np.flatnonzero(np.diff(x) != 0) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change - 1, [n - 1]))
    vals = x[starts]
    if vals.size < 3:
        return np.empty(0, dtype=np.int64)
    is_peak = (vals[1:-1] > vals[:-2]) & (vals[1:-1] > vals[2:])
    k = np.flatnonzero(is_peak) + 1
    return ((starts[k] + ends[k]) // 2).astype(np.int64)


@njit
def _local_maxima_nb(x):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    m = 0
    i = 1
    while i < n - 1:
        if x[i - 1] < x[i]:
            ahead = i + 1
            while ahead < n - 1 and x[ahead] == x[i]:
                ahead += 1
            if x[ahead] < x[i]:
                out[m] = (i + ahead - 1) // 2
                m += 1
                i = ahead
                continue
        i += 1
    return out[:m]


def local_maxima_numba(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.size < 3:
        return np.empty(0, dtype=np.int64)
    return _local_maxima_nb(x)


def distance_filter_numpy(peaks, heights, distance):
    """Greedy minimum-distance filter, tallest first; returns kept indices sorted."""
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size == 0 or distance <= 1:
        return peaks.copy()
    order = np.argsort(-np.asarray(heights), kind="stable")
    keep = np.ones(peaks.size, dtype=bool)
    for idx in order:
        if not keep[idx]:
            continue
        close = np.abs(peaks - peaks[idx]) < distance
        close[idx] = False
        keep &= ~close
    return peaks[keep]


@njit
def _distance_filter_nb(peaks, heights, distance):
    n = peaks.shape[0]
    order = np.argsort(-heights, kind="mergesort")
    keep = np.ones(n, dtype=np.bool_)
    for oi in range(n):
        j = order[oi]
        if not keep[j]:
            continue
        k = j - 1
        while k >= 0 and peaks[j] - peaks[k] < distance:
            keep[k] = False
            k -= 1
        k = j + 1
        while k < n and peaks[k] - peaks[j] < distance:
            keep[k] = False
            k += 1
    return peaks[keep]


def distance_filter_numba(peaks, heights, distance):
    peaks = np.ascontiguousarray(peaks, dtype=np.int64)
    if peaks.size == 0 or distance <= 1:
        return peaks.copy()
    return _distance_filter_nb(peaks, np.ascontiguousarray(heights, dtype=np.float64), int(distance))


# The strided-view copy beats the compiled loop for im2col (see benchmarks/),
# so only the scatter and peak kernels switch backend.
im2col = im2col_numpy
if USE_NUMBA:
    col2im = col2im_numba
    local_maxima = local_maxima_numba
    distance_filter = distance_filter_numba
else:
    col2im = col2im_numpy
    local_maxima = local_maxima_numpy
    distance_filter = distance_filter_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
