"""Hot inner loops, each with a numba version and a vectorized numpy version.

The public names (``uniform_order``, ``bilinear_warp``, ``blur_axis``) dispatch
on ``_accel.USE_NUMBA``. Both variants are importable directly so tests and
benchmarks can compare them.
"""

import numpy as np

from lowbudget._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# Binned uniform selection
# ---------------------------------------------------------------------------


@njit
def _before(s_a, i_a, s_b, i_b):
    # max-priority on score, lower index wins ties
    return s_a > s_b or (s_a == s_b and i_a < i_b)


@njit
def _heap_push(heap_s, heap_i, size, s, i):
    pos = size
    heap_s[pos] = s
    heap_i[pos] = i
    while pos > 0:
        parent = (pos - 1) // 2
        if _before(heap_s[pos], heap_i[pos], heap_s[parent], heap_i[parent]):
            heap_s[pos], heap_s[parent] = heap_s[parent], heap_s[pos]
            heap_i[pos], heap_i[parent] = heap_i[parent], heap_i[pos]
            pos = parent
        else:
            break
    return size + 1


@njit
def _heap_pop(heap_s, heap_i, size):
    top = heap_i[0]
    size -= 1
    heap_s[0] = heap_s[size]
    heap_i[0] = heap_i[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        right = left + 1
        best = pos
        if left < size and _before(heap_s[left], heap_i[left], heap_s[best], heap_i[best]):
            best = left
        if right < size and _before(heap_s[right], heap_i[right], heap_s[best], heap_i[best]):
            best = right
        if best == pos:
            break
        heap_s[pos], heap_s[best] = heap_s[best], heap_s[pos]
        heap_i[pos], heap_i[best] = heap_i[best], heap_i[pos]
        pos = best
    return top, size


@njit
def uniform_order_numba(scores, bins, k):
    m = scores.shape[0]
    order = np.argsort(-scores, kind="mergesort")

    counts = np.zeros(k + 1, np.int64)
    for i in range(m):
        b = bins[i]
        if b >= 1 and b <= k:
            counts[b] += 1
    starts = np.zeros(k + 2, np.int64)
    for j in range(1, k + 1):
        starts[j + 1] = starts[j] + counts[j]
    members = np.empty(starts[k + 1], np.int64)
    fill = starts.copy()
    for r in range(m):
        i = order[r]
        b = bins[i]
        if b >= 1 and b <= k:
            members[fill[b]] = i
            fill[b] += 1

    out = np.empty(k, np.int64)
    n_out = 0
    heap_s = np.empty(k, np.float64)
    heap_i = np.empty(k, np.int64)
    depth = 0
    while n_out < k:
        size = 0
        for j in range(1, k + 1):
            pos = starts[j] + depth
            if pos < starts[j + 1]:
                i = members[pos]
                size = _heap_push(heap_s, heap_i, size, scores[i], i)
        if size == 0:
            break
        while n_out < k and size > 0:
            i, size = _heap_pop(heap_s, heap_i, size)
            out[n_out] = i
            n_out += 1
        depth += 1
    return out[:n_out]


def uniform_order_numpy(scores, bins, k):
    idx = np.flatnonzero((bins >= 1) & (bins <= k))
    s = scores[idx]
    b = bins[idx]
    o = np.lexsort((idx, -s, b))
    idx, s, b = idx[o], s[o], b[o]
    n = idx.shape[0]
    if n == 0:
        return idx.astype(np.int64)
    first = np.ones(n, dtype=bool)
    first[1:] = b[1:] != b[:-1]
    group_start = np.maximum.accumulate(np.where(first, np.arange(n), 0))
    depth = np.arange(n) - group_start
    pick = np.lexsort((idx, -s, depth))[:k]
    return idx[pick].astype(np.int64)


# ---------------------------------------------------------------------------
# Bilinear affine resampling (zero fill)
# ---------------------------------------------------------------------------


@njit
def bilinear_warp_numba(img, inv):
    h, w, ch = img.shape
    out = np.zeros_like(img)
    for r in range(h):
        for c in range(w):
            y = inv[0, 0] * r + inv[0, 1] * c + inv[0, 2]
            x = inv[1, 0] * r + inv[1, 1] * c + inv[1, 2]
            y0 = np.floor(y)
            x0 = np.floor(x)
            wy = y - y0
            wx = x - x0
            iy = int(y0)
            ix = int(x0)
            for dy in range(2):
                yy = iy + dy
                if yy < 0 or yy >= h:
                    continue
                fy = wy if dy == 1 else 1.0 - wy
                for dx in range(2):
                    xx = ix + dx
                    if xx < 0 or xx >= w:
                        continue
                    fx = wx if dx == 1 else 1.0 - wx
                    f = fy * fx
                    for k in range(ch):
                        out[r, c, k] += f * img[yy, xx, k]
    return out


def bilinear_warp_numpy(img, inv):
    h, w, ch = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y = inv[0, 0] * rr + inv[0, 1] * cc + inv[0, 2]
    x = inv[1, 0] * rr + inv[1, 1] * cc + inv[1, 2]
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy = y - y0
    wx = x - x0
    iy = y0.astype(np.int64)
    ix = x0.astype(np.int64)
    out = np.zeros_like(img)
    for dy in (0, 1):
        yy = iy + dy
        fy = wy if dy == 1 else 1.0 - wy
        for dx in (0, 1):
            xx = ix + dx
            fx = wx if dx == 1 else 1.0 - wx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            f = np.where(ok, fy * fx, 0.0)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += f[..., None] * vals
    return out


# ---------------------------------------------------------------------------
# 1-D convolution along one image axis (zero padding)
# ---------------------------------------------------------------------------


@njit
def blur_axis_numba(img, weights, axis):
    h, w, ch = img.shape
    radius = (weights.shape[0] - 1) // 2
    out = np.zeros_like(img)
    for r in range(h):
        for c in range(w):
            for t in range(weights.shape[0]):
                off = t - radius
                if axis == 0:
                    rr = r + off
                    if rr < 0 or rr >= h:
                        continue
                    for k in range(ch):
                        out[r, c, k] += weights[t] * img[rr, c, k]
                else:
                    cc = c + off
                    if cc < 0 or cc >= w:
                        continue
                    for k in range(ch):
                        out[r, c, k] += weights[t] * img[r, cc, k]
    return out


def blur_axis_numpy(img, weights, axis):
    radius = (weights.shape[0] - 1) // 2
    n = img.shape[axis]
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad)
    out = np.zeros_like(img)
    for t in range(weights.shape[0]):
        out += weights[t] * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


if USE_NUMBA:
    uniform_order = uniform_order_numba
    bilinear_warp = bilinear_warp_numba
    blur_axis = blur_axis_numba
else:
    uniform_order = uniform_order_numpy
    bilinear_warp = bilinear_warp_numpy
    blur_axis = blur_axis_numpy
