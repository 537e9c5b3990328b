"""Sufficient statistics of the CPD E-step.

Both functions return ``(np_, sum_x, sum_y, sxx, syy, a_raw)`` where, with
``P`` the (M, N) posterior matrix,

* ``np_``   = sum of P
* ``sum_x`` = sum_n (P^T 1)_n x_n
* ``sum_y`` = sum_m (P 1)_m y_m
* ``sxx``   = sum_n (P^T 1)_n |x_n|^2
* ``syy``   = sum_m (P 1)_m |y_m|^2
* ``a_raw`` = sum_mn P_mn x_n y_m^T

``estep_dense`` materializes P with numpy and serves as the reference;
``estep_fused`` streams over columns, never stores P and only visits the
GMM centroids near each data point once the variance is small.
"""
import math

import numba
import numpy as np

# terms with exp(-CUTOFF) relative to the column's largest term are below double eps
CUTOFF = 50.0

# exp(-e) on [0, CUTOFF): Cody-Waite reduction e = n ln2 + r, |r| <= ln2/2, then a
# degree-12 Taylor polynomial (truncation < 2e-16) times a 2^-n table. About 7x
# faster than the libm call and within a few ulp of it.
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_POW2_NEG = np.array([2.0 ** -k for k in range(int(CUTOFF / math.log(2)) + 2)])
# reassociation lets LLVM vectorize the polynomial and the column reductions;
# no-NaN/no-inf assumptions are left off
_FM = {"reassoc", "contract", "arcp"}
_TAYLOR = np.array([(-1.0) ** k / math.factorial(k) for k in range(13)])


def estep_dense(x, ty, y, sigma2, c):
    d2 = ((ty[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    dmin = d2.min(axis=0)
    k = np.exp(-(d2 - dmin) / (2.0 * sigma2))
    denom = k.sum(axis=0)
    if c > 0:
        denom = denom + c * np.exp(np.minimum(dmin / (2.0 * sigma2), 700.0))
    p = k / denom
    pt1 = p.sum(axis=0)
    p1 = p.sum(axis=1)
    return (float(pt1.sum()), x.T @ pt1, y.T @ p1, float(pt1 @ (x ** 2).sum(axis=1)),
            float(p1 @ (y ** 2).sum(axis=1)), x.T @ (p.T @ y))


@numba.njit(cache=True)
def _grid(pts, lo, cell, nx, ny):
    """Counting sort of 2D points into an nx*ny grid: (start offsets, point order)."""
    m = pts.shape[0]
    key = np.empty(m, dtype=np.int64)
    count = np.zeros(nx * ny + 1, dtype=np.int64)
    for i in range(m):
        gx = min(max(int((pts[i, 0] - lo[0]) / cell), 0), nx - 1)
        gy = min(max(int((pts[i, 1] - lo[1]) / cell), 0), ny - 1)
        key[i] = gx * ny + gy
        count[key[i] + 1] += 1
    for k in range(nx * ny):
        count[k + 1] += count[k]
    fill = count[:-1].copy()
    order = np.empty(m, dtype=np.int64)
    for i in range(m):
        order[fill[key[i]]] = i
        fill[key[i]] += 1
    return count, order


@numba.njit(cache=True, fastmath=_FM)
def _exp_neg(e):
    nn = int(e * 1.4426950408889634 + 0.5)
    r = e - nn * _LN2_HI - nn * _LN2_LO
    v = _TAYLOR[12]
    for kk in range(11, -1, -1):
        v = v * r + _TAYLOR[kk]
    return v * _POW2_NEG[nn]


@numba.njit(cache=True, fastmath=_FM)
def _fused(x, ty, y, sigma2, c, max_cells):
    n = x.shape[0]
    m = y.shape[0]
    k = 0.5 / sigma2
    # every kept term has d^2 < dmin + 2*CUTOFF*sigma2; with cell side R, a point
    # outside the 3x3 block around x's cell is at distance >= R, so the block
    # suffices whenever R^2 >= dmin + 2*CUTOFF*sigma2 (checked per column)
    lo = np.empty(2)
    hi = np.empty(2)
    for q in range(2):
        lo[q] = min(ty[:, q].min(), x[:, q].min())
        hi[q] = max(ty[:, q].max(), x[:, q].max())
    span = max(hi[0] - lo[0], hi[1] - lo[1])
    cell = max(math.sqrt(2.0 * CUTOFF * sigma2) * 1.1, span / max_cells)
    use_grid = span > 3.0 * cell
    nx = int((hi[0] - lo[0]) / cell) + 1
    ny = int((hi[1] - lo[1]) / cell) + 1
    if use_grid:
        start, order = _grid(ty, lo, cell, nx, ny)
    else:
        start = np.zeros(2, dtype=np.int64)
        order = np.arange(m)

    # candidate coordinates gathered into contiguous buffers
    cand = np.empty(m, dtype=np.int64)
    t0 = np.empty(m)
    t1 = np.empty(m)
    y0 = np.empty(m)
    y1 = np.empty(m)
    buf = np.empty(m)
    all_idx = np.arange(m)
    ty0, ty1 = ty[:, 0].copy(), ty[:, 1].copy()
    yy0, yy1 = y[:, 0].copy(), y[:, 1].copy()
    p1 = np.zeros(m)
    sum_x = np.zeros(2)
    a_raw = np.zeros((2, 2))
    np_total = 0.0
    sxx = 0.0
    cut2 = 2.0 * CUTOFF * sigma2
    for j in range(n):
        xj0 = x[j, 0]
        xj1 = x[j, 1]
        full = True
        if use_grid:
            nc = 0
            gx = min(max(int((xj0 - lo[0]) / cell), 0), nx - 1)
            gy = min(max(int((xj1 - lo[1]) / cell), 0), ny - 1)
            for ix in range(max(gx - 1, 0), min(gx + 2, nx)):
                for iy in range(max(gy - 1, 0), min(gy + 2, ny)):
                    kk = ix * ny + iy
                    for t in range(start[kk], start[kk + 1]):
                        i = order[t]
                        cand[nc] = i
                        t0[nc] = ty0[i]
                        t1[nc] = ty1[i]
                        y0[nc] = yy0[i]
                        y1[nc] = yy1[i]
                        nc += 1
            dmin = np.inf
            for a in range(nc):
                d0 = t0[a] - xj0
                d1 = t1[a] - xj1
                d = d0 * d0 + d1 * d1
                buf[a] = d
                dmin = min(dmin, d)
            full = cell * cell < dmin + cut2
        if full:
            nc = m
            cidx, cy0, cy1 = all_idx, yy0, yy1
            dmin = np.inf
            for a in range(m):
                d0 = ty0[a] - xj0
                d1 = ty1[a] - xj1
                d = d0 * d0 + d1 * d1
                buf[a] = d
                dmin = min(dmin, d)
        else:
            cidx, cy0, cy1 = cand, y0, y1
        s = 0.0
        for a in range(nc):
            e = (buf[a] - dmin) * k
            v = _exp_neg(e) if e < CUTOFF else 0.0
            buf[a] = v
            s += v
        if c > 0:
            s += c * math.exp(min(dmin * k, 700.0))
        inv = 1.0 / s
        col = 0.0
        py0 = 0.0
        py1 = 0.0
        for a in range(nc):
            pv = buf[a] * inv
            buf[a] = pv
            col += pv
            py0 += pv * cy0[a]
            py1 += pv * cy1[a]
        for a in range(nc):
            p1[cidx[a]] += buf[a]
        np_total += col
        sum_x[0] += col * xj0
        sum_x[1] += col * xj1
        sxx += col * (xj0 * xj0 + xj1 * xj1)
        a_raw[0, 0] += xj0 * py0
        a_raw[0, 1] += xj0 * py1
        a_raw[1, 0] += xj1 * py0
        a_raw[1, 1] += xj1 * py1
    sum_y = np.zeros(2)
    syy = 0.0
    for i in range(m):
        sum_y[0] += p1[i] * yy0[i]
        sum_y[1] += p1[i] * yy1[i]
        syy += p1[i] * (yy0[i] * yy0[i] + yy1[i] * yy1[i])
    return np_total, sum_x, sum_y, sxx, syy, a_raw


def estep_fused(x, ty, y, sigma2, c, max_cells=64):
    """Compiled E-step for 2D point sets (see module docstring)."""
    if x.shape[1] != 2:
        return estep_dense(x, ty, y, sigma2, c)
    return _fused(np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(ty, dtype=float),
                  np.ascontiguousarray(y, dtype=float), float(sigma2), float(c), int(max_cells))
