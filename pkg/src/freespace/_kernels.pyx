# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Semantics are mirrored exactly by ``_kernels_py``."""
import numpy as np

from libc.math cimport exp, fabs, INFINITY, NAN


def accumulate_grid(double[:, ::1] cell_u, double[:, ::1] cell_d,
                    double[::1] mu, double[::1] md, double[:, ::1] pinv,
                    double[::1] norm, long long[:, ::1] boxes, double r2):
    """Sum truncated Gaussian likelihoods of every measurement into the grid.

    ``pinv`` rows hold ``(p_uu, p_ud, p_dd)`` of the inverse covariance restricted
    to the (u, d) plane; ``boxes`` rows are ``(i0, i1, j0, j1)`` half-open index
    windows.  Per-cell sums use Neumaier compensation.
    """
    cdef Py_ssize_t n_cols = cell_u.shape[0], n_rows = cell_u.shape[1]
    cdef Py_ssize_t n = mu.shape[0]
    out = np.zeros((n_cols, n_rows), dtype=np.float64)
    comp_arr = np.zeros((n_cols, n_rows), dtype=np.float64)
    cdef double[:, ::1] acc = out
    cdef double[:, ::1] comp = comp_arr
    cdef Py_ssize_t k, i, j
    cdef double du, dd, q, val, s, t
    with nogil:
        for k in range(n):
            for i in range(boxes[k, 0], boxes[k, 1]):
                for j in range(boxes[k, 2], boxes[k, 3]):
                    du = cell_u[i, j] - mu[k]
                    dd = cell_d[i, j] - md[k]
                    q = pinv[k, 0] * du * du + 2.0 * pinv[k, 1] * du * dd + pinv[k, 2] * dd * dd
                    if not (q <= r2):
                        continue
                    val = norm[k] * exp(-0.5 * q)
                    s = acc[i, j]
                    t = s + val
                    if fabs(s) >= fabs(val):
                        comp[i, j] += (s - t) + val
                    else:
                        comp[i, j] += (val - t) + s
                    acc[i, j] = t
        for i in range(n_cols):
            for j in range(n_rows):
                acc[i, j] += comp[i, j]
    return out


def block_match_rows(int[:, ::1] left, int[:, ::1] right, int radius, int max_disp,
                     int sign, double ratio, Py_ssize_t y0, Py_ssize_t y1,
                     double[:, ::1] out):
    """Winner-take-all SAD matching for rows ``y0 <= y < y1`` written into ``out``."""
    cdef Py_ssize_t h = left.shape[0], w = left.shape[1]
    cdef Py_ssize_t x_lo, x_hi, x, y, dy, xs, d, best_d
    cdef long long c, best, second
    cdef int nd = max_disp + 1
    colsum_arr = np.zeros(w, dtype=np.int64)
    cost_arr = np.zeros((w, nd), dtype=np.int64)
    cdef long long[::1] colsum = colsum_arr
    cdef long long[:, ::1] cost = cost_arr
    if sign > 0:
        x_lo = radius + max_disp
        x_hi = w - radius
    else:
        x_lo = radius
        x_hi = w - radius - max_disp
    with nogil:
        for y in range(y0, y1):
            for x in range(w):
                out[y, x] = NAN
            if y < radius or y >= h - radius or x_lo >= x_hi:
                continue
            for d in range(nd):
                for x in range(x_lo - radius, x_hi + radius):
                    xs = x - sign * d
                    c = 0
                    for dy in range(-radius, radius + 1):
                        c += abs(left[y + dy, x] - right[y + dy, xs])
                    colsum[x] = c
                c = 0
                for x in range(x_lo - radius, x_lo + radius + 1):
                    c += colsum[x]
                cost[x_lo, d] = c
                for x in range(x_lo + 1, x_hi):
                    c += colsum[x + radius] - colsum[x - radius - 1]
                    cost[x, d] = c
            for x in range(x_lo, x_hi):
                best = cost[x, 0]
                best_d = 0
                for d in range(1, nd):
                    if cost[x, d] < best:
                        best = cost[x, d]
                        best_d = d
                second = -1
                for d in range(nd):
                    if d < best_d - 1 or d > best_d + 1:
                        if second < 0 or cost[x, d] < second:
                            second = cost[x, d]
                if second < 0:
                    out[y, x] = best_d
                elif best < ratio * second:
                    out[y, x] = best_d
