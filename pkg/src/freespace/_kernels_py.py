"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def accumulate_grid(cell_u, cell_d, mu, md, pinv, norm, boxes, r2, chunk_cells=2_000_000):
    n_cols, n_rows = cell_u.shape
    out = np.zeros(n_cols * n_rows, dtype=np.float64)
    flat_u = cell_u.ravel()
    flat_d = cell_d.ravel()
    boxes = np.asarray(boxes, dtype=np.int64)
    sizes = np.maximum(boxes[:, 1] - boxes[:, 0], 0) * np.maximum(boxes[:, 3] - boxes[:, 2], 0)
    k = 0
    n = len(mu)
    while k < n:
        # group measurements so one batch expands to at most chunk_cells candidates
        stop = k + 1
        total = sizes[k]
        while stop < n and total + sizes[stop] <= chunk_cells:
            total += sizes[stop]
            stop += 1
        sel = np.arange(k, stop)
        sel = sel[sizes[sel] > 0]
        k = stop
        if sel.size == 0:
            continue
        owner = np.repeat(sel, sizes[sel])
        # position of each candidate inside its owner's box
        starts = np.cumsum(sizes[sel]) - sizes[sel]
        local = np.arange(owner.size) - np.repeat(starts, sizes[sel])
        height = (boxes[owner, 3] - boxes[owner, 2])
        i = boxes[owner, 0] + local // height
        j = boxes[owner, 2] + local % height
        cell = i * n_rows + j
        du = flat_u[cell] - mu[owner]
        dd = flat_d[cell] - md[owner]
        q = pinv[owner, 0] * du * du + 2.0 * pinv[owner, 1] * du * dd + pinv[owner, 2] * dd * dd
        with np.errstate(invalid="ignore"):
            keep = q <= r2
        vals = norm[owner[keep]] * np.exp(-0.5 * q[keep])
        out += np.bincount(cell[keep], weights=vals, minlength=out.size)
    return out.reshape(n_cols, n_rows)


def _box_sum_rows(a, radius):
    """Sum over a (2r+1)-high vertical window, valid rows only, as int64."""
    c = np.cumsum(np.pad(a, ((1, 0), (0, 0))), axis=0)
    return c[2 * radius + 1:] - c[: -2 * radius - 1]


def block_match_rows(left, right, radius, max_disp, sign, ratio, y0, y1, out):
    h, w = left.shape
    out[y0:y1] = np.nan
    if sign > 0:
        x_lo, x_hi = radius + max_disp, w - radius
    else:
        x_lo, x_hi = radius, w - radius - max_disp
    ry0, ry1 = max(y0, radius), min(y1, h - radius)
    if x_lo >= x_hi or ry0 >= ry1:
        return
    nd = max_disp + 1
    cols = np.arange(x_lo - radius, x_hi + radius)
    lband = left[ry0 - radius: ry1 + radius].astype(np.int64)
    rband = right[ry0 - radius: ry1 + radius].astype(np.int64)
    cost = np.empty((nd, ry1 - ry0, x_hi - x_lo), dtype=np.int64)
    for d in range(nd):
        diff = np.abs(lband[:, cols] - rband[:, cols - sign * d])
        vert = _box_sum_rows(diff, radius)
        c = np.cumsum(np.pad(vert, ((0, 0), (1, 0))), axis=1)
        cost[d] = c[:, 2 * radius + 1:] - c[:, : -2 * radius - 1]
    best_d = np.argmin(cost, axis=0)
    best = np.take_along_axis(cost, best_d[None], axis=0)[0]
    dgrid = np.arange(nd)[:, None, None]
    far = np.abs(dgrid - best_d[None]) > 1
    masked = np.where(far, cost, np.iinfo(np.int64).max)
    second = masked.min(axis=0)
    has_second = far.any(axis=0)
    ok = ~has_second | (best < ratio * second)
    res = np.where(ok, best_d.astype(np.float64), np.nan)
    out[ry0:ry1, x_lo:x_hi] = res
