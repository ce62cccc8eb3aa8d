"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels_c.pyx`` mirrors them operation
for operation so both backends agree bit-for-bit on the same inputs.
"""
import numpy as np


def sgm_path(cost, dy, dx, p1, p2, acc):
    """Accumulate one SGM scanline direction into ``acc``.

    ``cost`` is an (H, W, D) float64 array with no undefined entries. For the
    path direction ``(dy, dx)`` the recurrence is evaluated in the form
    ``L = C + (min(Lp[d], Lp[d-1] + p1, Lp[d+1] + p1, min(Lp) + p2) - min(Lp))``
    and ``L - C`` is added to ``acc``. Pixels whose predecessor falls outside
    the image start a new path with ``L = C``.
    """
    h, w, nd = cost.shape
    if dx != 0:
        cols = range(w) if dx > 0 else range(w - 1, -1, -1)
        prev = None
        for x in cols:
            c = cost[:, x, :]
            if prev is None:
                cur = c.copy()
            else:
                shifted, has_prev = _shift_rows(prev, dy)
                cur = c.copy()
                if has_prev.any():
                    cur[has_prev] = _step(c[has_prev], shifted[has_prev], p1, p2)
            acc[:, x, :] += cur - c
            prev = cur
    else:
        rows = range(h) if dy > 0 else range(h - 1, -1, -1)
        prev = None
        for y in rows:
            c = cost[y]
            cur = c.copy() if prev is None else _step(c, prev, p1, p2)
            acc[y] += cur - c
            prev = cur


def _shift_rows(prev, dy):
    """Row ``y`` of the result holds ``prev[y - dy]``; mask marks rows that exist."""
    h = prev.shape[0]
    out = np.empty_like(prev)
    mask = np.zeros(h, dtype=bool)
    if dy == 0:
        out[:] = prev
        mask[:] = True
    elif dy > 0:
        out[dy:] = prev[: h - dy]
        mask[dy:] = True
    else:
        out[: h + dy] = prev[-dy:]
        mask[: h + dy] = True
    return out, mask


def _step(c, lp, p1, p2):
    mp = lp.min(axis=-1, keepdims=True)
    best = np.minimum(lp, mp + p2)
    best[..., 1:] = np.minimum(best[..., 1:], lp[..., :-1] + p1)
    best[..., :-1] = np.minimum(best[..., :-1], lp[..., 1:] + p1)
    return c + (best - mp)


def bilinear_gather(values, valid, xs, ys):
    """Bilinearly sample ``values`` (H, W, C) at real positions ``(xs, ys)``.

    A sample is valid when it lies in ``[0, W-1] x [0, H-1]`` and every
    neighbour carrying nonzero weight is valid. Returns ``(out, ok)`` with
    ``out`` of shape (N, C); invalid rows are zero.
    """
    h, w, nc = values.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = xs.shape[0]
    out = np.zeros((n, nc), dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    inside &= np.isfinite(xs) & np.isfinite(ys)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return out, inside
    x = xs[idx]
    y = ys[idx]
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ok = np.ones(idx.size, dtype=bool)
    ok &= (valid[y0, x0] != 0) | ((1.0 - fx) == 0) | ((1.0 - fy) == 0)
    ok &= (valid[y0, x1] != 0) | (fx == 0) | ((1.0 - fy) == 0)
    ok &= (valid[y1, x0] != 0) | ((1.0 - fx) == 0) | (fy == 0)
    ok &= (valid[y1, x1] != 0) | (fx == 0) | (fy == 0)
    gx = fx[:, None]
    gy = fy[:, None]
    top = (1.0 - gx) * values[y0, x0] + gx * values[y0, x1]
    bot = (1.0 - gx) * values[y1, x0] + gx * values[y1, x1]
    res = (1.0 - gy) * top + gy * bot
    res[~ok] = 0.0
    out[idx] = res
    good = np.zeros(n, dtype=bool)
    good[idx] = ok
    return out, good
