# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; same contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite

cnp.import_array()


def sgm_path(double[:, :, ::1] cost, int dy, int dx, double p1, double p2,
             double[:, :, ::1] acc):
    cdef Py_ssize_t h = cost.shape[0], w = cost.shape[1], nd = cost.shape[2]
    cdef double[:, :, ::1] lr = np.empty((h, w, nd), dtype=np.float64)
    cdef Py_ssize_t y, x, d, py, px, i, j, n_outer, n_inner
    cdef Py_ssize_t ys, xs, ye, xe, ystep, xstep
    cdef double mp, best, v, c
    with nogil:
        if dx != 0:
            # sweep columns, rows independent
            xstep = 1 if dx > 0 else -1
            xs = 0 if dx > 0 else w - 1
            for i in range(w):
                x = xs + i * xstep
                for y in range(h):
                    py = y - dy
                    px = x - dx
                    if px < 0 or px >= w or py < 0 or py >= h:
                        for d in range(nd):
                            lr[y, x, d] = cost[y, x, d]
                        continue
                    mp = lr[py, px, 0]
                    for d in range(1, nd):
                        if lr[py, px, d] < mp:
                            mp = lr[py, px, d]
                    for d in range(nd):
                        best = lr[py, px, d]
                        v = mp + p2
                        if v < best:
                            best = v
                        if d > 0:
                            v = lr[py, px, d - 1] + p1
                            if v < best:
                                best = v
                        if d < nd - 1:
                            v = lr[py, px, d + 1] + p1
                            if v < best:
                                best = v
                        c = cost[y, x, d]
                        lr[y, x, d] = c + (best - mp)
        else:
            ystep = 1 if dy > 0 else -1
            ys = 0 if dy > 0 else h - 1
            for i in range(h):
                y = ys + i * ystep
                py = y - dy
                for x in range(w):
                    if py < 0 or py >= h:
                        for d in range(nd):
                            lr[y, x, d] = cost[y, x, d]
                        continue
                    mp = lr[py, x, 0]
                    for d in range(1, nd):
                        if lr[py, x, d] < mp:
                            mp = lr[py, x, d]
                    for d in range(nd):
                        best = lr[py, x, d]
                        v = mp + p2
                        if v < best:
                            best = v
                        if d > 0:
                            v = lr[py, x, d - 1] + p1
                            if v < best:
                                best = v
                        if d < nd - 1:
                            v = lr[py, x, d + 1] + p1
                            if v < best:
                                best = v
                        c = cost[y, x, d]
                        lr[y, x, d] = c + (best - mp)
        for y in range(h):
            for x in range(w):
                for d in range(nd):
                    acc[y, x, d] += lr[y, x, d] - cost[y, x, d]


def bilinear_gather(double[:, :, ::1] values, cnp.uint8_t[:, ::1] valid,
                    xs_in, ys_in):
    cdef double[::1] xs = np.ascontiguousarray(xs_in, dtype=np.float64)
    cdef double[::1] ys = np.ascontiguousarray(ys_in, dtype=np.float64)
    cdef Py_ssize_t h = values.shape[0], w = values.shape[1], nc = values.shape[2]
    cdef Py_ssize_t n = xs.shape[0]
    out_arr = np.zeros((n, nc), dtype=np.float64)
    ok_arr = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef cnp.uint8_t[::1] ok = ok_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double x, y, fx, fy, ax, ay, top, bot
    cdef bint good
    with nogil:
        for i in range(n):
            x = xs[i]
            y = ys[i]
            if not (isfinite(x) and isfinite(y)):
                continue
            if x < 0 or x > w - 1 or y < 0 or y > h - 1:
                continue
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            if x0 > w - 2:
                x0 = w - 2 if w >= 2 else 0
            if y0 > h - 2:
                y0 = h - 2 if h >= 2 else 0
            fx = x - x0
            fy = y - y0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            ax = 1.0 - fx
            ay = 1.0 - fy
            good = True
            if valid[y0, x0] == 0 and ax != 0 and ay != 0:
                good = False
            if valid[y0, x1] == 0 and fx != 0 and ay != 0:
                good = False
            if valid[y1, x0] == 0 and ax != 0 and fy != 0:
                good = False
            if valid[y1, x1] == 0 and fx != 0 and fy != 0:
                good = False
            if not good:
                continue
            ok[i] = 1
            for k in range(nc):
                top = ax * values[y0, x0, k] + fx * values[y0, x1, k]
                bot = ax * values[y1, x0, k] + fx * values[y1, x1, k]
                out[i, k] = ay * top + fy * bot
    return out_arr, ok_arr.astype(bool)
