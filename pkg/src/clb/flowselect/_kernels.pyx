# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the flow hot loops. Contracts live in _numpy.py; the two
backends must agree on border handling (reflect with edge duplication) and on
displacement rounding (floor(x + 0.5))."""

import numpy as np

from libc.math cimport floor


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    if i < 0:
        i = -i - 1
    if i >= n:
        i = 2 * n - 1 - i
    return i


def poly_expand(double[:, ::1] lum, double[:, ::1] ginv,
                double[::1] gk, double[::1] xgk, double[::1] xxgk):
    cdef Py_ssize_t h = lum.shape[0]
    cdef Py_ssize_t w = lum.shape[1]
    cdef Py_ssize_t rad = gk.shape[0] // 2
    cdef Py_ssize_t r, c, o, j
    cdef double acc0, acc1, acc2, px
    cdef double s0, s1, s2, s3, s4, s5

    t0_arr = np.empty((h, w), dtype=np.float64)
    t1_arr = np.empty((h, w), dtype=np.float64)
    t2_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] t0 = t0_arr
    cdef double[:, ::1] t1 = t1_arr
    cdef double[:, ::1] t2 = t2_arr

    axx_arr = np.empty((h, w), dtype=np.float64)
    axy_arr = np.empty((h, w), dtype=np.float64)
    ayy_arr = np.empty((h, w), dtype=np.float64)
    bx_arr = np.empty((h, w), dtype=np.float64)
    by_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] axx = axx_arr
    cdef double[:, ::1] axy = axy_arr
    cdef double[:, ::1] ayy = ayy_arr
    cdef double[:, ::1] bx = bx_arr
    cdef double[:, ::1] by = by_arr

    with nogil:
        # vertical moment pass: weights g(y), y*g(y), y^2*g(y)
        for r in range(h):
            for c in range(w):
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                for o in range(-rad, rad + 1):
                    px = lum[_reflect(r + o, h), c]
                    acc0 += gk[o + rad] * px
                    acc1 += xgk[o + rad] * px
                    acc2 += xxgk[o + rad] * px
                t0[r, c] = acc0
                t1[r, c] = acc1
                t2[r, c] = acc2
        # horizontal pass producing the six correlation results, then the
        # basis coefficients through the shared inverse Gram matrix
        for r in range(h):
            for c in range(w):
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                s3 = 0.0
                s4 = 0.0
                s5 = 0.0
                for o in range(-rad, rad + 1):
                    j = _reflect(c + o, w)
                    s0 += gk[o + rad] * t0[r, j]
                    s1 += xgk[o + rad] * t0[r, j]
                    s2 += gk[o + rad] * t1[r, j]
                    s3 += xxgk[o + rad] * t0[r, j]
                    s4 += gk[o + rad] * t2[r, j]
                    s5 += xgk[o + rad] * t1[r, j]
                bx[r, c] = (ginv[1, 0] * s0 + ginv[1, 1] * s1 + ginv[1, 2] * s2
                            + ginv[1, 3] * s3 + ginv[1, 4] * s4 + ginv[1, 5] * s5)
                by[r, c] = (ginv[2, 0] * s0 + ginv[2, 1] * s1 + ginv[2, 2] * s2
                            + ginv[2, 3] * s3 + ginv[2, 4] * s4 + ginv[2, 5] * s5)
                axx[r, c] = (ginv[3, 0] * s0 + ginv[3, 1] * s1 + ginv[3, 2] * s2
                             + ginv[3, 3] * s3 + ginv[3, 4] * s4 + ginv[3, 5] * s5)
                ayy[r, c] = (ginv[4, 0] * s0 + ginv[4, 1] * s1 + ginv[4, 2] * s2
                             + ginv[4, 3] * s3 + ginv[4, 4] * s4 + ginv[4, 5] * s5)
                axy[r, c] = 0.5 * (ginv[5, 0] * s0 + ginv[5, 1] * s1 + ginv[5, 2] * s2
                                   + ginv[5, 3] * s3 + ginv[5, 4] * s4 + ginv[5, 5] * s5)
    return axx_arr, axy_arr, ayy_arr, bx_arr, by_arr


def update_matrices(double[:, ::1] a1xx, double[:, ::1] a1xy, double[:, ::1] a1yy,
                    double[:, ::1] b1x, double[:, ::1] b1y,
                    double[:, ::1] a2xx, double[:, ::1] a2xy, double[:, ::1] a2yy,
                    double[:, ::1] b2x, double[:, ::1] b2y,
                    double[:, ::1] du, double[:, ::1] dv):
    cdef Py_ssize_t h = a1xx.shape[0]
    cdef Py_ssize_t w = a1xx.shape[1]
    cdef Py_ssize_t r, c, tr, tc
    cdef double dxt, dyt, xx, xy, yy, dbx, dby

    g11_arr = np.empty((h, w), dtype=np.float64)
    g12_arr = np.empty((h, w), dtype=np.float64)
    g22_arr = np.empty((h, w), dtype=np.float64)
    h1_arr = np.empty((h, w), dtype=np.float64)
    h2_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] g11 = g11_arr
    cdef double[:, ::1] g12 = g12_arr
    cdef double[:, ::1] g22 = g22_arr
    cdef double[:, ::1] h1 = h1_arr
    cdef double[:, ::1] h2 = h2_arr

    with nogil:
        for r in range(h):
            for c in range(w):
                tc = c + <Py_ssize_t>floor(du[r, c] + 0.5)
                tr = r + <Py_ssize_t>floor(dv[r, c] + 0.5)
                if tc < 0:
                    tc = 0
                elif tc > w - 1:
                    tc = w - 1
                if tr < 0:
                    tr = 0
                elif tr > h - 1:
                    tr = h - 1
                dxt = <double>(tc - c)
                dyt = <double>(tr - r)
                xx = 0.5 * (a1xx[r, c] + a2xx[tr, tc])
                xy = 0.5 * (a1xy[r, c] + a2xy[tr, tc])
                yy = 0.5 * (a1yy[r, c] + a2yy[tr, tc])
                dbx = -0.5 * (b2x[tr, tc] - b1x[r, c]) + xx * dxt + xy * dyt
                dby = -0.5 * (b2y[tr, tc] - b1y[r, c]) + xy * dxt + yy * dyt
                g11[r, c] = xx * xx + xy * xy
                g12[r, c] = xx * xy + xy * yy
                g22[r, c] = xy * xy + yy * yy
                h1[r, c] = xx * dbx + xy * dby
                h2[r, c] = xy * dbx + yy * dby
    return g11_arr, g12_arr, g22_arr, h1_arr, h2_arr
