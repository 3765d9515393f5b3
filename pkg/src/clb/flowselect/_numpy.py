"""Vectorized fallback kernels for the dense-flow hot loops.

Both backends implement the same two functions with identical contracts:

poly_expand fits every pixel's neighborhood with a quadratic
f(x,y) ~ c + bx*x + by*y + axx*x^2 + ayy*y^2 + 2*axy*x*y under Gaussian
applicability weights, via separable correlations against precomputed
1-D moment kernels and a shared inverse Gram matrix.

update_matrices turns two expansions plus the current displacement guess
into the per-pixel 2x2 normal equations (g11,g12,g22,h1,h2) that the driver
smooths and solves.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

Array = np.ndarray


def poly_expand(
    lum: Array, ginv: Array, gk: Array, xgk: Array, xxgk: Array
) -> tuple[Array, Array, Array, Array, Array]:
    """Returns (axx, axy, ayy, bx, by), each H x W."""
    v0 = correlate1d(lum, gk, axis=0, mode="reflect")
    v1 = correlate1d(lum, xgk, axis=0, mode="reflect")
    v2 = correlate1d(lum, xxgk, axis=0, mode="reflect")
    s_c = correlate1d(v0, gk, axis=1, mode="reflect")
    s_x = correlate1d(v0, xgk, axis=1, mode="reflect")
    s_y = correlate1d(v1, gk, axis=1, mode="reflect")
    s_xx = correlate1d(v0, xxgk, axis=1, mode="reflect")
    s_yy = correlate1d(v2, gk, axis=1, mode="reflect")
    s_xy = correlate1d(v1, xgk, axis=1, mode="reflect")
    s = np.stack([s_c, s_x, s_y, s_xx, s_yy, s_xy], axis=-1)
    coef = s @ ginv.T
    axx = coef[..., 3]
    ayy = coef[..., 4]
    axy = coef[..., 5] * 0.5
    bx = coef[..., 1]
    by = coef[..., 2]
    return axx, axy, ayy, bx, by


def update_matrices(
    a1xx: Array,
    a1xy: Array,
    a1yy: Array,
    b1x: Array,
    b1y: Array,
    a2xx: Array,
    a2xy: Array,
    a2yy: Array,
    b2x: Array,
    b2y: Array,
    du: Array,
    dv: Array,
) -> tuple[Array, Array, Array, Array, Array]:
    """Normal-equation fields for the displacement solve at the current guess."""
    h, w = a1xx.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    # displacement rounding is floor(x + 0.5) to match the compiled backend
    tc = np.clip(cols + np.floor(du + 0.5).astype(np.int64), 0, w - 1)
    tr = np.clip(rows + np.floor(dv + 0.5).astype(np.int64), 0, h - 1)
    dxt = (tc - cols).astype(np.float64)
    dyt = (tr - rows).astype(np.float64)

    axx = 0.5 * (a1xx + a2xx[tr, tc])
    axy = 0.5 * (a1xy + a2xy[tr, tc])
    ayy = 0.5 * (a1yy + a2yy[tr, tc])
    dbx = -0.5 * (b2x[tr, tc] - b1x) + axx * dxt + axy * dyt
    dby = -0.5 * (b2y[tr, tc] - b1y) + axy * dxt + ayy * dyt

    g11 = axx * axx + axy * axy
    g12 = axx * axy + axy * ayy
    g22 = axy * axy + ayy * ayy
    h1 = axx * dbx + axy * dby
    h2 = axy * dbx + ayy * dby
    return g11, g12, g22, h1, h2
