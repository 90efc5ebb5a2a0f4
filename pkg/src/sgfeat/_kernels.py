"""Compiled inner loops for the triangle-angle embeddings.

The pooled embedding for a pair (i, j) is max_y f_c(theta_ijy) per output
channel c, where f_c is a Chebyshev series in x = 2 theta / pi - 1. Each f_c is
smooth with a handful of critical points on [-1, 1], and a maximum over a finite
set of angles is attained either at the set's extremes or at the set elements
adjacent to one of those critical points. Only those candidates are evaluated.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _angle(ux, uy, uz, vx, vy, vz):
    cx = uy * vz - uz * vy
    cy = uz * vx - ux * vz
    cz = ux * vy - uy * vx
    s = np.sqrt(cx * cx + cy * cy + cz * cz)
    c = ux * vx + uy * vy + uz * vz
    return np.arctan2(s, c)


@njit(cache=True, inline="always")
def _triangle(pts, i, j, y, out):
    abx, aby, abz = pts[j, 0] - pts[i, 0], pts[j, 1] - pts[i, 1], pts[j, 2] - pts[i, 2]
    acx, acy, acz = pts[y, 0] - pts[i, 0], pts[y, 1] - pts[i, 1], pts[y, 2] - pts[i, 2]
    bcx, bcy, bcz = pts[y, 0] - pts[j, 0], pts[y, 1] - pts[j, 1], pts[y, 2] - pts[j, 2]
    lab = abx * abx + aby * aby + abz * abz
    lac = acx * acx + acy * acy + acz * acz
    lbc = bcx * bcx + bcy * bcy + bcz * bcz
    if lab == 0.0 or lac == 0.0 or lbc == 0.0:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = np.pi
        return
    out[0] = _angle(abx, aby, abz, acx, acy, acz)
    out[1] = _angle(-abx, -aby, -abz, bcx, bcy, bcz)
    out[2] = max(np.pi - out[0] - out[1], 0.0)


@njit(cache=True, inline="always")
def _clenshaw2(coef, deg, c, x, y):
    # two interleaved recurrences; the independent chains overlap in the pipeline
    a1 = 0.0
    a2 = 0.0
    b1 = 0.0
    b2 = 0.0
    for k in range(deg - 1, 0, -1):
        ck = coef[k, c]
        ta = 2.0 * x * a1 - a2 + ck
        tb = 2.0 * y * b1 - b2 + ck
        a2 = a1
        a1 = ta
        b2 = b1
        b1 = tb
    return x * a1 - a2 + coef[0, c], y * b1 - b2 + coef[0, c]


@njit(cache=True, inline="always")
def _basis(x, deg, out):
    out[0] = 1.0
    if deg > 1:
        out[1] = x
    for q in range(2, deg):
        out[q] = 2.0 * x * out[q - 1] - out[q - 2]


@njit(cache=True)
def _lower_bound(xs, v):
    lo = 0
    hi = xs.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if xs[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def pooled_angle_embeddings(pts, anchors, coefs, degs, crit, ncrit, use_max):
    """(3, n, n, d) pooled embeddings.

    coefs (3, deg_max, d), degs (3,), crit (3, d, C) critical x values with counts
    ncrit (3, d). use_max selects max pooling, otherwise the anchor mean.
    """
    n = pts.shape[0]
    k = anchors.shape[1]
    d = coefs.shape[2]
    G = np.empty((3, n, n, d))
    ang = np.empty(3)
    xs = np.empty((3, k))
    deg_max = coefs.shape[1]
    b_lo = np.empty(deg_max)
    b_hi = np.empty(deg_max)
    v_lo = np.empty(d)
    v_hi = np.empty(d)
    for i in range(n):
        for j in range(n):
            for a in range(k):
                _triangle(pts, i, j, anchors[i, a], ang)
                for s in range(3):
                    xs[s, a] = 2.0 * ang[s] / np.pi - 1.0
            for s in range(3):
                deg = degs[s]
                cf = coefs[s]
                if use_max:
                    xsort = np.sort(xs[s])
                    _basis(xsort[0], deg, b_lo)
                    _basis(xsort[k - 1], deg, b_hi)
                    v_lo[:] = 0.0
                    v_hi[:] = 0.0
                    for q in range(deg):
                        for c in range(d):
                            v_lo[c] += b_lo[q] * cf[q, c]
                            v_hi[c] += b_hi[q] * cf[q, c]
                    for c in range(d):
                        best = max(v_lo[c], v_hi[c])
                        for m in range(ncrit[s, c]):
                            p = _lower_bound(xsort, crit[s, c, m])
                            if 0 < p < k:
                                v, w = _clenshaw2(cf, deg, c, xsort[p], xsort[p - 1])
                                best = max(best, v, w)
                            # p == 0 or p == k: the neighbour is an extreme, already counted
                        G[s, i, j, c] = best
                else:
                    # mean of the series = series of the mean Chebyshev basis
                    basis = np.zeros(deg)
                    for a in range(k):
                        x = xs[s, a]
                        t0 = 1.0
                        t1 = x
                        basis[0] += t0
                        if deg > 1:
                            basis[1] += t1
                        for q in range(2, deg):
                            t2 = 2.0 * x * t1 - t0
                            basis[q] += t2
                            t0 = t1
                            t1 = t2
                    for c in range(d):
                        acc = 0.0
                        for q in range(deg):
                            acc += basis[q] * cf[q, c]
                        G[s, i, j, c] = acc / k
    return G
