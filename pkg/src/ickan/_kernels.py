"""Compiled inner loops for the basis evaluation hot path."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def locate_geometry(x, vertices):
    """Cell (clamped to the boundary cells), left vertex, width and local coordinate."""
    B, J = x.shape
    P = vertices.shape[1] - 1
    cell = np.empty((B, J), dtype=np.intp)
    left = np.empty((B, J))
    delta = np.empty((B, J))
    t = np.empty((B, J))
    for j in range(J):
        row = vertices[j]
        lo = row[0]
        scale = P / (row[P] - lo)
        for b in range(B):
            xv = x[b, j]
            # largest c in [0, P-1] with row[c] <= xv (0 if none): guess as if the
            # lattice were uniform, then walk; adapted lattices stay close to uniform
            g = (xv - lo) * scale
            c = 0 if not g >= 0.0 else (P - 1 if g >= P - 1 else int(g))  # NaN -> 0
            while c > 0 and row[c] > xv:
                c -= 1
            while c < P - 1 and row[c + 1] <= xv:
                c += 1
            left_v = row[c]
            d = row[c + 1] - left_v
            cell[b, j] = c
            left[b, j] = left_v
            delta[b, j] = d
            t[b, j] = (xv - left_v) / d
    return cell, left, delta, t


@njit(cache=True)
def contract(vals, coeffs, cols):
    """``out[b, k] = sum_m vals[b, m] * coeffs[k, cols[b, m]]``."""
    B, M = vals.shape
    K = coeffs.shape[0]
    ct = np.ascontiguousarray(coeffs.T)  # (C, K): unit stride over k
    out = np.zeros((B, K))
    for b in range(B):
        for m in range(M):
            v = vals[b, m]
            c = cols[b, m]
            for k in range(K):
                out[b, k] += v * ct[c, k]
    return out


@njit(cache=True, fastmath={"reassoc", "contract"})
def _row_dots(g, ct, cols):
    """``out[b, m] = sum_k g[b, k] * ct[cols[b, m], k]``."""
    B, M = cols.shape
    K = g.shape[1]
    out = np.empty((B, M))
    for b in range(B):
        for m in range(M):
            c = cols[b, m]
            acc = 0.0
            for k in range(K):
                acc += g[b, k] * ct[c, k]
            out[b, m] = acc
    return out


@njit(cache=True)
def contract_adjoints(g, vals, coeffs, cols):
    """Adjoints of :func:`contract` with respect to ``vals`` and ``coeffs``."""
    B, M = vals.shape
    K, C = coeffs.shape
    g = np.ascontiguousarray(g)
    gvals = _row_dots(g, np.ascontiguousarray(coeffs.T), cols)
    gct = np.zeros((C, K))
    for b in range(B):
        for m in range(M):
            v = vals[b, m]
            c = cols[b, m]
            for k in range(K):
                gct[c, k] += v * g[b, k]
    return gvals, np.ascontiguousarray(gct.T)


@njit(cache=True)
def gather_rows(a, idx):
    """``take_along_axis(a, idx, axis=-1)`` for 2-D arrays."""
    B, M = idx.shape
    out = np.empty((B, M))
    for b in range(B):
        for m in range(M):
            out[b, m] = a[b, idx[b, m]]
    return out


@njit(cache=True)
def hermite_vals(delta, t, extrapolate):
    """Weights of ``(a0[c], a0[c+1], a1[c], a1[c+1])``; linear continuation outside."""
    B, J = t.shape
    out = np.empty((B, J, 4))
    for b in range(B):
        for j in range(J):
            tt = t[b, j]
            d = delta[b, j]
            tc = min(max(tt, 0.0), 1.0)
            t2 = tc * tc
            t3 = t2 * tc
            out[b, j, 0] = 2 * t3 - 3 * t2 + 1
            out[b, j, 1] = -2 * t3 + 3 * t2
            out[b, j, 2] = d * (t3 - 2 * t2 + tc)
            out[b, j, 3] = d * (t3 - t2)
            if extrapolate:
                if tt < 0.0:
                    out[b, j, 2] += tt * d
                elif tt > 1.0:
                    out[b, j, 3] += (tt - 1.0) * d
    return out


@njit(cache=True)
def hermite_vals_adjoint(g, delta, t, extrapolate):
    """Adjoints ``(gx, g_left, g_right)`` of :func:`hermite_vals`."""
    B, J = t.shape
    gx = np.empty((B, J))
    gl = np.empty((B, J))
    gr = np.empty((B, J))
    for b in range(B):
        for j in range(J):
            tt = t[b, j]
            d = delta[b, j]
            inside = 0.0 <= tt <= 1.0
            tc = min(max(tt, 0.0), 1.0)
            t2 = tc * tc
            g0, g1, g2, g3 = g[b, j, 0], g[b, j, 1], g[b, j, 2], g[b, j, 3]
            gt = 0.0
            if inside:
                d00 = 6 * t2 - 6 * tc
                d10 = 3 * t2 - 4 * tc + 1
                d11 = 3 * t2 - 2 * tc
                gt = g0 * d00 - g1 * d00 + d * (g2 * d10 + g3 * d11)
            h10 = t2 * tc - 2 * t2 + tc
            h11 = t2 * tc - t2
            gd = g2 * h10 + g3 * h11
            x_adj = gt / d
            l_adj = gt * (tt - 1.0) / d - gd
            r_adj = -gt * tt / d + gd
            if extrapolate:
                if tt < 0.0:
                    x_adj += g2
                    l_adj -= g2
                elif tt > 1.0:
                    x_adj += g3
                    r_adj -= g3
            gx[b, j] = x_adj
            gl[b, j] = l_adj
            gr[b, j] = r_adj
    return gx, gl, gr


@njit(cache=True)
def hermite_slopes(delta, t, extrapolate):
    """Derivative weights; the boundary derivative is held outside when extrapolating."""
    B, J = t.shape
    out = np.zeros((B, J, 4))
    for b in range(B):
        for j in range(J):
            tt = t[b, j]
            if not extrapolate and (tt < 0.0 or tt > 1.0):
                continue
            d = delta[b, j]
            tc = min(max(tt, 0.0), 1.0)
            t2 = tc * tc
            d00 = 6 * t2 - 6 * tc
            out[b, j, 0] = d00 / d
            out[b, j, 1] = -d00 / d
            out[b, j, 2] = 3 * t2 - 4 * tc + 1
            out[b, j, 3] = 3 * t2 - 2 * tc
    return out


@njit(cache=True)
def hermite_slopes_adjoint(g, delta, t):
    """Adjoints ``(gx, g_left, g_right)`` of :func:`hermite_slopes` (zero outside the cell)."""
    B, J = t.shape
    gx = np.zeros((B, J))
    gl = np.zeros((B, J))
    gr = np.zeros((B, J))
    for b in range(B):
        for j in range(J):
            tt = t[b, j]
            if tt < 0.0 or tt > 1.0:
                continue
            d = delta[b, j]
            g0, g1, g2, g3 = g[b, j, 0], g[b, j, 1], g[b, j, 2], g[b, j, 3]
            s00 = 12 * tt - 6
            gt = (g0 - g1) * s00 / d + g2 * (6 * tt - 4) + g3 * (6 * tt - 2)
            d00 = 6 * tt * tt - 6 * tt
            gd = -(g0 - g1) * d00 / (d * d)
            gx[b, j] = gt / d
            gl[b, j] = gt * (tt - 1.0) / d - gd
            gr[b, j] = -gt * tt / d + gd
    return gx, gl, gr
