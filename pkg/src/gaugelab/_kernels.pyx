# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops; semantics mirror gaugelab._kernels_py exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, asin, sin, cos, floor, fabs, exp, M_PI

cnp.import_array()


def polar_weights(double[:] px, double[:] py, double dr, int n_r, int n_phi):
    """Bilinear (radius, angle) interpolation stencils on a polar node grid.

    Node 0 is the center; ring i >= 1, angle j has index 1 + (i-1)*n_phi + j.
    Points beyond the outer ring get zero weights.
    """
    cdef Py_ssize_t m = px.shape[0]
    idx_arr = np.zeros((m, 4), dtype=np.int64)
    w_arr = np.zeros((m, 4), dtype=np.float64)
    cdef long long[:, :] idx = idx_arr
    cdef double[:, :] w = w_arr
    cdef double dphi = 2.0 * M_PI / n_phi
    cdef double r, u, lam, phi, v, mu
    cdef long long i0, j0, j1
    cdef Py_ssize_t s
    with nogil:
        for s in range(m):
            r = sqrt(px[s] * px[s] + py[s] * py[s])
            u = r / dr
            if u > n_r * (1.0 + 1e-12):
                continue
            if u > n_r:
                u = n_r
            phi = atan2(py[s], px[s])
            if phi < 0:
                phi = phi + 2.0 * M_PI
            v = phi / dphi
            j0 = <long long> floor(v)
            mu = v - j0
            j0 = j0 % n_phi
            j1 = (j0 + 1) % n_phi
            i0 = <long long> floor(u)
            if i0 >= n_r:
                i0 = n_r - 1
            lam = u - i0
            if i0 == 0:
                idx[s, 0] = 0
                idx[s, 1] = 0
                w[s, 0] = 1.0 - lam
                w[s, 1] = 0.0
            else:
                idx[s, 0] = 1 + (i0 - 1) * n_phi + j0
                idx[s, 1] = 1 + (i0 - 1) * n_phi + j1
                w[s, 0] = (1.0 - lam) * (1.0 - mu)
                w[s, 1] = (1.0 - lam) * mu
            idx[s, 2] = 1 + i0 * n_phi + j0
            idx[s, 3] = 1 + i0 * n_phi + j1
            w[s, 2] = lam * (1.0 - mu)
            w[s, 3] = lam * mu
    return idx_arr, w_arr


def accumulate(long long[:] row, double[:] weight, long long[:, :] idx, double[:, :] w,
               double[:, :] out):
    """out[row[s], idx[s, c]] += weight[s] * w[s, c]."""
    cdef Py_ssize_t s, c
    cdef Py_ssize_t m = row.shape[0]
    with nogil:
        for s in range(m):
            for c in range(4):
                out[row[s], idx[s, c]] += weight[s] * w[s, c]


cdef inline double _lookup(double[:, :] tab, Py_ssize_t r, double t0, double h, long long n,
                           double t) nogil:
    cdef double u
    cdef long long i
    if n <= 0 or h <= 0:
        return 0.0
    u = (t - t0) / h
    if u <= 0:
        return tab[r, 0]
    if u >= n:
        return tab[r, n]
    i = <long long> floor(u)
    u = u - i
    return (1.0 - u) * tab[r, i] + u * tab[r, i + 1]


def single_scatter_block(double[:, :] p_in, double[:, :] u_in, double[:] tau_in,
                         double[:, :] d_in, double[:] t0_in, double[:] h_in, long long[:] n_in,
                         double[:, :] x_out, double[:, :] v_out, double[:] tau_out,
                         double[:, :] d_out, double[:] t0_out, double[:] h_out,
                         long long[:] n_out):
    """Broken-ray geometry for every (outgoing, incoming) pair.

    The incoming ray is p + t u, t in [0, tau_in]; the outgoing ray is traced
    backward x - s v, s in [0, tau_out].  Returns g = E_in E_out / |u x v| at
    the intersection point (0 when the rays do not meet inside both chords)
    and the intersection coordinates.
    """
    cdef Py_ssize_t nb = p_in.shape[0]
    cdef Py_ssize_t no = x_out.shape[0]
    g_arr = np.zeros((no, nb), dtype=np.float64)
    y_arr = np.zeros((no, nb, 2), dtype=np.float64)
    cdef double[:, :] g = g_arr
    cdef double[:, :, :] y = y_arr
    cdef Py_ssize_t i, j
    cdef double cr, dx, dy, t, s, din, dout
    with nogil:
        for i in range(no):
            for j in range(nb):
                cr = u_in[j, 0] * v_out[i, 1] - u_in[j, 1] * v_out[i, 0]
                if fabs(cr) < 1e-14:
                    continue
                dx = x_out[i, 0] - p_in[j, 0]
                dy = x_out[i, 1] - p_in[j, 1]
                t = (dx * v_out[i, 1] - dy * v_out[i, 0]) / cr
                s = (dy * u_in[j, 0] - dx * u_in[j, 1]) / cr
                if t < 0 or t > tau_in[j] or s < 0 or s > tau_out[i]:
                    continue
                din = _lookup(d_in, j, t0_in[j], h_in[j], n_in[j], t)
                dout = _lookup(d_out, i, t0_out[i], h_out[i], n_out[i], s)
                g[i, j] = exp(-din - dout) / fabs(cr)
                y[i, j, 0] = p_in[j, 0] + t * u_in[j, 0]
                y[i, j, 1] = p_in[j, 1] + t * u_in[j, 1]
    return g_arr, y_arr


def lookup_rows(double[:, :] tab, double[:] t0, double[:] h, long long[:] n,
                long long[:] rows, double[:] t):
    """Depth-table interpolation for (row, t) pairs, clamped to the table."""
    cdef Py_ssize_t m = rows.shape[0]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t s
    cdef long long r
    with nogil:
        for s in range(m):
            r = rows[s]
            out[s] = _lookup(tab, r, t0[r], h[r], n[r], t[s])
    return out_arr


def cell_depths(double[:, :] y, double[:, :] u, long long[:] pos, double[:] aj, double[:] sj,
                double da, double ds, int n_sub, double cx, double cy, double radius,
                double[:, :] sub_p, double[:, :] sub_u, double[:, :] tab, double[:] t0,
                double[:] h, long long[:] n):
    """Incoming optical depth at y along direction u, interpolated bilinearly in
    the (alpha, s) chart between the n_sub x n_sub sub-line tables of a cell.

    pos[k] is the first sub-line row of the cell owning point k; (aj, sj) its
    chart center.  Sub-line rows are ordered alpha-major.
    """
    cdef Py_ssize_t m = y.shape[0]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t k
    cdef long long base, ia, js, row, a_i, s_i
    cdef double p, sl, phi, al, fa, fs, wa, wsv, w, t, dx, dy, acc
    with nogil:
        for k in range(m):
            base = pos[k] * n_sub * n_sub
            if n_sub == 1:
                dx = y[k, 0] - sub_p[base, 0]
                dy = y[k, 1] - sub_p[base, 1]
                t = dx * sub_u[base, 0] + dy * sub_u[base, 1]
                out[k] = _lookup(tab, base, t0[base], h[base], n[base], t)
                continue
            p = u[k, 0] * (y[k, 1] - cy) - u[k, 1] * (y[k, 0] - cx)
            p = p / radius
            if p > 1.0:
                p = 1.0
            elif p < -1.0:
                p = -1.0
            sl = asin(p)
            phi = atan2(u[k, 1], u[k, 0])
            al = phi - M_PI - sl - aj[k] + M_PI
            al = al - 2.0 * M_PI * floor(al / (2.0 * M_PI)) - M_PI
            fa = al / (da / n_sub) + 0.5 * (n_sub - 1)
            fs = (sl - sj[k]) / (ds / n_sub) + 0.5 * (n_sub - 1)
            ia = <long long> floor(fa)
            if ia < 0:
                ia = 0
            elif ia > n_sub - 2:
                ia = n_sub - 2
            js = <long long> floor(fs)
            if js < 0:
                js = 0
            elif js > n_sub - 2:
                js = n_sub - 2
            wa = fa - ia
            wsv = fs - js
            acc = 0.0
            for a_i in range(2):
                for s_i in range(2):
                    w = (wa if a_i else 1.0 - wa) * (wsv if s_i else 1.0 - wsv)
                    row = base + (ia + a_i) * n_sub + (js + s_i)
                    dx = y[k, 0] - sub_p[row, 0]
                    dy = y[k, 1] - sub_p[row, 1]
                    t = dx * sub_u[row, 0] + dy * sub_u[row, 1]
                    acc = acc + w * _lookup(tab, row, t0[row], h[row], n[row], t)
            out[k] = acc
    return out_arr


cdef inline double _cell_depth(double y0, double y1, double u0, double u1, double phi,
                               long long pos, double aj, double sj, double da, double ds,
                               int n_sub,
                               double cx, double cy, double radius, double[:, :] sub_p,
                               double[:, :] sub_u, double[:, :] tab, double[:] t0,
                               double[:] h, long long[:] n) nogil:
    cdef long long base = pos * n_sub * n_sub
    cdef long long ia, js, row, a_i, s_i
    cdef double p, sl, al, fa, fs, wa, wsv, w, t, acc
    if n_sub == 1:
        t = (y0 - sub_p[base, 0]) * sub_u[base, 0] + (y1 - sub_p[base, 1]) * sub_u[base, 1]
        return _lookup(tab, base, t0[base], h[base], n[base], t)
    p = (u0 * (y1 - cy) - u1 * (y0 - cx)) / radius
    if p > 1.0:
        p = 1.0
    elif p < -1.0:
        p = -1.0
    sl = asin(p)
    al = phi - sl - aj
    al = al - 2.0 * M_PI * floor(al / (2.0 * M_PI)) - M_PI
    fa = al / (da / n_sub) + 0.5 * (n_sub - 1)
    fs = (sl - sj) / (ds / n_sub) + 0.5 * (n_sub - 1)
    ia = <long long> floor(fa)
    if ia < 0:
        ia = 0
    elif ia > n_sub - 2:
        ia = n_sub - 2
    js = <long long> floor(fs)
    if js < 0:
        js = 0
    elif js > n_sub - 2:
        js = n_sub - 2
    wa = fa - ia
    wsv = fs - js
    acc = 0.0
    for a_i in range(2):
        for s_i in range(2):
            w = (wa if a_i else 1.0 - wa) * (wsv if s_i else 1.0 - wsv)
            row = base + (ia + a_i) * n_sub + (js + s_i)
            t = (y0 - sub_p[row, 0]) * sub_u[row, 0] + (y1 - sub_p[row, 1]) * sub_u[row, 1]
            acc = acc + w * _lookup(tab, row, t0[row], h[row], n[row], t)
    return acc


def window_points(double[:, :] xo, double[:, :] vo, long long[:] ri, double[:] sig_lo,
                  double[:] sig_hi, long long[:] pos, double[:] aj, double[:] sj,
                  double[:] dl, double[:] wl, double[:] xs, double[:] ws,
                  double da, double ds, int n_sub, double cx, double cy, double radius,
                  double[:, :] otab, double[:] o0, double[:] oh, long long[:] on_,
                  double[:, :] sub_p, double[:, :] sub_u, double[:, :] tab, double[:] t0,
                  double[:] h, long long[:] n):
    """Quadrature points of the cell-averaged once-scattered density.

    For each (outgoing ray, incoming cell) pair and each incoming direction
    node phi' = phi_c + dl[q] the scatter parameter sigma runs over the part
    of the outgoing ray whose backward line with direction phi' enters
    through the cell, clipped to [sig_lo, sig_hi].  Returns the scatter points
    y and weights wl * w_sigma * exp(-depth_in - depth_out).
    """
    cdef Py_ssize_t P = xo.shape[0], nq = dl.shape[0], ns = xs.shape[0]
    y_arr = np.zeros((P, nq, ns, 2), dtype=np.float64)
    w_arr = np.zeros((P, nq, ns), dtype=np.float64)
    cdef double[:, :, :, :] y = y_arr
    cdef double[:, :, :] w = w_arr
    cdef Py_ssize_t k, q, m
    cdef double delta, s_lo, s_hi, phi, u0, u1, p_lo, p_hi, x_p, v_p, a1, a2, lo, hi
    cdef double length, sig, y0, y1, din, dout, phic, inf = float("inf")
    with nogil:
        for k in range(P):
            phic = aj[k] + M_PI + sj[k]
            for q in range(nq):
                delta = dl[q]
                s_lo = sj[k] + (delta - 0.5 * da if delta - 0.5 * da > -0.5 * ds else -0.5 * ds)
                s_hi = sj[k] + (delta + 0.5 * da if delta + 0.5 * da < 0.5 * ds else 0.5 * ds)
                if s_hi < s_lo:
                    s_hi = s_lo
                phi = phic + delta
                u0 = cos(phi)
                u1 = sin(phi)
                p_lo = radius * sin(s_lo)
                p_hi = radius * sin(s_hi)
                x_p = -(xo[k, 0] - cx) * u1 + (xo[k, 1] - cy) * u0
                v_p = -vo[k, 0] * u1 + vo[k, 1] * u0
                if fabs(v_p) < 1e-13:
                    if x_p >= p_lo and x_p <= p_hi:
                        lo = -inf
                        hi = inf
                    else:
                        lo = inf
                        hi = -inf
                else:
                    a1 = (x_p - p_lo) / v_p
                    a2 = (x_p - p_hi) / v_p
                    lo = a1 if a1 < a2 else a2
                    hi = a2 if a1 < a2 else a1
                if lo < sig_lo[k]:
                    lo = sig_lo[k]
                if hi > sig_hi[k]:
                    hi = sig_hi[k]
                for m in range(ns):
                    y[k, q, m, 0] = xo[k, 0]
                    y[k, q, m, 1] = xo[k, 1]
                if not hi > lo:
                    continue
                length = hi - lo
                for m in range(ns):
                    sig = lo + 0.5 * length * (1.0 + xs[m])
                    y0 = xo[k, 0] - sig * vo[k, 0]
                    y1 = xo[k, 1] - sig * vo[k, 1]
                    y[k, q, m, 0] = y0
                    y[k, q, m, 1] = y1
                    dout = _lookup(otab, ri[k], o0[ri[k]], oh[ri[k]], on_[ri[k]], sig)
                    din = _cell_depth(y0, y1, u0, u1, phi, pos[k], aj[k], sj[k], da, ds,
                                      n_sub, cx, cy, radius, sub_p, sub_u, tab, t0, h, n)
                    w[k, q, m] = wl[q] * 0.5 * length * ws[m] * exp(-din - dout)
    return y_arr, w_arr
