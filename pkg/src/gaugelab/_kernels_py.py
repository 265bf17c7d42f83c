"""Pure-numpy implementations of the compiled kernels (same signatures and results)."""
import numpy as np


def polar_weights(px, py, dr, n_r, n_phi):
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    m = px.size
    idx = np.zeros((m, 4), dtype=np.int64)
    w = np.zeros((m, 4))
    u = np.hypot(px, py) / dr
    ok = u <= n_r * (1.0 + 1e-12)
    u = np.minimum(u, n_r)
    phi = np.arctan2(py, px)
    phi = np.where(phi < 0, phi + 2 * np.pi, phi)
    v = phi / (2 * np.pi / n_phi)
    j0 = np.floor(v).astype(np.int64)
    mu = v - j0
    j0 = j0 % n_phi
    j1 = (j0 + 1) % n_phi
    i0 = np.minimum(np.floor(u).astype(np.int64), n_r - 1)
    lam = u - i0
    inner = i0 == 0
    idx[:, 0] = np.where(inner, 0, 1 + (i0 - 1) * n_phi + j0)
    idx[:, 1] = np.where(inner, 0, 1 + (i0 - 1) * n_phi + j1)
    w[:, 0] = np.where(inner, 1 - lam, (1 - lam) * (1 - mu))
    w[:, 1] = np.where(inner, 0.0, (1 - lam) * mu)
    idx[:, 2] = 1 + i0 * n_phi + j0
    idx[:, 3] = 1 + i0 * n_phi + j1
    w[:, 2] = lam * (1 - mu)
    w[:, 3] = lam * mu
    idx[~ok] = 0
    w[~ok] = 0.0
    return idx, w


def accumulate(row, weight, idx, w, out):
    n_rows, n_cols = out.shape
    flat = (np.asarray(row, dtype=np.int64)[:, None] * n_cols + idx).ravel()
    vals = (np.asarray(weight)[:, None] * w).ravel()
    out += np.bincount(flat, weights=vals, minlength=n_rows * n_cols).reshape(n_rows, n_cols)


def _lookup(tab, t0, h, n, t):
    # tab: (rows, T); t0, h, n broadcast against t of shape (rows, ...)
    safe_h = np.where(h > 0, h, 1.0)
    u = (t - t0) / safe_h
    u = np.clip(u, 0.0, n.astype(float))
    i = np.minimum(np.floor(u).astype(np.int64), np.maximum(n - 1, 0))
    f = u - i
    rows = np.arange(tab.shape[0]).reshape((-1,) + (1,) * (t.ndim - 1))
    lo = tab[rows, i]
    hi = tab[rows, np.minimum(i + 1, tab.shape[1] - 1)]
    val = (1 - f) * lo + f * hi
    return np.where((n > 0) & (h > 0), val, 0.0)


def single_scatter_block(p_in, u_in, tau_in, d_in, t0_in, h_in, n_in,
                         x_out, v_out, tau_out, d_out, t0_out, h_out, n_out):
    cr = u_in[None, :, 0] * v_out[:, None, 1] - u_in[None, :, 1] * v_out[:, None, 0]
    dx = x_out[:, None, 0] - p_in[None, :, 0]
    dy = x_out[:, None, 1] - p_in[None, :, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (dx * v_out[:, None, 1] - dy * v_out[:, None, 0]) / cr
        s = (dy * u_in[None, :, 0] - dx * u_in[None, :, 1]) / cr
    ok = (np.abs(cr) >= 1e-14) & (t >= 0) & (t <= tau_in[None, :]) & (s >= 0) \
        & (s <= tau_out[:, None])
    t = np.where(ok, t, 0.0)
    s = np.where(ok, s, 0.0)
    din = _lookup(d_in, t0_in[:, None], h_in[:, None], n_in[:, None], t.T).T
    dout = _lookup(d_out, t0_out[:, None], h_out[:, None], n_out[:, None], s)
    with np.errstate(divide="ignore"):
        g = np.where(ok, np.exp(-din - dout) / np.abs(np.where(ok, cr, 1.0)), 0.0)
    y = np.zeros(g.shape + (2,))
    y[..., 0] = np.where(ok, p_in[None, :, 0] + t * u_in[None, :, 0], 0.0)
    y[..., 1] = np.where(ok, p_in[None, :, 1] + t * u_in[None, :, 1], 0.0)
    return g, y


def lookup_rows(tab, t0, h, n, rows, t):
    t0r, hr, nr = t0[rows], h[rows], n[rows]
    safe = np.where(hr > 0, hr, 1.0)
    u = np.clip((t - t0r) / safe, 0.0, nr.astype(float))
    i = np.minimum(np.floor(u).astype(np.int64), np.maximum(nr - 1, 0))
    f = u - i
    lo = tab[rows, i]
    hi = tab[rows, np.minimum(i + 1, tab.shape[1] - 1)]
    return np.where((nr > 0) & (hr > 0), (1 - f) * lo + f * hi, 0.0)


def cell_depths(y, u, pos, aj, sj, da, ds, n_sub, cx, cy, radius, sub_p, sub_u, tab, t0, h, n):
    base = pos * (n_sub * n_sub)

    def depth(rows):
        t = np.sum((y - sub_p[rows]) * sub_u[rows], axis=1)
        return lookup_rows(tab, t0, h, n, rows, t)

    if n_sub == 1:
        return depth(base)
    p = u[:, 0] * (y[:, 1] - cy) - u[:, 1] * (y[:, 0] - cx)
    sl = np.arcsin(np.clip(p / radius, -1.0, 1.0))
    phi = np.arctan2(u[:, 1], u[:, 0])
    al = np.mod(phi - np.pi - sl - aj + np.pi, 2 * np.pi) - np.pi
    fa = al / (da / n_sub) + 0.5 * (n_sub - 1)
    fs = (sl - sj) / (ds / n_sub) + 0.5 * (n_sub - 1)
    ia = np.clip(np.floor(fa), 0, n_sub - 2).astype(np.int64)
    js = np.clip(np.floor(fs), 0, n_sub - 2).astype(np.int64)
    wa = fa - ia
    wsv = fs - js
    out = np.zeros(y.shape[0])
    for a_i, w_a in ((0, 1 - wa), (1, wa)):
        for s_i, w_s in ((0, 1 - wsv), (1, wsv)):
            out += w_a * w_s * depth(base + (ia + a_i) * n_sub + (js + s_i))
    return out


def window_points(xo, vo, ri, sig_lo, sig_hi, pos, aj, sj, dl, wl, xs, ws, da, ds, n_sub,
                  cx, cy, radius, otab, o0, oh, on_, sub_p, sub_u, tab, t0, h, n):
    P, nq, ns = xo.shape[0], dl.size, xs.size
    delta = np.broadcast_to(dl[None, :], (P, nq))
    s_lo = sj[:, None] + np.maximum(-0.5 * ds, delta - 0.5 * da)
    s_hi = sj[:, None] + np.minimum(0.5 * ds, delta + 0.5 * da)
    s_hi = np.maximum(s_hi, s_lo)
    phi = (aj + np.pi + sj)[:, None] + delta
    u0, u1 = np.cos(phi), np.sin(phi)
    p_lo = radius * np.sin(s_lo)
    p_hi = radius * np.sin(s_hi)
    x_p = -(xo[:, 0:1] - cx) * u1 + (xo[:, 1:2] - cy) * u0
    v_p = -vo[:, 0:1] * u1 + vo[:, 1:2] * u0
    par = np.abs(v_p) < 1e-13
    inside = (x_p >= p_lo) & (x_p <= p_hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = (x_p - p_lo) / v_p
        a2 = (x_p - p_hi) / v_p
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(a1, a2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(a1, a2))
    lo = np.maximum(lo, sig_lo[:, None])
    hi = np.minimum(hi, sig_hi[:, None])
    ok = hi > lo
    length = np.where(ok, hi - lo, 0.0)
    lo = np.where(ok, lo, 0.0)
    sig = lo[..., None] + 0.5 * length[..., None] * (1 + xs)
    y = xo[:, None, None, :] - sig[..., None] * vo[:, None, None, :]
    shp = sig.shape
    rr = np.broadcast_to(ri[:, None, None], shp).ravel()
    dout = lookup_rows(otab, o0, oh, on_, rr, sig.ravel()).reshape(shp)
    uu = np.stack([np.broadcast_to(u0[..., None], shp), np.broadcast_to(u1[..., None], shp)],
                  axis=-1)
    rep = nq * ns
    din = cell_depths(y.reshape(-1, 2), uu.reshape(-1, 2), np.repeat(pos, rep),
                      np.repeat(aj, rep), np.repeat(sj, rep), da, ds, n_sub, cx, cy, radius,
                      sub_p, sub_u, tab, t0, h, n).reshape(shp)
    w = wl[None, :, None] * 0.5 * length[..., None] * ws * np.exp(-din - dout)
    w = np.where(ok[..., None], w, 0.0)
    return y, w
