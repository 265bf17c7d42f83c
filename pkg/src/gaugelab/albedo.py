"""Discretized albedo operator: assembly, norms, probes and the splitting into
ballistic, once-scattered and multiply-scattered parts.

Matrix convention: column j holds the outgoing density (per unit d xi) produced
by a source of unit d xi-mass spread uniformly over incoming bin j.  With bin
weights w, the action on an incoming density f is  g = A (w_in * f)  and the
L1(d xi) operator norm is  max_j sum_i w_out[i] |A[i, j]|.

The matrix is assembled by collision order.  The ballistic part is placed at
the geometric exit bin, the once-scattered part is evaluated from its closed
form with sub-sampling of the incoming cell, and the multiply-scattered part
is obtained on an interior polar grid from a first-collision source, a
collision-to-collision operator and an outgoing line integral.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import kernels
from .fields import CoefficientPair, direction_nodes
from .geometry import (BoundaryGrid, ConvexDomain, boundary_chart, cross2,
                       line_ball_interval, locate_bins, segment_quadrature, travel_times,
                       unit_from_angle)
from .transport import PolarGrid, iter_ray_samples, march_matrix, require_subcritical


class UnsupportedModeError(ValueError):
    """Requested operation is not defined for this dimension."""


# ---------------------------------------------------------------------------
# matrices and norms

@dataclass
class AlbedoMatrix:
    """Dense (outgoing bin, incoming bin) matrix with its boundary grids."""

    values: np.ndarray
    grid_in: BoundaryGrid
    grid_out: BoundaryGrid
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    @property
    def dimension(self) -> int:
        return self.grid_in.dimension

    def column_mass(self) -> np.ndarray:
        return self.grid_out.weights @ np.abs(self.values)

    def apply(self, f) -> np.ndarray:
        """Outgoing density for incoming density f (values per bin)."""
        return self.values @ (self.grid_in.weights * np.asarray(f, dtype=float))

    def __sub__(self, other: "AlbedoMatrix") -> "AlbedoMatrix":
        return AlbedoMatrix(self.values - other.values, self.grid_in, self.grid_out,
                            {"difference": True})


def op_norm(A, norm: str = "L1", w_in=None, w_out=None) -> float:
    """L1(d xi) or L-infinity operator norm of an albedo matrix (or a raw matrix
    with explicit weights)."""
    if isinstance(A, AlbedoMatrix):
        w_in, w_out, M = A.grid_in.weights, A.grid_out.weights, A.values
    else:
        M = np.asarray(A, dtype=float)
        if w_in is None or w_out is None:
            raise ValueError("raw matrices need w_in and w_out")
    if M.size == 0:
        return 0.0
    if norm == "L1":
        return float(np.max(np.asarray(w_out) @ np.abs(M)))
    if norm in ("Linf", "inf"):
        return float(np.max(np.abs(M) @ np.asarray(w_in)))
    raise ValueError(f"unknown norm {norm!r}")


# ---------------------------------------------------------------------------
# settings

@dataclass
class AssemblySettings:
    """Discretization parameters of the assembly (None selects a default tied
    to the boundary resolution)."""

    chord_step: float | None = None
    table_step: float | None = None
    n_sub: int | None = None
    n_radial: int | None = None
    n_phi: int | None = None
    n_dir: int | None = None
    march_step: float | None = None
    method: str = "auto"
    orders: str = "full"
    block: int = 256
    threads: int = 1
    # 3-D once-scattered quadrature
    n_t: int = 8
    n_q: int = 128
    # window quadrature for near-parallel once-scattered pairs
    window_factor: float = 4.0
    window_order: int = 6
    window_sigma: int = 8
    # general (anisotropic) multiple-scattering route
    gen_tol: float = 1e-12
    gen_max_iter: int = 200

    def resolve(self, domain: ConvexDomain, grid: BoundaryGrid) -> "AssemblySettings":
        s = AssemblySettings(**self.__dict__)
        if s.chord_step is None:
            s.chord_step = domain.R / 1000.0
        if s.table_step is None:
            s.table_step = 8.0 * s.chord_step
        if s.n_sub is None:
            # sub-lines per incoming bin; coarse grids need more to resolve
            # bins that graze the support
            s.n_sub = int(min(8, max(2, 64 // max(grid.n_b, 1))))
        if s.n_radial is None:
            s.n_radial = max(4, grid.n_b // 4)
        if s.n_phi is None:
            s.n_phi = 4 * s.n_radial
        if s.n_dir is None:
            s.n_dir = 8 * s.n_radial
        return s


def grid_target(grid: BoundaryGrid, domain: ConvexDomain) -> str:
    """'outer' for grids on the sphere of radius R, 'inner' for grids on Omega."""
    if abs(grid.radius - domain.R) < 1e-12 and np.allclose(grid.center, 0.0):
        return "outer"
    return "inner"


# ---------------------------------------------------------------------------
# depth tables along chords

def _support_ball(field_, domain: ConvexDomain):
    if getattr(field_, "support", "omega") == "omega":
        return domain.center, domain.omega_radius
    return np.zeros(domain.dimension), domain.R


def depth_tables(x, dirs, sign, a, domain: ConvexDomain, target: str, table_step: float,
                 h: float, chunk: int = 2_000_000):
    """Cumulative optical depth along x + sign t dirs (travel direction dirs).

    Returns (t0, H, n, tab, tau) where tab[:, m] is the depth accumulated
    between t = 0 and t0 + m H, n the number of table intervals covering the
    support of a on the chord, and tau the chord length to the target boundary.
    """
    x = np.asarray(x, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    tm, tp = travel_times(x, dirs, domain, target)
    tau = tp if sign > 0 else tm
    c, r = _support_ball(a, domain)
    lo, hi, hit = line_ball_interval(x, sign * dirs, c, r)
    lo = np.clip(lo, 0.0, tau)
    hi = np.clip(hi, 0.0, tau)
    hit = hit & (hi > lo)
    length = np.where(hit, hi - lo, 0.0)
    n = np.where(hit, np.maximum(np.ceil(length / table_step - 1e-12), 1), 0).astype(np.int64)
    H = np.where(n > 0, length / np.maximum(n, 1), 0.0)
    nmax = int(n.max(initial=0))
    sub = max(1, int(math.ceil(table_step / h - 1e-12)))
    tab = np.zeros((x.shape[0], nmax + 1))
    if nmax == 0:
        return lo, H, n, tab, tau
    rows = max(1, chunk // (nmax * sub))
    frac = (np.arange(sub) + 0.5) / sub
    for s0 in range(0, x.shape[0], rows):
        sl = slice(s0, min(x.shape[0], s0 + rows))
        m = np.arange(nmax)
        tt = (lo[sl, None, None] + (m[None, :, None] + frac[None, None, :])
              * H[sl, None, None])
        pts = x[sl, None, None, :] + sign * tt[..., None] * dirs[sl, None, None, :]
        th = np.broadcast_to(dirs[sl, None, None, :], pts.shape)
        vals = np.asarray(a(pts.reshape(-1, x.shape[1]), th.reshape(-1, x.shape[1])),
                          dtype=float).reshape(tt.shape)
        vals = vals.sum(axis=2) * (H[sl, None] / sub)
        vals[m[None, :] >= n[sl, None]] = 0.0
        tab[sl, 1:] = np.cumsum(vals, axis=1)
    # beyond the last interval the table keeps the total depth
    return lo, H, n, tab, tau


# ---------------------------------------------------------------------------
# assembler

@dataclass
class ColumnBlock:
    cols: np.ndarray
    ballistic: np.ndarray
    single: np.ndarray
    multi: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return self.ballistic + self.single + self.multi


class AlbedoAssembler:
    """Precomputes everything column-independent for one coefficient pair and
    produces dense column blocks of the albedo matrix on demand."""

    def __init__(self, pair: CoefficientPair, domain: ConvexDomain, grid_in: BoundaryGrid,
                 grid_out: BoundaryGrid, settings: AssemblySettings | None = None,
                 check: bool = True):
        if grid_in.dimension != domain.dimension or grid_out.dimension != domain.dimension:
            raise ValueError("grid and domain dimensions differ")
        if grid_in.orientation != "incoming" or grid_out.orientation != "outgoing":
            raise ValueError("need an incoming and an outgoing grid")
        self.pair = pair
        self.domain = domain
        self.grid_in = grid_in
        self.grid_out = grid_out
        self.target = grid_target(grid_in, domain)
        if grid_target(grid_out, domain) != self.target:
            raise ValueError("incoming and outgoing grids must lie on the same boundary")
        self.settings = (settings or AssemblySettings()).resolve(domain, grid_in)
        if check and self.settings.orders == "full":
            require_subcritical(pair, domain)
        self.k_zero = bool(getattr(pair.k, "is_zero", False))
        if domain.dimension == 3 and self.settings.orders == "full" and not self.k_zero:
            raise UnsupportedModeError("3-D multiple scattering is not assembled; use "
                                       "orders='single' (ballistic + once scattered)")
        self.isotropic = bool(getattr(pair.k, "isotropic", False))
        self._ballistic()
        if not self.k_zero and self.settings.orders in ("full", "single"):
            self._prepare_single()
        self._multi_ready = False

    # -- ballistic --------------------------------------------------------
    def _ballistic(self):
        g, d, s = self.grid_in, self.domain, self.settings
        _, tp = travel_times(g.points, g.directions, d, self.target)
        depth = segment_quadrature(g.points, g.directions, np.zeros_like(tp), tp, self.pair.a,
                                   d, s.chord_step)
        self.strength = np.exp(-depth)
        x_plus = g.points + tp[:, None] * g.directions
        self.exit_index = locate_bins(self.grid_out, x_plus, g.directions)

    def ballistic_block(self, cols) -> np.ndarray:
        cols = np.asarray(cols)
        out = np.zeros((self.grid_out.size, cols.size))
        e = self.exit_index[cols]
        ok = e >= 0
        out[e[ok], np.nonzero(ok)[0]] = self.strength[cols][ok] / self.grid_out.weights[e[ok]]
        return out

    # -- once scattered ---------------------------------------------------
    def _subsamples_2d(self):
        g, n = self.grid_in, self.settings.n_sub
        alpha, s = boundary_chart(g, g.points, g.directions)
        da, ds = g.meta["d_alpha"], g.meta["d_s"]
        off = (np.arange(n) + 0.5) / n - 0.5
        A = alpha[:, None, None] + off[None, :, None] * da
        S = s[:, None, None] + off[None, None, :] * ds
        A, S = np.broadcast_arrays(A, S)
        A = A.reshape(g.size, n * n)
        S = S.reshape(g.size, n * n)
        pts = g.center + g.radius * unit_from_angle(A)
        dirs = unit_from_angle(A + np.pi + S)
        w = np.abs(np.cos(S))
        w = w / w.sum(axis=1, keepdims=True)
        return pts, dirs, w

    def _prepare_single(self):
        d, s = self.domain, self.settings
        kc, kr = _support_ball(self.pair.k, d)
        go = self.grid_out
        _, _, hit_out = line_ball_interval(go.points, go.directions, kc, kr)
        self.active_out = np.nonzero(hit_out)[0]
        if d.dimension == 3:
            gi = self.grid_in
            _, _, hit_in = line_ball_interval(gi.points, gi.directions, kc, kr)
            self.active_in_mask = hit_in
            return
        pts, dirs, w = self._subsamples_2d()
        ns = pts.shape[1]
        flat_p = pts.reshape(-1, 2)
        flat_d = dirs.reshape(-1, 2)
        _, _, hit = line_ball_interval(flat_p, flat_d, kc, kr)
        hit = hit.reshape(-1, ns)
        self.active_in_mask = hit.any(axis=1)
        act = np.nonzero(self.active_in_mask)[0]
        self._sub_pts = pts[act]
        self._sub_dirs = dirs[act]
        self._sub_w = w[act]
        self._act_pos = -np.ones(self.grid_in.size, dtype=np.int64)
        self._act_pos[act] = np.arange(act.size)
        t0, H, n, tab, tau = depth_tables(self._sub_pts.reshape(-1, 2),
                                          self._sub_dirs.reshape(-1, 2), +1.0, self.pair.a,
                                          d, self.target, s.table_step, s.chord_step)
        self._in_tab = (t0, H, n, tab, tau)
        xo = go.points[self.active_out]
        vo = go.directions[self.active_out]
        self._out_tab = depth_tables(xo, vo, -1.0, self.pair.a, d, self.target,
                                     s.table_step, s.chord_step)

    def single_block(self, cols) -> np.ndarray:
        cols = np.asarray(cols)
        out = np.zeros((self.grid_out.size, cols.size))
        if self.k_zero or self.settings.orders == "ballistic":
            return out
        if self.domain.dimension == 3:
            return self._single_block_3d(cols)
        pos = self._act_pos[cols]
        sel = np.nonzero(pos >= 0)[0]
        if sel.size == 0 or self.active_out.size == 0:
            return out
        ns = self._sub_pts.shape[1]
        rows = (pos[sel][:, None] * ns + np.arange(ns)[None, :]).ravel()
        t0, H, n, tab, tau = self._in_tab
        o0, oH, on, otab, otau = self._out_tab
        xo = self.grid_out.points[self.active_out]
        vo = self.grid_out.directions[self.active_out]
        p_in = self._sub_pts.reshape(-1, 2)[rows]
        u_in = self._sub_dirs.reshape(-1, 2)[rows]
        g, y = kernels.single_scatter_block(p_in, u_in, tau[rows], tab[rows], t0[rows],
                                            H[rows], n[rows], xo, vo, otau, otab, o0, oH, on)
        if self.isotropic:
            kval = self.pair.k.density(y.reshape(-1, 2)).reshape(g.shape)
        else:
            ti = np.broadcast_to(u_in[None, :, :], y.shape).reshape(-1, 2)
            to = np.broadcast_to(vo[:, None, :], y.shape).reshape(-1, 2)
            kval = self.pair.k(y.reshape(-1, 2), ti, to).reshape(g.shape)
        val = g * kval
        wsub = self._sub_w[pos[sel]].ravel()
        live = (val > 0).reshape(len(xo), sel.size, ns)
        val = (val * wsub[None, :]).reshape(len(xo), sel.size, ns).sum(axis=2)
        near = self._window_pairs(cols[sel], xo, vo, live, y.reshape(len(xo), sel.size, ns, 2))
        if np.any(near):
            ri, ci = np.nonzero(near)
            val[ri, ci] = self._window_single(ri, cols[sel][ci])
        out[np.ix_(self.active_out, sel)] = val
        return out

    def _window_pairs(self, cj, xo, vo, live, y):
        """Pairs whose point-sampled cell average is unreliable: near-parallel
        directions, cells only partly meeting the outgoing chord, and cells
        whose scatter points straddle the boundary of the kernel support."""
        gi = self.grid_in
        da, ds_ = gi.meta["d_alpha"], gi.meta["d_s"]
        half = 0.5 * (da + ds_)
        phi_c = np.arctan2(gi.directions[cj, 1], gi.directions[cj, 0])
        phi_o = np.arctan2(vo[:, 1], vo[:, 0])

        def wrap(v):
            return np.abs(np.mod(v + np.pi, 2 * np.pi) - np.pi)

        mark = wrap(phi_o[:, None] - phi_c[None, :]) < self.settings.window_factor * half
        cnt = live.sum(axis=2)
        mark |= (cnt > 0) & (cnt < live.shape[2])
        # outgoing chord endpoints inside the entry or exit arc of the cell
        alpha_j, s_j = boundary_chart(gi, gi.points[cj], gi.directions[cj])
        cen = gi.center
        a_exit = np.arctan2(xo[:, 1] - cen[1], xo[:, 0] - cen[0])
        _, tm = travel_times(xo, -vo, self.domain, self.target)
        xe = xo - tm[:, None] * vo
        a_entry = np.arctan2(xe[:, 1] - cen[1], xe[:, 0] - cen[0])
        w_in = 0.5 * da + 1e-12
        w_out = 0.5 * da + ds_ + 1e-12
        b_j = alpha_j + np.pi + 2 * s_j
        for ang in (a_exit, a_entry):
            mark |= wrap(ang[:, None] - alpha_j[None, :]) < w_in
            mark |= wrap(ang[:, None] - b_j[None, :]) < w_out
        # scatter points of the cell straddling the kernel support boundary
        if getattr(self.pair.k, "support", "omega") == "omega":
            kc, kr = _support_ball(self.pair.k, self.domain)
            anyl = cnt > 0
            if np.any(anyl):
                ym = np.where(live[..., None], y, 0.0).sum(axis=2) / np.maximum(cnt, 1)[..., None]
                spread = np.where(live, np.linalg.norm(y - ym[:, :, None, :], axis=-1), 0.0)
                spread = spread.max(axis=2)
                dist = np.abs(np.linalg.norm(ym - kc, axis=-1) - kr)
                mark |= anyl & (dist < 2.0 * spread + 1e-12)
        return mark

    def _window_single(self, ri, cj, chunk: int = 4_000_000):
        """Cell-averaged once-scattered density for (active outgoing row, incoming
        bin) pairs, integrating over the scatter parameter sigma along the
        outgoing ray and the incoming direction phi' across the cell.

        In these coordinates d xi' = |theta x theta'| d sigma d phi' / 2 pi, so
        the 1/|theta x theta'| factor cancels and the integrand is bounded.
        """
        gi, d, st = self.grid_in, self.domain, self.settings
        da, ds_ = gi.meta["d_alpha"], gi.meta["d_s"]
        alpha_j, s_j = boundary_chart(gi, gi.points[cj], gi.directions[cj])
        # phi' panels split where the s-interval length changes slope
        k1, k2 = 0.5 * abs(da - ds_), 0.5 * (da + ds_)
        edges = np.unique(np.array([-k2, -k1, k1, k2]))
        xg, wg = np.polynomial.legendre.leggauss(st.window_order)
        dl = np.concatenate([0.5 * (lo + hi) + 0.5 * (hi - lo) * xg
                             for lo, hi in zip(edges[:-1], edges[1:])])
        wl = np.concatenate([0.5 * (hi - lo) * wg for lo, hi in zip(edges[:-1], edges[1:])])
        xs, ws = np.polynomial.legendre.leggauss(st.window_sigma)
        io = self.active_out[ri]
        xo = self.grid_out.points[io]
        vo = self.grid_out.directions[io]
        o0, oH, on, otab, otau = self._out_tab
        t0, H, nn, tab, tau = self._in_tab
        # sigma range: the outgoing chord intersected with the kernel support
        kc, kr = _support_ball(self.pair.k, d)
        lo_k, hi_k, hit_k = line_ball_interval(xo, -vo, kc, kr)
        sig_lo = np.clip(lo_k, 0.0, otau[ri])
        sig_hi = np.where(hit_k, np.clip(hi_k, 0.0, otau[ri]), sig_lo)
        sub_p = self._sub_pts.reshape(-1, 2)
        sub_u = self._sub_dirs.reshape(-1, 2)
        pos = self._act_pos[cj]
        phi_c = alpha_j + np.pi + s_j
        tot = np.zeros(cj.size)
        step = max(1, chunk // (dl.size * xs.size))
        for c0 in range(0, cj.size, step):
            sl = slice(c0, min(cj.size, c0 + step))
            y, w = kernels.window_points(
                xo[sl], vo[sl], ri[sl], sig_lo[sl], sig_hi[sl], pos[sl], alpha_j[sl],
                s_j[sl], dl, wl, xs, ws, da, ds_, self.settings.n_sub, gi.center[0],
                gi.center[1], gi.radius, otab, o0, oH, on, sub_p, sub_u, tab, t0, H, nn)
            yf = y.reshape(-1, 2)
            if self.isotropic:
                kv = self.pair.k.density(yf)
            else:
                phi = phi_c[sl, None] + dl[None, :]
                u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
                uu = np.broadcast_to(u[:, :, None, :], y.shape).reshape(-1, 2)
                vv = np.broadcast_to(vo[sl, None, None, :], y.shape).reshape(-1, 2)
                kv = self.pair.k(yf, uu, vv)
            tot[sl] = (kv.reshape(w.shape) * w).sum(axis=(1, 2))
        return tot / (2 * np.pi * gi.weights[cj])

    def _single_block_3d(self, cols):
        d, s = self.domain, self.settings
        out = np.zeros((self.grid_out.size, cols.size))
        kc, kr = _support_ball(self.pair.k, d)
        gi = self.grid_in
        qdirs = direction_nodes(3, s.n_q)
        for c_idx, j in enumerate(cols):
            if not self.active_in_mask[j]:
                continue
            x0, u = gi.points[j], gi.directions[j]
            lo, hi, hit = line_ball_interval(x0[None], u[None], kc, kr)
            _, tp = travel_times(x0[None], u[None], d, self.target)
            lo, hi = max(lo[0], 0.0), min(hi[0], tp[0])
            if not hi > lo:
                continue
            dt = (hi - lo) / s.n_t
            t = lo + (np.arange(s.n_t) + 0.5) * dt
            y = x0 + t[:, None] * u
            d_in = segment_quadrature(np.repeat(x0[None], s.n_t, 0), np.repeat(u[None], s.n_t, 0),
                                      np.zeros(s.n_t), t, self.pair.a, d, s.chord_step)
            Y = np.repeat(y, len(qdirs), axis=0)
            Th = np.tile(qdirs, (s.n_t, 1))
            _, tq = travel_times(Y, Th, d, self.target)
            d_out = segment_quadrature(Y, Th, np.zeros_like(tq), tq, self.pair.a, d,
                                       s.table_step)
            F = np.exp(-np.repeat(d_in, len(qdirs)) - d_out)
            kv = self.pair.k(Y, np.broadcast_to(u, Th.shape), Th)
            mass = kv * F * dt / len(qdirs)
            idx = locate_bins(self.grid_out, Y + tq[:, None] * Th, Th)
            ok = (idx >= 0) & (mass != 0)
            col = np.bincount(idx[ok], weights=mass[ok], minlength=self.grid_out.size)
            out[:, c_idx] = col / np.where(self.grid_out.weights > 0, self.grid_out.weights, 1.0)
        return out

    # -- multiply scattered (2-D) -------------------------------------------
    def _prepare_multi(self):
        if self._multi_ready:
            return
        d, s = self.domain, self.settings
        _, kr = _support_ball(self.pair.k, d)
        rad = d.support_radius if getattr(self.pair.k, "support", "omega") == "omega" else d.R
        if rad <= 0:
            rad = kr if kr > 0 else d.R
        self.space = PolarGrid(rad, s.n_radial, s.n_phi)
        if s.march_step is None:
            s.march_step = self.space.dr / 2.0
        self.nodes = self.space.nodes
        self.areas = self.space.lumped_areas
        method = s.method
        if method == "auto":
            method = "isotropic" if self.isotropic else "general"
        self.method = method
        xo = self.grid_out.points[self.active_out]
        vo = self.grid_out.directions[self.active_out]
        self.Gamma = march_matrix(xo, vo, self.pair.a, d, self.space, s.march_step, -1.0,
                                  dense=True, h_quad=s.chord_step)
        if method == "isotropic":
            self._prepare_isotropic()
        else:
            self._prepare_general()
        self._multi_ready = True

    def _prepare_isotropic(self):
        s, N = self.settings, self.space.size
        P = np.zeros((N, N))
        dirs = unit_from_angle((np.arange(s.n_dir) + 0.5) * 2 * np.pi / s.n_dir)
        per = max(1, 4096 // max(1, N // 64))
        for l0 in range(0, s.n_dir, per):
            dl = dirs[l0:l0 + per]
            origins = np.tile(self.nodes, (len(dl), 1))
            odirs = np.repeat(dl, N, axis=0)
            for owner, pts, wgt in iter_ray_samples(origins, odirs, self.pair.a, self.domain,
                                                    self.space, s.march_step, -1.0,
                                                    h_quad=s.chord_step):
                idx, w = self.space.weights(pts)
                kernels.accumulate(owner % N, wgt / s.n_dir, idx, w, P)
        self.kappa = self.pair.k.density(self.nodes)
        P *= self.kappa[:, None]
        self.P = P
        self.lu = sla.lu_factor(np.eye(N) - P)

    def _prepare_general(self):
        s = self.settings
        q = s.n_dir
        self.gdirs = unit_from_angle((np.arange(q) + 0.5) * 2 * np.pi / q)
        N = self.space.size
        self.L = [march_matrix(self.nodes, np.broadcast_to(th, self.nodes.shape), self.pair.a,
                               self.domain, self.space, s.march_step, -1.0, dense=False,
                               h_quad=s.chord_step) for th in self.gdirs]
        X = np.repeat(self.nodes, q * q, axis=0)
        Ti = np.tile(np.repeat(self.gdirs, q, axis=0), (N, 1))
        To = np.tile(np.tile(self.gdirs, (q, 1)), (N, 1))
        self.Kt = self.pair.k(X, Ti, To).reshape(N, q, q) / q

    def first_collision(self, cols) -> np.ndarray:
        """Line deposit of the uncollided flux of each incoming bin on the
        interior nodes (N x len(cols)), without the kernel factor."""
        s = self.settings
        gi = self.grid_in
        cols = np.asarray(cols)
        out = np.zeros((cols.size, self.space.size))
        x, u = gi.points[cols], gi.directions[cols]
        _, tp = travel_times(x, u, self.domain, self.target)
        for owner, pts, wgt in iter_ray_samples(x, u, self.pair.a, self.domain, self.space,
                                                s.march_step, +1.0, h_quad=s.chord_step):
            # stop at the exit of the chord (grids on the boundary of Omega)
            t = np.linalg.norm(pts - x[owner], axis=1)
            wgt = np.where(t <= tp[owner], wgt, 0.0)
            idx, w = self.space.weights(pts)
            kernels.accumulate(owner, wgt, idx, w, out)
        return (out / self.areas[None, :]).T

    def multi_block(self, cols) -> np.ndarray:
        cols = np.asarray(cols)
        out = np.zeros((self.grid_out.size, cols.size))
        if self.k_zero or self.settings.orders != "full":
            return out
        sel = np.nonzero(self.active_in_mask[cols])[0]
        if sel.size == 0 or self.active_out.size == 0:
            return out
        self._prepare_multi()
        line = self.first_collision(cols[sel])
        if self.method == "isotropic":
            S1 = self.kappa[:, None] * line
            Y = sla.lu_solve(self.lu, self.P @ S1)
            val = self.Gamma @ Y
        else:
            val = self._multi_general(cols[sel], line)
        out[np.ix_(self.active_out, sel)] = val
        return out

    def _multi_general(self, cols, line):
        s = self.settings
        N, q = self.space.size, len(self.gdirs)
        gi = self.grid_in
        th_in = gi.directions[cols]
        nb = len(cols)
        X = np.repeat(self.nodes, q * nb, axis=0)
        Ti = np.tile(np.tile(th_in, (q, 1)), (N, 1))
        To = np.tile(np.repeat(self.gdirs, nb, axis=0), (N, 1))
        kin = self.pair.k(X, Ti, To).reshape(N, q, nb)
        S = kin * line[:, None, :]
        Psi = np.zeros((N, q, nb))
        ref = None
        for _ in range(s.gen_max_iter):
            psi = np.stack([self.L[l] @ S[:, l, :] for l in range(q)], axis=1)
            Psi += psi
            mag = float(np.max(np.abs(psi), initial=0.0))
            if ref is None:
                ref = max(mag, 1e-300)
            if mag <= s.gen_tol * ref:
                break
            S = np.einsum("nij,nib->njb", self.Kt, psi)
        xo = self.grid_out.points[self.active_out]
        vo = self.grid_out.directions[self.active_out]
        res = np.zeros((len(xo), nb))
        Xn = np.repeat(self.nodes, q, axis=0)
        Tn = np.tile(self.gdirs, (N, 1))
        for i in range(len(xo)):
            kout = self.pair.k(Xn, Tn, np.broadcast_to(vo[i], Tn.shape)).reshape(N, q) / q
            src = np.einsum("nl,nlb->nb", kout, Psi)
            res[i] = self.Gamma[i] @ src
        return res

    # -- blocks -------------------------------------------------------------
    def block(self, cols) -> ColumnBlock:
        cols = np.asarray(cols)
        return ColumnBlock(cols, self.ballistic_block(cols), self.single_block(cols),
                           self.multi_block(cols))

    def column_blocks(self, cols=None):
        n = self.grid_in.size
        cols = np.arange(n) if cols is None else np.asarray(cols)
        b = self.settings.block
        return [cols[i:i + b] for i in range(0, cols.size, b)]

    def assemble(self) -> AlbedoMatrix:
        out = np.zeros((self.grid_out.size, self.grid_in.size))
        for cols in self.column_blocks():
            out[:, cols] = self.block(cols).full
        return AlbedoMatrix(out, self.grid_in, self.grid_out,
                            {"orders": self.settings.orders, "target": self.target})


def assemble_albedo(pair: CoefficientPair, domain: ConvexDomain, grid_in: BoundaryGrid,
                    grid_out: BoundaryGrid, settings: AssemblySettings | None = None
                    ) -> AlbedoMatrix:
    """Assemble the albedo matrix of a pair on the given boundary grids."""
    return AlbedoAssembler(pair, domain, grid_in, grid_out, settings).assemble()


# ---------------------------------------------------------------------------
# decomposition

@dataclass
class KernelDecomposition:
    """Ballistic map, once-scattered kernel and remainder on bin pairs.

    The once-scattered values in the ballistic exit bin of each column are
    moved into the remainder so that the two singular parts stay separated.
    """

    exit_index: np.ndarray
    strength: np.ndarray
    single: np.ndarray
    remainder: np.ndarray
    cross: np.ndarray
    grid_in: BoundaryGrid
    grid_out: BoundaryGrid

    def ballistic_matrix(self) -> np.ndarray:
        out = np.zeros(self.single.shape)
        ok = self.exit_index >= 0
        j = np.nonzero(ok)[0]
        out[self.exit_index[ok], j] = self.strength[ok] / self.grid_out.weights[self.exit_index[ok]]
        return out

    @property
    def weighted_remainder(self) -> np.ndarray:
        return self.cross * self.remainder

    def reassemble(self) -> np.ndarray:
        return self.ballistic_matrix() + self.single + self.remainder


def cross_weights(grid_in: BoundaryGrid, grid_out: BoundaryGrid, cols=None) -> np.ndarray:
    """|theta x theta'| on (outgoing, incoming) bin pairs (2-D)."""
    din = grid_in.directions if cols is None else grid_in.directions[cols]
    return np.abs(cross2(din[None, :, :], grid_out.directions[:, None, :]))


def _split_block(asm: AlbedoAssembler, blk: ColumnBlock):
    single = blk.single.copy()
    e = asm.exit_index[blk.cols]
    ok = e >= 0
    j = np.nonzero(ok)[0]
    single[e[ok], j] = 0.0
    remainder = blk.full - blk.ballistic - single
    return single, remainder


def decompose_kernel(pair: CoefficientPair, domain: ConvexDomain, grid_in: BoundaryGrid,
                     grid_out: BoundaryGrid, full: AlbedoMatrix | None = None,
                     settings: AssemblySettings | None = None,
                     assembler: AlbedoAssembler | None = None) -> KernelDecomposition:
    """Split the albedo matrix into ballistic, once-scattered and remainder parts.

    The remainder is full - ballistic - single, taken from `full` when given
    (otherwise from the assembler's own full matrix).
    """
    asm = assembler or AlbedoAssembler(pair, domain, grid_in, grid_out, settings)
    n_out, n_in = grid_out.size, grid_in.size
    single = np.zeros((n_out, n_in))
    own_full = np.zeros((n_out, n_in))
    for cols in asm.column_blocks():
        blk = asm.block(cols)
        s, _ = _split_block(asm, blk)
        single[:, cols] = s
        own_full[:, cols] = blk.full
    base = own_full if full is None else full.values
    dec = KernelDecomposition(asm.exit_index.copy(), asm.strength.copy(), single, None,
                              None, grid_in, grid_out)
    dec.remainder = base - dec.ballistic_matrix() - single
    dec.cross = cross_weights(grid_in, grid_out) if domain.dimension == 2 else np.ones_like(single)
    return dec


def remainder_scaling(a0: float, k_values, domain: ConvexDomain, grid_in: BoundaryGrid,
                      grid_out: BoundaryGrid, settings: AssemblySettings | None = None):
    """Size of the remainder for constant pairs (a0, k0) and its log-log slope
    in k0.  The size is the sup of the |theta x theta'|-weighted remainder in
    2-D and its L1 operator norm in 3-D.  Returns (sizes, slope)."""
    from .fields import constant_pair
    sizes = []
    for k0 in k_values:
        dec = decompose_kernel(constant_pair(a0, k0, domain), domain, grid_in, grid_out,
                               settings=settings)
        if domain.dimension == 2:
            sizes.append(float(np.max(np.abs(dec.weighted_remainder))))
        else:
            sizes.append(op_norm(dec.remainder, "L1", grid_in.weights, grid_out.weights))
    sizes = np.array(sizes)
    slope = float(np.polyfit(np.log(np.asarray(k_values, float)), np.log(sizes), 1)[0])
    return sizes, slope


# ---------------------------------------------------------------------------
# streamed difference norms

@dataclass
class DifferenceNorms:
    l1: float
    ballistic_sup: float
    weighted_remainder_sup: float
    column_l1: np.ndarray

    @property
    def star(self) -> float:
        return max(self.ballistic_sup, self.weighted_remainder_sup)


def difference_norms(asm_a: AlbedoAssembler, asm_b: AlbedoAssembler,
                     threads: int | None = None) -> DifferenceNorms:
    """L1 operator norm of A - B and the two star-norm components, computed one
    column block at a time so that full matrices are never stored."""
    if asm_a.grid_in.size != asm_b.grid_in.size or asm_a.grid_out.size != asm_b.grid_out.size:
        raise ValueError("assemblers use different grids")
    w_out = asm_a.grid_out.weights
    n_in = asm_a.grid_in.size
    col_l1 = np.zeros(n_in)
    star_rem = [0.0]
    two_d = asm_a.domain.dimension == 2

    def work(cols):
        ba, bb = asm_a.block(cols), asm_b.block(cols)
        diff = ba.full - bb.full
        col_l1[cols] = w_out @ np.abs(diff)
        if two_d:
            _, ra = _split_block(asm_a, ba)
            _, rb = _split_block(asm_b, bb)
            cw = cross_weights(asm_a.grid_in, asm_a.grid_out, cols)
            return float(np.max(np.abs(cw * (ra - rb)), initial=0.0))
        return 0.0

    blocks = asm_a.column_blocks()
    n_thr = threads or asm_a.settings.threads
    if n_thr and n_thr > 1:
        with ThreadPoolExecutor(n_thr) as ex:
            vals = list(ex.map(work, blocks))
    else:
        vals = [work(c) for c in blocks]
    star_rem = max(vals, default=0.0)
    ball = float(np.max(np.abs(asm_a.strength - asm_b.strength), initial=0.0))
    return DifferenceNorms(float(col_l1.max(initial=0.0)), ball, star_rem, col_l1)


def star_norm_diff(pair_a: CoefficientPair, pair_b: CoefficientPair, domain: ConvexDomain,
                   grid_in: BoundaryGrid, grid_out: BoundaryGrid,
                   settings: AssemblySettings | None = None) -> float:
    """max( sup |A - A~| over ballistic strengths, sup |theta x theta'| |beta - beta~| )."""
    if domain.dimension != 2:
        raise UnsupportedModeError("the star norm is defined in 2-D only")
    a = AlbedoAssembler(pair_a, domain, grid_in, grid_out, settings)
    b = AlbedoAssembler(pair_b, domain, grid_in, grid_out, settings)
    return difference_norms(a, b).star


# ---------------------------------------------------------------------------
# independent once-scattered oracle

def second_iterate_column(pair: CoefficientPair, domain: ConvexDomain, grid_in: BoundaryGrid,
                          grid_out: BoundaryGrid, j: int, rows=None, n_s: int = 400,
                          n_dir: int = 64, h: float | None = None) -> np.ndarray:
    """Second Neumann term (M J f_j traced out) for the normalized indicator
    source f_j of incoming bin j, by direct quadrature along each outgoing ray
    over the scatter parameter s and the pre-scatter direction theta'.

    theta' is restricted to the direction range of bin j; the indicator is
    tested pointwise on the back-traced entry point, so the result is a cell
    average of the once-scattered kernel computed without the closed form.
    """
    if domain.dimension != 2:
        raise UnsupportedModeError("2-D only")
    target = grid_target(grid_in, domain)
    h = domain.R / 1000.0 if h is None else h
    rows = np.arange(grid_out.size) if rows is None else np.asarray(rows)
    da, ds = grid_in.meta["d_alpha"], grid_in.meta["d_s"]
    alpha_j, s_j = boundary_chart(grid_in, grid_in.points[j][None], grid_in.directions[j][None])
    phi_c = alpha_j[0] + np.pi + s_j[0]
    half = 0.5 * (da + ds)
    phis = phi_c + (np.arange(n_dir) + 0.5) / n_dir * 2 * half - half
    dphi = 2 * half / n_dir
    thp = unit_from_angle(phis)
    out = np.zeros(rows.size)
    wj = grid_in.weights[j]
    kc, kr = _support_ball(pair.k, domain)
    x, th = grid_out.points[rows], grid_out.directions[rows]
    lo, hi, hit = line_ball_interval(x, -th, kc, kr)
    tm, _ = travel_times(x, th, domain, target)
    lo, hi = np.clip(lo, 0.0, tm), np.clip(hi, 0.0, tm)
    live = np.nonzero(hit & (hi > lo))[0]
    for r_i in live:
        xr, tr = x[r_i], th[r_i]
        # depth from the exit point back to sigma by a cumulative midpoint rule
        pre = segment_quadrature(xr[None], tr[None], np.array([-lo[r_i]]), np.zeros(1),
                                 pair.a, domain, h)[0]
        nf = max(1, int(math.ceil((hi[r_i] - lo[r_i]) / h)))
        hf = (hi[r_i] - lo[r_i]) / nf
        sf = lo[r_i] + (np.arange(nf) + 0.5) * hf
        af = pair.a(xr[None] - sf[:, None] * tr[None], np.broadcast_to(tr, (nf, 2))) * hf
        cum = pre + np.concatenate([[0.0], np.cumsum(af)])
        dsv = (hi[r_i] - lo[r_i]) / n_s
        sv = lo[r_i] + (np.arange(n_s) + 0.5) * dsv
        d_out = np.interp(sv, lo[r_i] + np.arange(nf + 1) * hf, cum)
        y = xr[None] - sv[:, None] * tr[None]
        Y = np.repeat(y, n_dir, axis=0)
        T = np.tile(thp, (n_s, 1))
        tmy, _ = travel_times(Y, T, domain, target)
        xin = Y - tmy[:, None] * T
        inside = locate_bins(grid_in, xin, T) == j
        if not inside.any():
            continue
        d_in = segment_quadrature(xin[inside], T[inside], np.zeros(inside.sum()),
                                  tmy[inside], pair.a, domain, h)
        kv = pair.k(Y[inside], T[inside], np.broadcast_to(tr, T[inside].shape))
        val = kv * np.exp(-d_in - np.repeat(d_out, n_dir)[inside]) / wj
        out[r_i] = val.sum() * dsv * dphi / (2 * np.pi)
    return out


# ---------------------------------------------------------------------------
# probe sources

@dataclass
class ProbeSource:
    """Normalized bump (unit d xi-mass) on the incoming bins near (alpha0, s0)."""

    center: tuple
    eps: float
    values: np.ndarray
    grid: BoundaryGrid

    @property
    def mass(self) -> float:
        return float(np.sum(self.values * self.grid.weights))

    def pair_with(self, f) -> float:
        return float(np.sum(self.values * self.grid.weights * np.asarray(f)))

    @property
    def support(self) -> np.ndarray:
        return np.nonzero(self.values)[0]


def probe_source(x0, theta0, eps: float, grid: BoundaryGrid) -> ProbeSource:
    """phi_eps = |det chart Jacobian| / |n . theta'| times the normalized
    indicator of the eps-box around (x0, theta0) in chart coordinates, rescaled
    so that its discrete d xi-mass is exactly 1."""
    if grid.dimension != 2:
        raise UnsupportedModeError("probe sources are implemented in 2-D")
    cell = max(grid.meta["d_alpha"], grid.meta["d_s"])
    if eps < cell:
        raise ValueError(f"probe width {eps:.3g} below the grid resolution {cell:.3g}")
    a0, s0 = boundary_chart(grid, np.asarray(x0, float)[None], np.asarray(theta0, float)[None])
    a, s = boundary_chart(grid, grid.points, grid.directions)
    da = np.mod(a - a0[0] + np.pi, 2 * np.pi) - np.pi
    box = (np.abs(da) < eps) & (np.abs(s - s0[0]) < eps)
    raw = np.where(box, 2 * np.pi / (grid.radius * np.abs(np.cos(s))) / (2 * eps) ** 2, 0.0)
    mass = np.sum(raw * grid.weights)
    if mass <= 0:
        raise ValueError("probe support contains no bins")
    return ProbeSource((float(a0[0]), float(s0[0])), float(eps), raw / mass, grid)


def probe_ballistic(A: AlbedoMatrix, probe: ProbeSource, exit_index) -> float:
    """d xi-mass of A applied to the probe that lands in the ballistic exit
    bins of the probe's support."""
    g = A.apply(probe.values)
    bins = np.unique(np.asarray(exit_index)[probe.support])
    bins = bins[bins >= 0]
    return float(np.sum(A.grid_out.weights[bins] * g[bins]))


def probe_extraction(A: AlbedoMatrix, B: AlbedoMatrix, exit_index, bins, eps: float):
    """Ballistic attenuations extracted from two albedo matrices with probes
    of width eps centered on the given incoming bins.

    Returns (E_A, E_B) per probe; the extracted values approximate
    exp(-int a) along the probe's central line.
    """
    g = A.grid_in
    ea, eb = [], []
    for j in np.asarray(bins):
        pr = probe_source(g.points[j], g.directions[j], eps, g)
        ea.append(probe_ballistic(A, pr, exit_index))
        eb.append(probe_ballistic(B, pr, exit_index))
    return np.array(ea), np.array(eb)


# ---------------------------------------------------------------------------
# logarithmic bound ratio

def _gauss_panels(a, b, n_panels, order, grade_to=None, ratio=0.15):
    """Gauss-Legendre nodes on [a, b], geometrically graded toward one end."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    if b <= a:
        return np.zeros(0), np.zeros(0)
    if grade_to is None:
        edges = np.linspace(a, b, n_panels + 1)
    else:
        k = np.arange(n_panels + 1)
        g = ratio ** (n_panels - k)
        g[0] = 0.0
        if grade_to == "a":
            edges = a + (b - a) * g
        else:
            edges = b - (b - a) * g[::-1]
        edges = np.unique(np.concatenate([[a], edges, [b]]))
    lo, hi = edges[:-1], edges[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    weights = (half[:, None] * wg[None, :]).ravel()
    return nodes, weights


def _line_potential(z, xp, thp, l1, l2):
    """int_{l1}^{l2} dl / |z - (xp + l thp)| in closed form."""
    d = z - xp
    lz = np.sum(d * thp, axis=-1)
    perp = np.abs(cross2(thp, d))
    perp = np.maximum(perp, 1e-300)
    return np.arcsinh((l2 - lz) / perp) - np.arcsinh((l1 - lz) / perp)


def su_lhs(x, theta, xp, thetap, radius, n_panels=24, order=8):
    """int_0^inf chi(x - t theta) int_{line(x', theta')} chi(y)/|x - t theta - y| dl dt
    with chi the indicator of the origin-centered disk of the given radius."""
    x, theta, xp, thetap = (np.asarray(v, dtype=float) for v in (x, theta, xp, thetap))
    zero = np.zeros(2)
    l1, l2, hit_l = line_ball_interval(xp, thetap, zero, radius)
    t_lo, t_hi, hit_t = line_ball_interval(x, -theta, zero, radius)
    if not (hit_l and hit_t):
        return 0.0
    t_lo, t_hi = max(t_lo, 0.0), max(t_hi, 0.0)
    if t_hi <= t_lo:
        return 0.0
    # crossing of the ray with the line (log singularity of the inner integral)
    cr = cross2(theta, thetap)
    pieces = []
    if abs(cr) > 1e-14:
        d = xp - x
        tc = -cross2(d, thetap) / cr
        if t_lo < tc < t_hi:
            pieces = [(t_lo, tc, "b"), (tc, t_hi, "a")]
    if not pieces:
        pieces = [(t_lo, t_hi, None)]
    total = 0.0
    for a, b, g in pieces:
        t, w = _gauss_panels(a, b, n_panels, order, g)
        z = x[None] - t[:, None] * theta[None]
        total += float(np.sum(w * _line_potential(z, xp[None], thetap[None], l1, l2)))
    return total


@dataclass
class SuBoundResult:
    max_ratio: float
    table: np.ndarray  # columns: lhs, |theta x theta'|, ratio


def su_bound_ratio(domain: ConvexDomain, samples, n_panels: int = 24, order: int = 8,
                   radius: float | None = None) -> SuBoundResult:
    """Max over samples (x, theta, x', theta') of LHS / (1 - ln |theta' x theta|)."""
    if domain.dimension != 2:
        raise UnsupportedModeError("2-D only")
    radius = domain.R if radius is None else radius
    rows = []
    for x, th, xp, thp in samples:
        lhs = su_lhs(x, th, xp, thp, radius, n_panels, order)
        c = abs(float(cross2(np.asarray(thp, float), np.asarray(th, float))))
        denom = 1.0 - math.log(c) if c > 0 else math.inf
        rows.append((lhs, c, lhs / denom))
    table = np.asarray(rows, dtype=float).reshape(-1, 3)
    return SuBoundResult(float(table[:, 2].max(initial=0.0)), table)


def sample_su_events(rng, n: int, radius: float):
    """Random (x, theta, x', theta') with x, x' uniform in the disk."""
    from .geometry import sample_ball, sample_unit_vectors
    x = sample_ball(rng, n, np.zeros(2), radius)
    xp = sample_ball(rng, n, np.zeros(2), radius)
    th = sample_unit_vectors(rng, n, 2)
    thp = sample_unit_vectors(rng, n, 2)
    return list(zip(x, th, xp, thp))
