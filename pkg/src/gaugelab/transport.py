"""Forward transport: attenuation integrals, the operators J, K, M and the
Neumann-series solve on a polar phase-space grid (2-D), plus the explicit
ballistic and once-scattered quantities (any dimension).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .fields import CoefficientPair, check_subcritical
from .geometry import (BoundaryGrid, ConvexDomain, chord_quadrature, line_ball_interval,
                       segment_quadrature, travel_times, unit_from_angle)


class SubcriticalError(RuntimeError):
    """Raised when a solve is requested for coefficients failing subcriticality."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def _default_step(domain: ConvexDomain, h):
    return domain.R / 1000.0 if h is None else float(h)


# ---------------------------------------------------------------------------
# line integrals

def attenuation_E(y, x, a, domain: ConvexDomain, h: float | None = None):
    """E(y, x) = exp(-int a along the segment from y to x, direction x - y)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x - y
    length = np.linalg.norm(d, axis=-1)
    safe = np.where(length > 0, length, 1.0)
    theta = d / safe[:, None]
    theta[length == 0] = 0.0
    theta[length == 0, 0] = 1.0
    depth = segment_quadrature(y, theta, np.zeros_like(length), length, a, domain,
                               _default_step(domain, h))
    return np.exp(-depth)


def ballistic_A(x_in, theta_in, a, domain: ConvexDomain, h: float | None = None):
    """Ballistic strength exp(-int_0^{tau+} a(x' + t theta', theta') dt)."""
    return np.exp(-chord_quadrature(x_in, theta_in, domain, a, "forward",
                                    _default_step(domain, h)))


@dataclass
class ScatterEvent:
    """Entry (x', theta'), scatter parameter t and outgoing direction theta."""

    x_in: np.ndarray
    theta_in: np.ndarray
    t: np.ndarray
    theta: np.ndarray

    @property
    def scatter_point(self):
        return np.asarray(self.x_in) + np.asarray(self.t)[..., None] * np.asarray(self.theta_in)


def single_scatter_F(ev: ScatterEvent, a, domain: ConvexDomain, h: float | None = None):
    """Broken-path attenuation F and exit point x+ for once-scattered events."""
    h = _default_step(domain, h)
    x_in = np.atleast_2d(ev.x_in)
    th_in = np.atleast_2d(ev.theta_in)
    th = np.atleast_2d(ev.theta)
    t = np.atleast_1d(np.asarray(ev.t, dtype=float))
    y = x_in + t[:, None] * th_in
    d1 = segment_quadrature(x_in, th_in, np.zeros_like(t), t, a, domain, h)
    _, tp = travel_times(y, th, domain)
    d2 = segment_quadrature(y, th, np.zeros_like(t), tp, a, domain, h)
    x_plus = y + tp[:, None] * th
    return np.exp(-d1 - d2), x_plus


# ---------------------------------------------------------------------------
# polar phase-space grid

@dataclass
class PolarGrid:
    """Origin-centered polar node grid: a center node plus n_r rings of n_phi nodes."""

    radius: float
    n_r: int
    n_phi: int

    def __post_init__(self):
        if self.n_r < 1 or self.n_phi < 3 or not self.radius > 0:
            raise ValueError("polar grid needs n_r >= 1, n_phi >= 3, radius > 0")

    @property
    def dr(self) -> float:
        return self.radius / self.n_r

    @property
    def size(self) -> int:
        return 1 + self.n_r * self.n_phi

    @property
    def nodes(self) -> np.ndarray:
        r = np.repeat(np.arange(1, self.n_r + 1) * self.dr, self.n_phi)
        ph = np.tile(np.arange(self.n_phi) * 2 * np.pi / self.n_phi, self.n_r)
        pts = r[:, None] * unit_from_angle(ph)
        return np.vstack([np.zeros((1, 2)), pts])

    @property
    def lumped_areas(self) -> np.ndarray:
        """Integrals of the nodal interpolation hats (sum = pi radius^2)."""
        dr, dphi = self.dr, 2 * np.pi / self.n_phi
        a = np.empty(self.size)
        a[0] = np.pi * dr * dr / 3.0
        r = np.arange(1, self.n_r + 1) * dr
        ring = dphi * r * dr
        ring[-1] = dphi * dr * (r[-1] / 2.0 - dr / 6.0)
        if self.n_r == 1:
            ring[-1] = dphi * dr * dr / 3.0
        a[1:] = np.repeat(ring, self.n_phi)
        return a

    def weights(self, pts):
        pts = np.asarray(pts, dtype=float)
        return kernels.polar_weights(pts[:, 0], pts[:, 1], self.dr, self.n_r, self.n_phi)

    def interpolate(self, values, pts):
        """Bilinear (radius, angle) interpolation of nodal values; zero outside."""
        idx, w = self.weights(pts)
        values = np.asarray(values)
        if values.ndim == 1:
            return np.sum(values[idx] * w, axis=1)
        return np.einsum("sc,sc...->s...", w, values[idx])


@dataclass
class PhaseGrid:
    """Polar spatial nodes times uniform absolute direction bins."""

    space: PolarGrid
    n_dir: int

    @property
    def directions(self) -> np.ndarray:
        return unit_from_angle((np.arange(self.n_dir) + 0.5) * 2 * np.pi / self.n_dir)

    @property
    def shape(self):
        return (self.space.size, self.n_dir)


@dataclass
class PhaseField:
    """Values of u(x, theta) at polar nodes times direction bins."""

    grid: PhaseGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"expected shape {self.grid.shape}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("phase field values must be finite")

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def phase_grid_for(domain: ConvexDomain, n_r: int, n_phi: int, n_dir: int,
                   support: str = "omega") -> PhaseGrid:
    rad = domain.support_radius if support == "omega" else domain.R
    if rad <= 0:
        rad = domain.R
    return PhaseGrid(PolarGrid(rad, n_r, n_phi), n_dir)


# ---------------------------------------------------------------------------
# ray marching on the polar grid

def iter_ray_samples(origins, dirs, a, domain: ConvexDomain, space: PolarGrid, step: float,
                     sign: float = -1.0, h_quad: float | None = None, chunk: int = 3_000_000):
    """Midpoint samples along rays o + sign t theta inside the polar grid disk.

    Yields (owner, pts, weight) per chunk where weight = step * E, E being the
    attenuation accumulated between the origin and the sample along the
    direction of travel.  For sign=-1 the travel direction is theta (sample
    to origin); for sign=+1 it is theta as well (origin to sample).
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    m = origins.shape[0]
    t_lo, t_hi, hit = line_ball_interval(origins, sign * dirs, np.zeros(2), space.radius)
    t_lo = np.maximum(t_lo, 0.0)
    t_hi = np.where(hit, np.maximum(t_hi, 0.0), 0.0)
    length = np.maximum(t_hi - t_lo, 0.0)
    n = np.where(length > 0, np.ceil(length / step - 1e-12), 0).astype(np.int64)
    hq = _default_step(domain, h_quad)
    # attenuation from the origin to the grid disk entry (zero when inside)
    pre = np.zeros(m)
    outside = t_lo > 0
    if np.any(outside):
        if sign < 0:
            pre[outside] = segment_quadrature(origins[outside], dirs[outside], -t_lo[outside],
                                              np.zeros(outside.sum()), a, domain, hq)
        else:
            pre[outside] = segment_quadrature(origins[outside], dirs[outside],
                                              np.zeros(outside.sum()), t_lo[outside], a,
                                              domain, hq)
    per = max(1, int(np.max(n, initial=1)))
    rows = max(1, chunk // per)
    for s0 in range(0, m, rows):
        sl = slice(s0, min(m, s0 + rows))
        nn = n[sl]
        tot = int(nn.sum())
        if tot == 0:
            continue
        owner_local = np.repeat(np.arange(nn.size), nn)
        start = np.cumsum(nn) - nn
        kk = np.arange(tot) - start[owner_local]
        h = np.where(nn > 0, length[sl] / np.maximum(nn, 1), 0.0)
        hs = h[owner_local]
        t = t_lo[sl][owner_local] + (kk + 0.5) * hs
        o = origins[sl][owner_local]
        th = dirs[sl][owner_local]
        pts = o + sign * t[:, None] * th
        av = np.asarray(a(pts, th), dtype=float) * hs
        csum = np.cumsum(av)
        base = (csum - av)[np.minimum(start, tot - 1)]
        depth = pre[sl][owner_local] + (csum - av) - base[owner_local] + 0.5 * av
        yield owner_local + s0, pts, hs * np.exp(-depth)


def march_matrix(origins, dirs, a, domain, space: PolarGrid, step, sign=-1.0, row_scale=None,
                 dense=True, h_quad=None):
    """Rows: int E * interp(o + sign t theta) dt over the ray (times row_scale)."""
    m = origins.shape[0]
    if dense:
        out = np.zeros((m, space.size))
    else:
        rows_l, cols_l, vals_l = [], [], []
    for owner, pts, wgt in iter_ray_samples(origins, dirs, a, domain, space, step, sign,
                                            h_quad=h_quad):
        if row_scale is not None:
            wgt = wgt * row_scale[owner]
        idx, w = space.weights(pts)
        if dense:
            kernels.accumulate(owner, wgt, idx, w, out)
        else:
            rows_l.append(np.repeat(owner, 4))
            cols_l.append(idx.ravel())
            vals_l.append((wgt[:, None] * w).ravel())
    if dense:
        return out
    if not rows_l:
        return sp.csr_matrix((m, space.size))
    return sp.csr_matrix((np.concatenate(vals_l), (np.concatenate(rows_l),
                                                   np.concatenate(cols_l))),
                         shape=(m, space.size))


# ---------------------------------------------------------------------------
# boundary data

@dataclass
class BoundaryData:
    """Values on the bins of a 2-D boundary grid, read by nearest-bin lookup."""

    grid: BoundaryGrid
    values: np.ndarray

    def __call__(self, x, theta):
        from .geometry import locate_bins
        idx = locate_bins(self.grid, x, theta)
        out = np.where(idx >= 0, np.asarray(self.values)[np.maximum(idx, 0)], 0.0)
        return out


def _eval_boundary(f, x, theta):
    if np.isscalar(f):
        return np.full(x.shape[0], float(f))
    return np.asarray(f(x, theta), dtype=float)


# ---------------------------------------------------------------------------
# operators J, K, M

@dataclass
class TransportOperator:
    """Cached discretization of J, K and M for one pair on one phase grid."""

    pair: CoefficientPair
    domain: ConvexDomain
    grid: PhaseGrid
    step: float
    h_quad: float
    _L: list = field(default_factory=list, repr=False)
    _K: np.ndarray | None = field(default=None, repr=False)

    @property
    def isotropic(self) -> bool:
        return bool(getattr(self.pair.k, "isotropic", False))

    def ray_operators(self):
        if not self._L:
            space = self.grid.space
            nodes = space.nodes
            for th in self.grid.directions:
                dirs = np.broadcast_to(th, nodes.shape)
                self._L.append(march_matrix(nodes, dirs, self.pair.a, self.domain, space,
                                            self.step, -1.0, dense=False,
                                            h_quad=self.h_quad))
        return self._L

    def kernel_tensor(self):
        """k(x_n, theta_l', theta_l) / n_dir with shape (N, n_dir_in, n_dir_out)."""
        if self._K is None:
            nodes = self.grid.space.nodes
            dirs = self.grid.directions
            q = len(dirs)
            X = np.repeat(nodes, q * q, axis=0)
            Ti = np.tile(np.repeat(dirs, q, axis=0), (len(nodes), 1))
            To = np.tile(np.tile(dirs, (q, 1)), (len(nodes), 1))
            self._K = self.pair.k(X, Ti, To).reshape(len(nodes), q, q) / q
        return self._K

    def K(self, u: np.ndarray) -> np.ndarray:
        if self.isotropic:
            dens = self.pair.k.density(self.grid.space.nodes)
            return np.repeat((dens * u.mean(axis=1))[:, None], u.shape[1], axis=1)
        return np.einsum("nij,ni->nj", self.kernel_tensor(), u)

    def L(self, q: np.ndarray) -> np.ndarray:
        ops = self.ray_operators()
        return np.stack([ops[l] @ q[:, l] for l in range(q.shape[1])], axis=1)

    def M(self, u: np.ndarray) -> np.ndarray:
        return self.L(self.K(u))


def make_operator(pair, domain, grid: PhaseGrid, step=None, h=None) -> TransportOperator:
    if step is None:
        step = grid.space.dr / 2.0
    return TransportOperator(pair, domain, grid, float(step), _default_step(domain, h))


def apply_J(f_minus, pair: CoefficientPair, domain: ConvexDomain, grid: PhaseGrid,
            h: float | None = None) -> PhaseField:
    """(J f)(x, theta) = E(x - tau_minus theta, x) f(x - tau_minus theta, theta)."""
    nodes = grid.space.nodes
    dirs = grid.directions
    X = np.repeat(nodes, len(dirs), axis=0)
    T = np.tile(dirs, (len(nodes), 1))
    tm, _ = travel_times(X, T, domain)
    x_in = X - tm[:, None] * T
    depth = chord_quadrature(X, T, domain, pair.a, "backward", _default_step(domain, h))
    vals = np.exp(-depth) * _eval_boundary(f_minus, x_in, T)
    return PhaseField(grid, vals.reshape(grid.shape))


def apply_K(u: PhaseField, k, op: TransportOperator | None = None) -> PhaseField:
    """(K u)(x, theta) = int k(x, theta', theta) u(x, theta') d theta' (normalized)."""
    g = u.grid
    if op is None:
        nodes = g.space.nodes
        dirs = g.directions
        q = len(dirs)
        if getattr(k, "isotropic", False):
            dens = k.density(nodes)
            vals = np.repeat((dens * u.values.mean(axis=1))[:, None], q, axis=1)
            return PhaseField(g, vals)
        X = np.repeat(nodes, q * q, axis=0)
        Ti = np.tile(np.repeat(dirs, q, axis=0), (len(nodes), 1))
        To = np.tile(np.tile(dirs, (q, 1)), (len(nodes), 1))
        kt = k(X, Ti, To).reshape(len(nodes), q, q) / q
        return PhaseField(g, np.einsum("nij,ni->nj", kt, u.values))
    return PhaseField(g, op.K(u.values))


def apply_M(u: PhaseField, pair: CoefficientPair, domain: ConvexDomain,
            op: TransportOperator | None = None) -> PhaseField:
    """(M u)(x, theta) = int_0^{tau_minus} E(x - t theta, x) (K u)(x - t theta, theta) dt."""
    if op is None:
        op = make_operator(pair, domain, u.grid)
    return PhaseField(u.grid, op.M(u.values))


@dataclass
class TransportSolution:
    u: PhaseField
    iterations: int
    residual: float
    ratios: list
    source: PhaseField
    operator: TransportOperator = field(repr=False)

    @property
    def measured_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0


def require_subcritical(pair: CoefficientPair, domain: ConvexDomain):
    if domain.dimension == 2:
        res = check_subcritical(pair, domain, "TWO_D")
        if not res.passed:
            raise SubcriticalError(
                f"subcritical violated: R*||k||_inf must be < 1/2 (margin {res.margin:.3g})")
        return res
    cs = check_subcritical(pair, domain, "CS")
    if cs.passed:
        return cs
    dl = check_subcritical(pair, domain, "DL")
    if dl.passed:
        return dl
    raise SubcriticalError("subcritical violated: neither CS nor DL condition holds")


def solve_transport(f_minus, pair: CoefficientPair, domain: ConvexDomain, grid: PhaseGrid,
                    tol: float = 1e-10, max_iter: int = 200, step: float | None = None,
                    h: float | None = None, op: TransportOperator | None = None
                    ) -> TransportSolution:
    """Neumann iteration u <- J f + M u on the polar phase grid (2-D)."""
    if domain.dimension != 2:
        raise NotImplementedError("interior solves are provided in 2-D only")
    require_subcritical(pair, domain)
    if op is None:
        op = make_operator(pair, domain, grid, step, h)
    jf = apply_J(f_minus, pair, domain, grid, h)
    u = jf.values.copy()
    ratios = []
    prev = None
    for it in range(1, max_iter + 1):
        new = jf.values + op.M(u)
        res = float(np.max(np.abs(new - u)))
        if prev is not None and prev > 0:
            ratios.append(res / prev)
        prev = res
        u = new
        if res <= tol:
            return TransportSolution(PhaseField(grid, u), it, res, ratios, jf, op)
    raise NonConvergenceError(f"no convergence after {max_iter} iterations", prev)


def trace_outgoing(sol: TransportSolution, f_minus, grid_out: BoundaryGrid,
                   h: float | None = None) -> np.ndarray:
    """gamma[u] on outgoing bins: J f plus M u, both evaluated by backtrace from
    the boundary point (u itself is never interpolated at the boundary)."""
    op = sol.operator
    pair, domain = op.pair, op.domain
    x, th = grid_out.points, grid_out.directions
    tm, _ = travel_times(x, th, domain)
    x_in = x - tm[:, None] * th
    depth = chord_quadrature(x, th, domain, pair.a, "backward", _default_step(domain, h))
    out = np.exp(-depth) * _eval_boundary(f_minus, x_in, th)
    space = op.grid.space
    G = march_matrix(x, th, pair.a, domain, space, op.step, -1.0, dense=False,
                     h_quad=op.h_quad)
    u = sol.u.values
    if op.isotropic:
        src = pair.k.density(space.nodes) * u.mean(axis=1)
        return out + G @ src
    nodes = space.nodes
    dirs = op.grid.directions
    q = len(dirs)
    for i in range(len(x)):
        X = np.repeat(nodes, q, axis=0)
        Ti = np.tile(dirs, (len(nodes), 1))
        To = np.broadcast_to(th[i], Ti.shape)
        kv = pair.k(X, Ti, To).reshape(len(nodes), q)
        src = np.sum(kv * u, axis=1) / q
        out[i] += G[i] @ src
    return out


def contraction_bound(pair: CoefficientPair, domain: ConvexDomain) -> float:
    from .fields import norms
    return 2.0 * domain.R * norms(pair, "k_inf")


def measured_contraction(pair: CoefficientPair, domain: ConvexDomain, grid: PhaseGrid,
                         op: TransportOperator | None = None, rng=None, n_random: int = 0):
    """sup-norm of M: for the positive operator M this is sup (M 1).

    Random fields are also tried and the largest ratio sup|Mu|/sup|u| returned.
    """
    if op is None:
        op = make_operator(pair, domain, grid)
    ones = np.ones(grid.shape)
    best = float(np.max(np.abs(op.M(ones))))
    if rng is not None:
        for _ in range(n_random):
            u = rng.uniform(-1, 1, grid.shape)
            best = max(best, float(np.max(np.abs(op.M(u))) / np.max(np.abs(u))))
    return best
