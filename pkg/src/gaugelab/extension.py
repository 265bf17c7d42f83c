"""Zero extension to the outer ball and the transportation maps between the
boundary phase spaces of Omega and of B_R.

Incoming data on the outer sphere is pulled back to the boundary of Omega by
following straight lines (T); outgoing data on the boundary of Omega is pushed
forward to the outer sphere (T tilde).  Lines through B_R that miss Omega form
the complement, on which the lifted albedo operator is a pure shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .albedo import (AlbedoAssembler, AlbedoMatrix, AssemblySettings, KernelDecomposition,
                     decompose_kernel, difference_norms, op_norm)
from .fields import CoefficientPair
from .geometry import (BoundaryGrid, ConvexDomain, boundary_chart, build_boundary_grid,
                       line_ball_interval, locate_bins, segment_quadrature, travel_times)


class ProjectionError(ValueError):
    """Boundary grids too coarse (or mismatched) to align by line continuation."""


@dataclass
class _SideMap:
    to_outer: np.ndarray  # Omega bin -> outer bin reached by continuing its center line
    to_inner: np.ndarray  # outer bin -> Omega bin hit by its center line, -1 if it misses
    transported: np.ndarray  # outer-bin weights induced by the Omega bins (push-forward)
    landing: np.ndarray  # chart error of the continued Omega centers, in outer-bin widths


@dataclass
class BoundaryProjection:
    """Bin correspondences between Gamma_(+-) on the boundary of Omega and the
    outer sphere, obtained by continuing bin-center lines."""

    domain: ConvexDomain
    omega_in: BoundaryGrid
    omega_out: BoundaryGrid
    outer_in: BoundaryGrid
    outer_out: BoundaryGrid
    incoming: _SideMap
    outgoing: _SideMap

    def side(self, orientation: str) -> _SideMap:
        return self.incoming if orientation == "incoming" else self.outgoing

    def complement(self, orientation: str = "incoming") -> np.ndarray:
        """Outer bins whose center lines miss Omega."""
        return np.nonzero(self.side(orientation).to_inner < 0)[0]

    def image(self, orientation: str = "incoming") -> np.ndarray:
        """Outer bins whose center lines cross Omega (the discrete Gamma tilde)."""
        return np.nonzero(self.side(orientation).to_inner >= 0)[0]

    def complement_lengths(self, orientation: str = "incoming") -> np.ndarray:
        """Omega-intersection lengths of the complement center lines (all zero)."""
        g = self.outer_in if orientation == "incoming" else self.outer_out
        idx = self.complement(orientation)
        t0, t1, hit = line_ball_interval(g.points[idx], g.directions[idx],
                                         self.domain.center, self.domain.omega_radius)
        return np.where(hit, t1 - t0, 0.0)

    def norm_outer(self, f, orientation: str = "incoming", p: float = 1) -> float:
        """L^p norm of outer data on Gamma tilde with the transported measure."""
        w = self.side(orientation).transported
        f = np.asarray(f, dtype=float)
        if np.isinf(p):
            return float(np.max(np.abs(f[w > 0]), initial=0.0))
        return float(np.sum(w * np.abs(f) ** p) ** (1.0 / p))


def _outer_chart_error(grid: BoundaryGrid, x, theta, idx):
    """Chart distance from (x, theta) to the center of bin idx, in bin widths."""
    if grid.dimension != 2:
        # 3-D: angular distance of positions and directions in cell units
        dp = np.arccos(np.clip(np.sum((x - grid.center) / grid.radius * grid.normals[idx], -1),
                               -1, 1)) / (np.pi / grid.n_b)
        dd = np.arccos(np.clip(np.sum(theta * grid.directions[idx], -1), -1, 1)) / grid.meta["d_pol"]
        return np.maximum(dp, dd)
    a, s = boundary_chart(grid, x, theta)
    ac, sc = boundary_chart(grid, grid.points[idx], grid.directions[idx])
    da = np.abs(np.mod(a - ac + np.pi, 2 * np.pi) - np.pi) / grid.meta["d_alpha"]
    ds = np.abs(s - sc) / grid.meta["d_s"]
    return np.maximum(da, ds)


def _grazing(domain, omega_grid, outer_grid):
    """Omega bins whose center line passes within one outer direction cell (in
    transverse distance) of tangency; no outer grid resolves these."""
    d = omega_grid.points - domain.center
    th = omega_grid.directions
    p2 = np.sum(d * d, -1) - np.sum(d * th, -1) ** 2
    cell = outer_grid.meta["d_s"] if outer_grid.dimension == 2 else outer_grid.meta["d_pol"]
    return domain.omega_radius - np.sqrt(np.maximum(p2, 0.0)) < domain.R * cell


def _side_map(domain, omega_grid, outer_grid, max_round_trip: int, max_grazing: float):
    sign = -1.0 if omega_grid.orientation == "incoming" else 1.0
    # Omega bins -> outer sphere
    tm, tp = travel_times(omega_grid.points, omega_grid.directions, domain, "outer")
    t = tm if sign < 0 else tp
    landed = omega_grid.points + sign * t[:, None] * omega_grid.directions
    to_outer = locate_bins(outer_grid, landed, omega_grid.directions)
    if np.any(to_outer < 0):
        raise ProjectionError("continued Omega bins fall outside the outer grid")
    landing = _outer_chart_error(outer_grid, landed, omega_grid.directions, to_outer)
    # outer bins -> Omega
    t0, t1, hit = line_ball_interval(outer_grid.points, outer_grid.directions,
                                     domain.center, domain.omega_radius)
    hit &= t1 - t0 > 0
    t_hit = t0 if sign < 0 else t1
    y = outer_grid.points + t_hit[:, None] * outer_grid.directions
    to_inner = np.full(outer_grid.size, -1, dtype=np.int64)
    if np.any(hit):
        to_inner[hit] = locate_bins(omega_grid, y[hit], outer_grid.directions[hit])
    # alignment: the round trip Omega -> outer -> Omega must come back within
    # max_round_trip bins in each chart coordinate
    back = to_inner[to_outer]
    graze = _grazing(domain, omega_grid, outer_grid)
    frac = omega_grid.weights[graze].sum() / omega_grid.total_mass
    if frac > max_grazing:
        raise ProjectionError(f"outer grid too coarse: {frac:.0%} of the Omega boundary mass "
                              "is within one outer direction cell of tangency")
    live = (omega_grid.weights > 0) & ~graze
    if np.any(back[live] < 0):
        raise ProjectionError("outer grid too coarse: continued Omega bins miss Omega on return")
    back = np.where(live, back, 0)
    pos_err = np.abs(omega_grid.pos_index[back] - omega_grid.pos_index)
    n_pos = int(omega_grid.pos_index.max()) + 1
    pos_err = np.minimum(pos_err, n_pos - pos_err)
    dir_err = np.abs(omega_grid.dir_index[back] - omega_grid.dir_index)
    bad = live & ((pos_err > max_round_trip) | (dir_err > max_round_trip))
    if np.any(bad):
        raise ProjectionError(
            f"grids too coarse to align: {int(bad.sum())} Omega bins return more than "
            f"{max_round_trip} bin(s) away after continuation to the outer sphere")
    transported = np.bincount(to_outer, weights=omega_grid.weights, minlength=outer_grid.size)
    return _SideMap(to_outer, to_inner, transported, landing)


def build_projection(domain: ConvexDomain, omega_in: BoundaryGrid, omega_out: BoundaryGrid,
                     outer_in: BoundaryGrid, outer_out: BoundaryGrid,
                     max_round_trip: int = 1, max_grazing: float = 0.25) -> BoundaryProjection:
    """Match bins of independently built Omega and outer-sphere grids.

    Every Omega bin center is continued to the outer sphere and located there;
    the outer bin center is then traced back to Omega.  The projection is
    refused when this round trip lands more than `max_round_trip` bins away
    from where it started, i.e. when the outer grid cannot resolve the Omega
    grid.  Grazing bins, whose center lines pass within one outer direction
    cell of tangency, are exempt from the round-trip test as long as they carry
    at most `max_grazing` of the boundary mass.
    """
    for g, o in ((omega_in, "incoming"), (outer_in, "incoming"),
                 (omega_out, "outgoing"), (outer_out, "outgoing")):
        if g.orientation != o:
            raise ProjectionError(f"expected an {o} grid")
    return BoundaryProjection(domain, omega_in, omega_out, outer_in, outer_out,
                              _side_map(domain, omega_in, outer_in, max_round_trip, max_grazing),
                              _side_map(domain, omega_out, outer_out, max_round_trip,
                                        max_grazing))


def projection_grids(domain: ConvexDomain, n_omega: int, n_outer: int,
                     n_theta_omega: int | None = None, n_theta_outer: int | None = None,
                     max_round_trip: int = 1) -> BoundaryProjection:
    """Build the four boundary grids and their projection."""
    nto = n_theta_omega or n_omega
    ntr = n_theta_outer or n_outer
    return build_projection(
        domain,
        build_boundary_grid(domain, "omega", "incoming", n_omega, nto),
        build_boundary_grid(domain, "omega", "outgoing", n_omega, nto),
        build_boundary_grid(domain, "ball", "incoming", n_outer, ntr),
        build_boundary_grid(domain, "ball", "outgoing", n_outer, ntr),
        max_round_trip)


def pullback_T(f, proj: BoundaryProjection) -> np.ndarray:
    """[T f](x', theta') = f(x' - tau_minus(x', theta') theta', theta').

    f is either per-bin data on the outer incoming grid or a callable
    f(x, theta); the result is per-bin data on the Omega incoming grid.
    """
    g = proj.omega_in
    if callable(f):
        tm, _ = travel_times(g.points, g.directions, proj.domain, "outer")
        return np.asarray(f(g.points - tm[:, None] * g.directions, g.directions), dtype=float)
    f = np.asarray(f, dtype=float)
    if f.shape[0] != proj.outer_in.size:
        raise ValueError("data does not live on the outer incoming grid")
    return f[proj.incoming.to_outer]


def pushforward_Ttilde(g, proj: BoundaryProjection) -> np.ndarray:
    """Forward continuation of outgoing data from Omega to the outer sphere.

    Per-bin data is moved to the outer bin reached by each Omega bin center
    (averaged with the Omega weights when several bins land together), so the
    L1 norm with the transported measure is preserved.  A callable g(x, theta)
    is instead sampled at the Omega exit of each outer bin center line; outer
    bins missing Omega get 0.
    """
    side = proj.outgoing
    if callable(g):
        G = proj.outer_out
        out = np.zeros(G.size)
        idx = np.nonzero(side.to_inner >= 0)[0]
        t0, t1, _ = line_ball_interval(G.points[idx], G.directions[idx], proj.domain.center,
                                       proj.domain.omega_radius)
        y = G.points[idx] + t1[:, None] * G.directions[idx]
        out[idx] = np.asarray(g(y, G.directions[idx]), dtype=float)
        return out
    g = np.asarray(g, dtype=float)
    if g.shape[0] != proj.omega_out.size:
        raise ValueError("data does not live on the Omega outgoing grid")
    w = proj.omega_out.weights
    num = np.bincount(side.to_outer, weights=w * g, minlength=proj.outer_out.size)
    return np.divide(num, side.transported, out=np.zeros_like(num), where=side.transported > 0)


def _outer_exit(proj: BoundaryProjection):
    G = proj.outer_in
    _, tp = travel_times(G.points, G.directions, proj.domain, "outer")
    return locate_bins(proj.outer_out, G.points + tp[:, None] * G.directions, G.directions)


def _ballistic_split(A: AlbedoMatrix, domain: ConvexDomain):
    """Ballistic strength and scattered part of an albedo matrix on Omega grids,
    reading the strength from the exit bin of each center line."""
    g = A.grid_in
    _, tp = travel_times(g.points, g.directions, domain, "inner")
    e = locate_bins(A.grid_out, g.points + tp[:, None] * g.directions, g.directions)
    scattered = A.values.copy()
    strength = np.zeros(g.size)
    ok = np.nonzero(e >= 0)[0]
    strength[ok] = scattered[e[ok], ok] * A.grid_out.weights[e[ok]]
    scattered[e[ok], ok] = 0.0
    return strength, scattered


def lifted_albedo(A_omega, proj: BoundaryProjection) -> AlbedoMatrix:
    """Albedo operator on the outer sphere built from the one on Omega.

    Lines crossing Omega carry T tilde A T: the scattered part is sampled at
    the Omega bins hit by the outer bin centers and the ballistic strength is
    placed in the outer exit bin.  Lines missing Omega carry the pure shift.
    A_omega is a KernelDecomposition (exact split) or an AlbedoMatrix, whose
    ballistic strength is read from the exit bin.
    """
    if isinstance(A_omega, KernelDecomposition):
        strength = A_omega.strength
        scattered = A_omega.single + A_omega.remainder
    else:
        strength, scattered = _ballistic_split(A_omega, proj.domain)
    G_in, G_out = proj.outer_in, proj.outer_out
    if scattered.shape != (proj.omega_out.size, proj.omega_in.size):
        raise ValueError("matrix does not live on the projection's Omega grids")
    rin = proj.incoming.to_inner
    rout = proj.outgoing.to_inner
    vals = np.zeros((G_out.size, G_in.size))
    cin = np.nonzero(rin >= 0)[0]
    cout = np.nonzero(rout >= 0)[0]
    vals[np.ix_(cout, cin)] = scattered[np.ix_(rout[cout], rin[cin])]
    e = _outer_exit(proj)
    s = np.where(rin >= 0, strength[np.maximum(rin, 0)], 1.0)
    ok = np.nonzero(e >= 0)[0]
    vals[e[ok], ok] += s[ok] / G_out.weights[e[ok]]
    return AlbedoMatrix(vals, G_in, G_out, {"lifted": True})


@dataclass
class IsometryReport:
    mode: str
    norm_omega: float
    norm_outer: float
    gap: float
    tolerance: float | None = None
    strength_gap: float | None = None
    extra: dict | None = None

    @property
    def passed(self) -> bool:
        ok = self.tolerance is None or self.gap <= self.tolerance
        if self.strength_gap is not None:
            ok = ok and self.strength_gap <= 1e-10
        return bool(ok)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "norm_omega": self.norm_omega, "norm_outer": self.norm_outer,
                "gap": self.gap, "tolerance": self.tolerance, "strength_gap": self.strength_gap,
                "passed": self.passed, **(self.extra or {})}


def transported_strength_gap(pair_a: CoefficientPair, pair_b: CoefficientPair,
                             proj: BoundaryProjection, asm_outer_a: AlbedoAssembler,
                             asm_outer_b: AlbedoAssembler, h: float) -> float:
    """Bin-wise check that ballistic strengths on outer bins equal those of the
    same lines integrated from their Omega entry (attenuation vanishes outside
    Omega), and that lines missing Omega have strength 1.  Returns the largest
    discrepancy."""
    G = proj.outer_in
    idx = proj.image("incoming")
    t0, t1, _ = line_ball_interval(G.points[idx], G.directions[idx], proj.domain.center,
                                   proj.domain.omega_radius)
    y = G.points[idx] + t0[:, None] * G.directions[idx]
    L = t1 - t0
    out = 0.0
    for p, asm in ((pair_a, asm_outer_a), (pair_b, asm_outer_b)):
        inner = np.exp(-segment_quadrature(y, G.directions[idx], np.zeros_like(L), L, p.a,
                                           proj.domain, h))
        out = max(out, float(np.max(np.abs(asm.strength[idx] - inner), initial=0.0)))
    comp = proj.complement("incoming")
    if comp.size:
        out = max(out, float(np.max(np.abs(asm_outer_a.strength[comp] - 1.0))),
                  float(np.max(np.abs(asm_outer_b.strength[comp] - 1.0))))
    return out


def isometry_check(pair_a: CoefficientPair, pair_b: CoefficientPair, domain: ConvexDomain,
                   grids: BoundaryProjection, mode: str = "L1",
                   settings: AssemblySettings | None = None, tolerance: float | None = None,
                   threads: int | None = None) -> IsometryReport:
    """Compare the albedo difference norm computed on the Omega grids with the
    one computed on the outer grids (zero-extended coefficients).

    mode "L1" compares L1 operator norms; mode "star" (2-D) compares star norms
    and also checks the transported ballistic strengths bin-wise.
    """
    if mode not in ("L1", "star"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "star" and domain.dimension != 2:
        raise ValueError("the star norm is defined in 2-D only")
    settings = settings or AssemblySettings()
    P = grids
    asm = {}
    for side, (gi, go) in {"omega": (P.omega_in, P.omega_out),
                           "outer": (P.outer_in, P.outer_out)}.items():
        asm[side] = (AlbedoAssembler(pair_a, domain, gi, go, settings),
                     AlbedoAssembler(pair_b, domain, gi, go, settings))
    d_omega = difference_norms(*asm["omega"], threads=threads)
    d_outer = difference_norms(*asm["outer"], threads=threads)
    if mode == "L1":
        n_o, n_r = d_omega.l1, d_outer.l1
        sgap = None
    else:
        n_o, n_r = d_omega.star, d_outer.star
        sgap = transported_strength_gap(pair_a, pair_b, P, *asm["outer"],
                                        asm["outer"][0].settings.chord_step)
    return IsometryReport(mode, float(n_o), float(n_r), float(abs(n_o - n_r)), tolerance, sgap,
                          {"omega_bins": P.omega_in.size, "outer_bins": P.outer_in.size})


def lifted_gap(pair: CoefficientPair, proj: BoundaryProjection,
               settings: AssemblySettings | None = None) -> float:
    """L1 operator norm of lifted_albedo(Omega assembly) minus the direct
    assembly on the outer grids; both computations are independent."""
    d = proj.domain
    asm = AlbedoAssembler(pair, d, proj.omega_in, proj.omega_out, settings)
    dec = decompose_kernel(pair, d, proj.omega_in, proj.omega_out, assembler=asm)
    lifted = lifted_albedo(dec, proj)
    direct = AlbedoAssembler(pair, d, proj.outer_in, proj.outer_out, settings).assemble()
    return op_norm(lifted - direct, "L1")


__all__ = ["BoundaryProjection", "ProjectionError", "build_projection", "projection_grids",
           "pullback_T", "pushforward_Ttilde", "lifted_albedo", "isometry_check",
           "IsometryReport", "transported_strength_gap", "lifted_gap"]
