"""Convex-domain geometry: travel times, chord quadrature and boundary grids.

The support region is a disk/ball (possibly off-center) strictly inside the
outer ball B_R, which is centered at the origin.  All routines are
vectorized over leading array axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# phase points further than this (relative to R) outside a ball are rejected
_INSIDE_TOL = 1e-9
# max number of quadrature samples materialized at once
_CHUNK = 4_000_000


class DomainError(ValueError):
    """Point or configuration outside the admissible geometry."""


class ConfigurationError(ValueError):
    """Invalid discretization parameters."""


@dataclass(frozen=True)
class ConvexDomain:
    """Inner ball Omega (center, radius) strictly contained in B_R."""

    dimension: int
    R: float
    omega_radius: float
    omega_center: tuple = None

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise DomainError(f"dimension must be 2 or 3, got {self.dimension}")
        c = self.omega_center
        if c is None:
            c = (0.0,) * self.dimension
        c = tuple(float(v) for v in c)
        if len(c) != self.dimension:
            raise DomainError("omega_center has the wrong length")
        object.__setattr__(self, "omega_center", c)
        if not self.R > 0:
            raise DomainError("R must be positive")
        if self.omega_radius < 0:
            raise DomainError("omega_radius must be non-negative")
        if math.hypot(*c) + self.omega_radius >= self.R:
            raise DomainError("closure of Omega must lie strictly inside B_R")

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.omega_center, dtype=float)

    @property
    def support_radius(self) -> float:
        """Radius of the smallest origin-centered ball containing Omega."""
        return float(np.linalg.norm(self.center) + self.omega_radius)

    def ball(self, target: str):
        """(center, radius) of the outer ball or of Omega."""
        if target in ("outer", "ball", "B_R"):
            return np.zeros(self.dimension), float(self.R)
        if target in ("inner", "omega", "Omega"):
            return self.center, float(self.omega_radius)
        raise ValueError(f"unknown target {target!r}")

    def in_omega(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        c = self.omega_center
        d2 = (x[..., 0] - c[0]) ** 2
        for i in range(1, len(c)):
            d2 += (x[..., i] - c[i]) ** 2
        return d2 <= self.omega_radius ** 2

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "R": self.R,
                "omega_radius": self.omega_radius,
                "omega_center": list(self.omega_center)}


def line_ball_interval(x, theta, center, radius):
    """Parameters t_lo <= t_hi with |x + t theta - center| = radius.

    Returns (t_lo, t_hi, hit); for lines missing the ball both parameters
    are 0 and hit is False.  Tangent lines count as misses.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    d = x - center
    b = np.sum(d * theta, axis=-1)
    c = np.sum(d * d, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_lo = np.where(hit, -b - sq, 0.0)
    t_hi = np.where(hit, -b + sq, 0.0)
    return t_lo, t_hi, hit


def travel_times(x, theta, domain: ConvexDomain, target: str = "outer"):
    """Backward and forward travel times (tau_minus, tau_plus) to the boundary.

    x must lie in the closure of the target ball.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    center, radius = domain.ball(target)
    d = x - center
    r2 = np.sum(d * d, axis=-1)
    if np.any(r2 > (radius * (1 + _INSIDE_TOL)) ** 2 + _INSIDE_TOL):
        raise DomainError("phase point outside the target region")
    b = np.sum(d * theta, axis=-1)
    disc = np.maximum(b * b - (r2 - radius * radius), 0.0)
    sq = np.sqrt(disc)
    tau_plus = np.maximum(-b + sq, 0.0)
    tau_minus = np.maximum(b + sq, 0.0)
    return tau_minus, tau_plus


def chord_length(x, theta, domain: ConvexDomain, target: str = "outer"):
    tm, tp = travel_times(x, theta, domain, target)
    return tm + tp


def min_chord_constant(domain: ConvexDomain) -> float:
    """Infimum of the full B_R chord length over closure(Omega) x directions."""
    d = domain.support_radius
    if d >= domain.R:
        raise DomainError("closure of Omega must lie strictly inside B_R")
    return 2.0 * math.sqrt(domain.R ** 2 - d ** 2)


def _field_support(f):
    return getattr(f, "support", None)


def _pieces(x, theta, t0, t1, f, domain):
    """Split [t0, t1] at the Omega crossings; returns (lo, hi) of shape (M, 3)."""
    c_lo, c_hi, hit = line_ball_interval(x, theta, domain.center, domain.omega_radius)
    c_lo = np.where(hit, np.clip(c_lo, t0, t1), t0)
    c_hi = np.where(hit, np.clip(c_hi, t0, t1), t0)
    if _field_support(f) == "omega":
        lo = np.stack([t0, c_lo, t1], axis=-1)
        hi = np.stack([t0, c_hi, t1], axis=-1)
    else:
        lo = np.stack([t0, c_lo, c_hi], axis=-1)
        hi = np.stack([c_lo, c_hi, t1], axis=-1)
    return lo, hi


def _midpoint_samples(lo, hi, h):
    """Flattened midpoint nodes for a batch of pieces.

    Returns (owner, t, step) where owner indexes the flattened piece array.
    """
    length = np.maximum(hi - lo, 0.0).ravel()
    n = np.where(length > 0, np.ceil(length / h - 1e-12), 0).astype(np.int64)
    n = np.where((length > 0) & (n == 0), 1, n)
    step = np.where(n > 0, length / np.maximum(n, 1), 0.0)
    owner = np.repeat(np.arange(n.size), n)
    start = np.cumsum(n) - n
    k = np.arange(owner.size) - start[owner]
    t = lo.ravel()[owner] + (k + 0.5) * step[owner]
    return owner, t, step[owner]


def segment_quadrature(x, theta, t0, t1, f, domain: ConvexDomain, h: float):
    """Composite midpoint rule for int_{t0}^{t1} f(x + t theta, theta) dt.

    The segment is split at the analytic Omega crossings, and restricted to
    Omega when f declares support="omega".  Vectorized over phase points.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    m = max(x.shape[0], theta.shape[0])
    x = np.broadcast_to(x, (m, x.shape[1]))
    theta = np.broadcast_to(theta, (m, theta.shape[1]))
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (m,))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (m,))
    t1 = np.maximum(t1, t0)
    out = np.zeros(m)
    # choose a row chunk so that the sample count stays bounded
    per_row = max(1.0, float(np.max(t1 - t0, initial=0.0)) / h + 3)
    rows = max(1, int(_CHUNK // per_row))
    for s in range(0, m, rows):
        sl = slice(s, min(m, s + rows))
        lo, hi = _pieces(x[sl], theta[sl], t0[sl], t1[sl], f, domain)
        owner, t, step = _midpoint_samples(lo, hi, h)
        if owner.size == 0:
            continue
        row = owner // 3
        pts = x[sl][row] + t[:, None] * theta[sl][row]
        vals = np.asarray(f(pts, theta[sl][row]), dtype=float)
        out[sl] = np.bincount(row, weights=vals * step, minlength=lo.shape[0])
    return out


def chord_quadrature(x, theta, domain: ConvexDomain, f, direction: str = "full",
                     h: float | None = None):
    """Integral of f along the B_R chord through (x, theta).

    direction selects the backward part [x - tau_minus theta, x], the forward
    part [x, x + tau_plus theta], or the full chord (split at x, so the full
    value equals backward + forward exactly).
    """
    if h is None:
        h = domain.R / 1000.0
    if not h > 0:
        raise ConfigurationError("chord step must be positive")
    tm, tp = travel_times(x, theta, domain, "outer")
    tm = np.atleast_1d(tm)
    tp = np.atleast_1d(tp)
    zero = np.zeros_like(tm)
    if direction == "backward":
        return segment_quadrature(x, theta, -tm, zero, f, domain, h)
    if direction == "forward":
        return segment_quadrature(x, theta, zero, tp, f, domain, h)
    if direction == "full":
        return (segment_quadrature(x, theta, -tm, zero, f, domain, h)
                + segment_quadrature(x, theta, zero, tp, f, domain, h))
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# direction helpers

def unit_from_angle(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=float)
    return np.stack([np.cos(angle), np.sin(angle)], axis=-1)


def unit_from_spherical(polar, azimuth) -> np.ndarray:
    polar = np.asarray(polar, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    s = np.sin(polar)
    return np.stack([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(polar)], axis=-1)


def cross2(u, v):
    """Scalar cross product u x v of planar vectors."""
    u = np.asarray(u)
    v = np.asarray(v)
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _orthonormal_frame(normal):
    """Two unit tangent vectors completing normal to a right-handed frame."""
    n = np.asarray(normal, dtype=float)
    helper = np.where(np.abs(n[..., 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]),
                      np.array([1.0, 0.0, 0.0]))
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


# ---------------------------------------------------------------------------
# boundary grids

@dataclass
class BoundaryGrid:
    """Tensor grid of boundary bins times relative direction bins.

    2-D: boundary angle alpha (n_b cells) times the angle s in (-pi/2, pi/2)
    between theta and the inward (incoming) or outward (outgoing) normal.
    3-D: colatitude/longitude cells times hemispherical (polar, azimuth)
    direction cells around the normal.

    Weights carry d xi = |n . theta| d mu d theta with d theta normalized to
    total mass 1; they are evaluated at bin centers (midpoint rule), so a bin
    centered on a tangent direction has weight 0.
    """

    dimension: int
    center: np.ndarray
    radius: float
    orientation: str
    n_b: int
    n_theta: int
    points: np.ndarray  # (N, n) bin-center positions
    directions: np.ndarray  # (N, n) bin-center directions
    normals: np.ndarray  # (N, n) outward normals
    weights: np.ndarray  # (N,)
    pos_index: np.ndarray  # (N,) boundary cell index
    dir_index: np.ndarray  # (N,) direction cell index
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "center": list(map(float, self.center)),
                "radius": self.radius, "orientation": self.orientation,
                "n_b": self.n_b, "n_theta": self.n_theta, **self.meta}


def bin_weight_2d(radius, d_alpha, d_s, s):
    """Midpoint d xi weight of a 2-D bin with relative angle s at its center."""
    return radius * d_alpha * np.abs(np.cos(s)) * d_s / (2.0 * np.pi)


def _alpha_offset(orientation, n_b, n_theta):
    # staggered so that free transport maps incoming centers onto outgoing
    # centers whenever n_b / n_theta is an integer
    if orientation == "incoming":
        return 0.5
    return (0.5 + 0.5 * n_b / n_theta) % 1.0


def build_boundary_grid(domain: ConvexDomain, boundary: str = "ball",
                        orientation: str = "incoming", n_b: int = 32,
                        n_theta: int = 32, n_azimuth: int | None = None) -> BoundaryGrid:
    """Discretize Gamma_-/Gamma_+ on the outer sphere or on the boundary of Omega.

    In 3-D n_b is the number of colatitude cells (longitudes use 2 n_b) and
    n_theta the number of polar direction cells (azimuths use 2 n_theta unless
    n_azimuth is given).
    """
    if n_b is None or n_theta is None or n_b < 2 or n_theta < 2:
        raise ConfigurationError("n_b and n_theta must be at least 2")
    if orientation not in ("incoming", "outgoing"):
        raise ConfigurationError(f"unknown orientation {orientation!r}")
    target = "outer" if boundary in ("ball", "outer", "B_R") else "inner"
    center, radius = domain.ball(target)
    if radius <= 0:
        raise ConfigurationError("cannot grid a degenerate boundary")
    sign = -1.0 if orientation == "incoming" else 1.0
    if domain.dimension == 2:
        d_alpha = 2 * np.pi / n_b
        d_s = np.pi / n_theta
        off = _alpha_offset(orientation, n_b, n_theta)
        alpha = (np.arange(n_b) + off) * d_alpha
        s = -np.pi / 2 + (np.arange(n_theta) + 0.5) * d_s
        A, S = np.meshgrid(alpha, s, indexing="ij")
        A = A.ravel()
        S = S.ravel()
        normal = unit_from_angle(A)
        pts = center + radius * normal
        base = A + (np.pi if orientation == "incoming" else 0.0)
        dirs = unit_from_angle(base + S)
        w = bin_weight_2d(radius, d_alpha, d_s, S)
        pos_idx, dir_idx = np.divmod(np.arange(n_b * n_theta), n_theta)
        meta = {"alpha_offset": off, "d_alpha": d_alpha, "d_s": d_s}
        return BoundaryGrid(2, center, radius, orientation, n_b, n_theta, pts, dirs,
                            normal, w, pos_idx, dir_idx, meta)
    # 3-D: latitude-longitude product with exact cell areas
    n_lon = 2 * n_b
    n_az = n_azimuth if n_azimuth is not None else 2 * n_theta
    d_col = np.pi / n_b
    d_lon = 2 * np.pi / n_lon
    col_edges = np.arange(n_b + 1) * d_col
    col = 0.5 * (col_edges[:-1] + col_edges[1:])
    lon = (np.arange(n_lon) + 0.5) * d_lon
    area = radius ** 2 * d_lon * (np.cos(col_edges[:-1]) - np.cos(col_edges[1:]))
    d_pol = 0.5 * np.pi / n_theta
    d_az = 2 * np.pi / n_az
    pol = (np.arange(n_theta) + 0.5) * d_pol
    az = (np.arange(n_az) + 0.5) * d_az
    C, L, P, Z = np.meshgrid(col, lon, pol, az, indexing="ij")
    normal = unit_from_spherical(C.ravel(), L.ravel())
    pts = center + radius * normal
    e1, e2 = _orthonormal_frame(normal)
    Pr = P.ravel()
    Zr = Z.ravel()
    local = (np.sin(Pr)[:, None] * (np.cos(Zr)[:, None] * e1 + np.sin(Zr)[:, None] * e2)
             + np.cos(Pr)[:, None] * (sign * normal))
    dir_w = np.cos(Pr) * np.sin(Pr) * d_pol * d_az / (4 * np.pi)
    A_cell = np.broadcast_to(area[:, None, None, None], C.shape).ravel()
    w = A_cell * dir_w
    n_dir = n_theta * n_az
    pos_idx, dir_idx = np.divmod(np.arange(w.size), n_dir)
    meta = {"n_lon": n_lon, "n_azimuth": n_az, "d_pol": d_pol, "d_az": d_az}
    return BoundaryGrid(3, center, radius, orientation, n_b, n_theta, pts, local,
                        normal, w, pos_idx, dir_idx, meta)


def boundary_chart(grid: BoundaryGrid, x, theta):
    """Continuous chart coordinates (alpha, s) of 2-D boundary phase points.

    alpha is the boundary angle in [0, 2 pi), s the signed angle between theta
    and the inward (incoming) / outward (outgoing) normal.
    """
    x = np.asarray(x, dtype=float) - grid.center
    theta = np.asarray(theta, dtype=float)
    alpha = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
    base = alpha + (np.pi if grid.orientation == "incoming" else 0.0)
    ang = np.arctan2(theta[..., 1], theta[..., 0])
    s = np.mod(ang - base + np.pi, 2 * np.pi) - np.pi
    return alpha, s


def locate_bins_2d(grid: BoundaryGrid, x, theta):
    """Index of the bin containing each 2-D boundary phase point (-1 if none)."""
    alpha, s = boundary_chart(grid, x, theta)
    d_alpha = grid.meta["d_alpha"]
    d_s = grid.meta["d_s"]
    off = grid.meta["alpha_offset"]
    ia = np.mod(np.floor(alpha / d_alpha - off + 0.5), grid.n_b).astype(np.int64)
    js = np.floor((s + np.pi / 2) / d_s).astype(np.int64)
    ok = (js >= 0) & (js < grid.n_theta)
    idx = ia * grid.n_theta + np.clip(js, 0, grid.n_theta - 1)
    return np.where(ok, idx, -1)


def locate_bins_3d(grid: BoundaryGrid, x, theta):
    """Index of the bin containing each 3-D boundary phase point (-1 if none)."""
    x = np.asarray(x, dtype=float) - grid.center
    theta = np.asarray(theta, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    normal = x / r[..., None]
    colat = np.arccos(np.clip(normal[..., 2], -1, 1))
    lon = np.mod(np.arctan2(normal[..., 1], normal[..., 0]), 2 * np.pi)
    n_lon = grid.meta["n_lon"]
    n_az = grid.meta["n_azimuth"]
    ic = np.clip(np.floor(colat / (np.pi / grid.n_b)), 0, grid.n_b - 1).astype(np.int64)
    il = np.mod(np.floor(lon / (2 * np.pi / n_lon)), n_lon).astype(np.int64)
    # use the cell-center normal frame, as the grid does
    col_c = (ic + 0.5) * np.pi / grid.n_b
    lon_c = (il + 0.5) * 2 * np.pi / n_lon
    nc = unit_from_spherical(col_c, lon_c)
    e1, e2 = _orthonormal_frame(nc)
    sign = -1.0 if grid.orientation == "incoming" else 1.0
    c = sign * np.sum(theta * nc, axis=-1)
    pol = np.arccos(np.clip(c, -1, 1))
    az = np.mod(np.arctan2(np.sum(theta * e2, axis=-1), np.sum(theta * e1, axis=-1)),
                2 * np.pi)
    ip = np.floor(pol / grid.meta["d_pol"]).astype(np.int64)
    iz = np.mod(np.floor(az / grid.meta["d_az"]), n_az).astype(np.int64)
    # membership follows the true normal; near-grazing directions can fall
    # past the last polar ring of the cell-center frame and are clamped to it
    ok = sign * np.sum(theta * normal, axis=-1) >= 0
    pos = ic * n_lon + il
    idx = pos * (grid.n_theta * n_az) + np.clip(ip, 0, grid.n_theta - 1) * n_az + iz
    return np.where(ok, idx, -1)


def locate_bins(grid: BoundaryGrid, x, theta):
    if grid.dimension == 2:
        return locate_bins_2d(grid, x, theta)
    return locate_bins_3d(grid, x, theta)


def exit_points(x, theta, domain: ConvexDomain, target: str = "outer"):
    """Forward continuation x + tau_plus theta to the target boundary."""
    _, tp = travel_times(x, theta, domain, target)
    return np.asarray(x) + tp[..., None] * np.asarray(theta)


def entry_points(x, theta, domain: ConvexDomain, target: str = "outer"):
    """Backward continuation x - tau_minus theta to the target boundary."""
    tm, _ = travel_times(x, theta, domain, target)
    return np.asarray(x) - tm[..., None] * np.asarray(theta)


def sample_unit_vectors(rng, n: int, dimension: int) -> np.ndarray:
    v = rng.standard_normal((n, dimension))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_ball(rng, n: int, center, radius: float) -> np.ndarray:
    center = np.asarray(center, dtype=float)
    dim = center.size
    u = sample_unit_vectors(rng, n, dim)
    r = radius * rng.random(n) ** (1.0 / dim)
    return center + r[:, None] * u
