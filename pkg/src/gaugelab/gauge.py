"""Gauge transformations of coefficient pairs, the alignment of one pair to
another (trial gauge, boundary-corrected gauge, aligned representative), the
class-distance report and the stability constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import (AttenuationField, CoefficientPair, ScatteringKernel, ball_quadrature,
                     declared_bounds, direction_nodes)
from .geometry import (ConvexDomain, min_chord_constant, sample_unit_vectors,
                       segment_quadrature, travel_times)


class InvalidGaugeError(ValueError):
    """Gauge not positive/finite where sampled."""


# ---------------------------------------------------------------------------
# gauge fields

class GaugeField:
    """phi = exp(log_phi) with its derivative along theta, theta . grad_x log phi.

    boundary: 'omega' means phi = 1 on the boundary of Omega and outside it
    (log and derivative are masked to Omega); 'ball' means phi = 1 on the
    sphere of radius R.
    """

    def __init__(self, log_phi, dlog, domain: ConvexDomain, boundary: str = "omega",
                 direction_independent: bool = False, label: str = ""):
        if boundary not in ("omega", "ball"):
            raise ValueError(f"unknown boundary {boundary!r}")
        self._log = log_phi
        self._dlog = dlog
        self.domain = domain
        self.boundary = boundary
        self.direction_independent = direction_independent
        self.label = label

    def _mask(self, x, v):
        if self.boundary == "omega":
            return np.where(self.domain.in_omega(x), v, 0.0)
        return v

    def log(self, x, theta):
        x = np.asarray(x, dtype=float)
        v = np.asarray(self._log(x, np.asarray(theta, dtype=float)), dtype=float)
        return self._mask(x, np.broadcast_to(v, x.shape[:-1]))

    def phi(self, x, theta):
        return np.exp(self.log(x, theta))

    def dlog(self, x, theta):
        """theta . grad_x log phi (closed form, or central differences)."""
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if self._dlog is None:
            return fd_dlog(self, x, theta)
        v = np.asarray(self._dlog(x, theta), dtype=float)
        return self._mask(x, np.broadcast_to(v, x.shape[:-1]))

    def __mul__(self, other: "GaugeField") -> "GaugeField":
        b = self.boundary if self.boundary == other.boundary else "ball"
        return GaugeField(lambda x, t: self.log(x, t) + other.log(x, t),
                          lambda x, t: self.dlog(x, t) + other.dlog(x, t), self.domain, b,
                          self.direction_independent and other.direction_independent,
                          f"({self.label})*({other.label})")

    def inverse(self) -> "GaugeField":
        return GaugeField(lambda x, t: -self.log(x, t), lambda x, t: -self.dlog(x, t),
                          self.domain, self.boundary, self.direction_independent,
                          f"1/({self.label})")

    def boundary_deviation(self, rng=None, n: int = 2000) -> float:
        """max |log phi| over random points of the declared boundary."""
        rng = np.random.default_rng(0) if rng is None else rng
        d = self.domain
        c, r = d.ball("omega" if self.boundary == "omega" else "outer")
        u = sample_unit_vectors(rng, n, d.dimension)
        th = sample_unit_vectors(rng, n, d.dimension)
        x = c + r * u
        if self.boundary == "omega":
            # evaluate the unmasked expression on the boundary itself
            v = np.asarray(self._log(x, th), dtype=float)
        else:
            v = self.log(x, th)
        return float(np.max(np.abs(v)))


def fd_dlog(g: GaugeField, x, theta, step: float = 1e-5):
    """Central-difference theta . grad log phi (theta held fixed)."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return (g.log(x + step * theta, theta) - g.log(x - step * theta, theta)) / (2 * step)


def identity_gauge(domain: ConvexDomain, boundary: str = "omega") -> GaugeField:
    zero = lambda x, t: np.zeros(np.asarray(x).shape[:-1])  # noqa: E731
    return GaugeField(zero, zero, domain, boundary, True, "1")


def radial_bump_gauge(domain: ConvexDomain, amplitude: float = 0.3, power: int = 2
                      ) -> GaugeField:
    """log psi = amplitude (1 - |x - c|^2 / r^2)^power on Omega, 0 outside.

    psi = 1 on the boundary of Omega; power >= 2 makes psi continuously
    differentiable across it.
    """
    c, r = domain.center, domain.omega_radius

    def log_psi(x, t):
        q = 1.0 - np.sum((x - c) ** 2, axis=-1) / r ** 2
        return amplitude * np.maximum(q, 0.0) ** power

    def dlog_psi(x, t):
        q = 1.0 - np.sum((x - c) ** 2, axis=-1) / r ** 2
        return (-2.0 * power * amplitude / r ** 2 * np.maximum(q, 0.0) ** (power - 1)
                * np.sum((x - c) * t, axis=-1))

    return GaugeField(log_psi, dlog_psi, domain, "omega", True,
                      f"exp({amplitude}(1-|x|^2)^{power})")


def directional_gauge(domain: ConvexDomain, amplitude: float = 0.2, axis=None) -> GaugeField:
    """Direction-dependent gauge log phi = amplitude (1 - |x - c|^2/r^2)^2 (e . theta)."""
    c, r = domain.center, domain.omega_radius
    e = np.zeros(domain.dimension)
    e[0] = 1.0
    if axis is not None:
        e = np.asarray(axis, dtype=float) / np.linalg.norm(axis)

    def log_phi(x, t):
        q = np.maximum(1.0 - np.sum((x - c) ** 2, axis=-1) / r ** 2, 0.0)
        return amplitude * q ** 2 * (t @ e)

    def dlog_phi(x, t):
        q = np.maximum(1.0 - np.sum((x - c) ** 2, axis=-1) / r ** 2, 0.0)
        return -4.0 * amplitude / r ** 2 * q * np.sum((x - c) * t, axis=-1) * (t @ e)

    return GaugeField(log_phi, dlog_phi, domain, "omega", False, "directional")


# ---------------------------------------------------------------------------
# action on pairs

class GaugedAttenuation(AttenuationField):
    """a - theta . grad log phi."""

    kind = "gauged"

    def __init__(self, base: AttenuationField, gauge: GaugeField):
        support = "omega" if (base.support == "omega" and gauge.boundary == "omega") else "ball"
        super().__init__(base.domain, support)
        self.base = base
        self.gauge = gauge
        self.direction_independent = False

    def _eval(self, x, theta):
        return self.base(x, theta) - self.gauge.dlog(x, theta)

    def describe(self):
        return {"kind": self.kind, "base": self.base.describe(), "gauge": self.gauge.label,
                "support": self.support}


class GaugedKernel(ScatteringKernel):
    """(phi(x, theta) / phi(x, theta')) k(x, theta', theta)."""

    kind = "gauged"

    def __init__(self, base: ScatteringKernel, gauge: GaugeField):
        super().__init__(base.domain, base.support)
        self.base = base
        self.gauge = gauge
        self.isotropic = bool(base.isotropic and gauge.direction_independent)

    def _eval(self, x, ti, to):
        ratio = np.exp(self.gauge.log(x, to) - self.gauge.log(x, ti))
        return ratio * self.base(x, ti, to)

    def density(self, x):
        # equal directions: the gauge ratio is exactly 1
        if not self.isotropic:
            raise TypeError("kernel is not isotropic")
        return self.base.density(x)

    def on_product(self, x, dirs):
        """k(x_p, dirs[i], dirs[o]) as an (n_x, q, q) array [p, i, o]; the gauge
        is evaluated once per (x, direction) node."""
        x = np.asarray(x, dtype=float)
        q = len(dirs)
        X = np.repeat(x, q, axis=0)
        T = np.tile(dirs, (len(x), 1))
        lg = self.gauge.log(X, T).reshape(len(x), q)
        base = kernel_on_product(self.base, x, dirs)
        ratio = np.exp(lg[:, None, :] - lg[:, :, None])
        out = ratio * base
        if self.support == "omega":
            out = np.where(self.domain.in_omega(x)[:, None, None], out, 0.0)
        return out

    @property
    def is_zero(self):
        return self.base.is_zero

    def describe(self):
        return {"kind": self.kind, "base": self.base.describe(), "gauge": self.gauge.label,
                "support": self.support}


def kernel_on_product(k, x, dirs):
    """k(x_p, dirs[i], dirs[o]) on the product of nodes and direction pairs."""
    if hasattr(k, "on_product"):
        return k.on_product(x, dirs)
    x = np.asarray(x, dtype=float)
    q = len(dirs)
    Xk = np.repeat(x, q * q, axis=0)
    Ti = np.tile(np.repeat(dirs, q, axis=0), (len(x), 1))
    To = np.tile(np.tile(dirs, (q, 1)), (len(x), 1))
    return np.asarray(k(Xk, Ti, To)).reshape(len(x), q, q)


def apply_gauge(phi: GaugeField, pair: CoefficientPair, check: bool = True,
                n_check: int = 2000, rng=None) -> CoefficientPair:
    """(a, k) -> (a - theta . grad log phi, phi(x, theta)/phi(x, theta') k)."""
    if check:
        rng = np.random.default_rng(1) if rng is None else rng
        d = pair.domain
        from .geometry import sample_ball
        x = sample_ball(rng, n_check, np.zeros(d.dimension), d.R)
        th = sample_unit_vectors(rng, n_check, d.dimension)
        lv = phi.log(x, th)
        if not np.all(np.isfinite(lv)):
            raise InvalidGaugeError("gauge is not positive and finite on the sample")
    return CoefficientPair(GaugedAttenuation(pair.a, phi), GaugedKernel(pair.k, phi),
                           pair.sigma, pair.rho, {**pair.meta, "gauge": phi.label})


# ---------------------------------------------------------------------------
# alignment

class _Difference:
    """Field b - a (used as a line-integral integrand)."""

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.support = "omega" if (getattr(a, "support", "ball") == "omega"
                                   and getattr(b, "support", "ball") == "omega") else "ball"

    def __call__(self, x, theta):
        return self.b(x, theta) - self.a(x, theta)


def trial_gauge(a: AttenuationField, a_tilde: AttenuationField, domain: ConvexDomain,
                h: float | None = None) -> GaugeField:
    """log phi(x, theta) = - int_0^{tau_-(x, theta)} (a~ - a)(x - s theta, theta) ds.

    phi = 1 on the incoming boundary of B_R; theta . grad log phi = -(a~ - a).
    """
    h = domain.R / 1000.0 if h is None else h
    diff = _Difference(a, a_tilde)

    def log_phi(x, theta):
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        tm, _ = travel_times(x, theta, domain)
        return -segment_quadrature(x, theta, -tm, np.zeros_like(tm), diff, domain, h)

    def dlog_phi(x, theta):
        return -diff(x, theta)

    return GaugeField(log_phi, dlog_phi, domain, "ball", False, "trial")


def exit_log(phi: GaugeField, x, theta):
    """log phi at the forward exit point x + tau_+ theta on the sphere of radius R."""
    x = np.atleast_2d(x)
    theta = np.atleast_2d(theta)
    _, tp = travel_times(x, theta, phi.domain)
    xe = x + tp[:, None] * theta
    if len(xe) < 64:
        return phi.log(xe, theta)
    # points on a common line share the exit value: integrate once per line
    key = np.round(np.concatenate([xe, theta], axis=1), 9)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    if first.size == len(xe):
        return phi.log(xe, theta)
    return phi.log(xe[first], theta[first])[inv.ravel()]


def corrected_gauge(phi: GaugeField, domain: ConvexDomain) -> GaugeField:
    """log phi~ = log phi - (tau_-/tau) log phi(exit); phi~ = 1 on the whole sphere.

    Its derivative along theta is theta . grad log phi - log phi(exit) / tau.
    """

    def log_c(x, theta):
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        tm, tp = travel_times(x, theta, domain)
        tau = tm + tp
        w = np.where(tau > 0, tm / np.where(tau > 0, tau, 1.0), 0.0)
        return phi.log(x, theta) - w * exit_log(phi, x, theta)

    def dlog_c(x, theta):
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        tm, tp = travel_times(x, theta, domain)
        tau = tm + tp
        inv = np.where(tau > 0, 1.0 / np.where(tau > 0, tau, 1.0), 0.0)
        return phi.dlog(x, theta) - exit_log(phi, x, theta) * inv

    return GaugeField(log_c, dlog_c, domain, "ball", False, "corrected")


def aligned_pair(pair_a: CoefficientPair, pair_b: CoefficientPair, domain: ConvexDomain,
                 h: float | None = None):
    """Representative (a', k') of the class of pair_a aligned with pair_b.

    Returns (pair', phi~) with a' = a - theta . grad log phi~ and
    k' = phi~(x, theta)/phi~(x, theta') k, phi~ the corrected trial gauge.
    """
    phi = trial_gauge(pair_a.a, pair_b.a, domain, h)
    phit = corrected_gauge(phi, domain)
    aligned = apply_gauge(phit, pair_a, check=False)
    aligned.meta["aligned_to"] = pair_b.meta.get("label", "")
    return aligned, phit


# ---------------------------------------------------------------------------
# constants and class distance

def stability_constant(sigma: float, rho: float, R: float, c_R: float,
                       variant: str = "safe-max") -> float:
    """eq113: max{pi R e^{2 R Sigma}(1 + 2 rho e^{4 R Sigma}), e^{4 R Sigma}/c_R};
    sec5: max{pi R e^{4 R Sigma}(1 + 2 rho e^{2 R Sigma}), e^{2 R Sigma}/c_R};
    safe-max: the larger of the two.

    Sigma and rho may be zero (a vanishing bound); R and c_R must be positive.
    """
    if sigma < 0 or rho < 0 or not R > 0 or not c_R > 0:
        raise ValueError("need Sigma, rho >= 0 and R, c_R > 0")
    e2, e4 = math.exp(2 * R * sigma), math.exp(4 * R * sigma)
    eq113 = max(math.pi * R * e2 * (1 + 2 * rho * e4), e4 / c_R)
    sec5 = max(math.pi * R * e4 * (1 + 2 * rho * e2), e2 / c_R)
    if variant == "eq113":
        return eq113
    if variant == "sec5":
        return sec5
    if variant == "safe-max":
        return max(eq113, sec5)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class ClassDistanceReport:
    eps: float
    a_gap_inf: float
    k_gap: float
    C_eq113: float
    C_sec5: float
    mode: str
    sigma: float
    rho: float
    c_R: float
    slack: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def C(self) -> float:
        return max(self.C_eq113, self.C_sec5)

    @property
    def delta_hat(self) -> float:
        return max(self.a_gap_inf, self.k_gap)

    @property
    def passed(self) -> bool:
        return self.delta_hat <= self.C * self.eps + self.slack

    def to_dict(self) -> dict:
        return {"eps": self.eps, "a_gap_inf": self.a_gap_inf, "k_gap": self.k_gap,
                "C_eq113": self.C_eq113, "C_sec5": self.C_sec5, "delta_hat": self.delta_hat,
                "pass": self.passed, "mode": self.mode, "sigma": self.sigma, "rho": self.rho,
                "c_R": self.c_R, **self.extra}


def gap_nodes(domain: ConvexDomain, n_r: int = 8, n_ang: int = 16, n_dirs: int = 32,
              support: str = "ball"):
    """Quadrature nodes (x, weight) on Omega or B_R and equal-weight directions."""
    if support == "omega":
        c, r = domain.center, domain.omega_radius
    else:
        c, r = np.zeros(domain.dimension), domain.R
    pts, w = ball_quadrature(c, r, n_r, n_ang)
    return pts, w, direction_nodes(domain.dimension, n_dirs)


def coefficient_gaps(aligned: CoefficientPair, target: CoefficientPair, domain: ConvexDomain,
                     mode: str, n_r: int = 8, n_ang: int = 16, n_dirs: int = 32):
    """(sup |a' - a~|, k gap) on quadrature nodes; the k gap is the L1 norm over
    Omega x S x S in 3-D mode and the sup norm in 2-D mode."""
    pts, w, dirs = gap_nodes(domain, n_r, n_ang, n_dirs, "ball")
    q = len(dirs)
    X = np.repeat(pts, q, axis=0)
    T = np.tile(dirs, (len(pts), 1))
    a_gap = float(np.max(np.abs(aligned.a(X, T) - target.a(X, T))))
    kp, kw, _ = gap_nodes(domain, n_r, n_ang, n_dirs, "omega")
    dk = np.abs(kernel_on_product(aligned.k, kp, dirs)
                - kernel_on_product(target.k, kp, dirs)).reshape(len(kp), q * q)
    if mode == "L1-3D":
        k_gap = float(np.sum(dk.mean(axis=1) * kw))
    else:
        k_gap = float(dk.max(initial=0.0))
    return a_gap, k_gap


def class_bounds(pair_a: CoefficientPair, pair_b: CoefficientPair):
    s1, r1 = declared_bounds(pair_a)
    s2, r2 = declared_bounds(pair_b)
    return max(s1, s2), max(r1, r2)


def class_distance(pair_a: CoefficientPair, pair_b: CoefficientPair, domain: ConvexDomain,
                   grid_in, grid_out, mode: str | None = None, settings=None,
                   h: float | None = None, slack: float = 0.0, gap_nodes_kw=None,
                   threads: int | None = None) -> ClassDistanceReport:
    """Measure eps between the albedo operators, align pair_a to pair_b and
    report the coefficient gaps against the stability constants."""
    from .albedo import AlbedoAssembler, AssemblySettings, difference_norms
    if mode is None:
        mode = "L1-3D" if domain.dimension == 3 else "star-2D"
    if (mode == "L1-3D") != (domain.dimension == 3):
        raise ValueError(f"mode {mode!r} does not match dimension {domain.dimension}")
    settings = settings or AssemblySettings()
    asm_a = AlbedoAssembler(pair_a, domain, grid_in, grid_out, settings)
    asm_b = AlbedoAssembler(pair_b, domain, grid_in, grid_out, settings)
    dn = difference_norms(asm_a, asm_b, threads)
    eps = dn.l1 if mode == "L1-3D" else dn.star
    aligned, _ = aligned_pair(pair_a, pair_b, domain, h)
    a_gap, k_gap = coefficient_gaps(aligned, pair_b, domain, mode, **(gap_nodes_kw or {}))
    sigma, rho = class_bounds(pair_a, pair_b)
    c_R = min_chord_constant(domain)
    R = domain.R
    return ClassDistanceReport(eps, a_gap, k_gap,
                               stability_constant(sigma, rho, R, c_R, "eq113"),
                               stability_constant(sigma, rho, R, c_R, "sec5"),
                               mode, sigma, rho, c_R, slack,
                               {"l1": dn.l1, "star": dn.star, "ballistic_sup": dn.ballistic_sup,
                                "weighted_remainder_sup": dn.weighted_remainder_sup})
