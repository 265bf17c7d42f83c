"""Coefficient fields (attenuation a, scattering kernel k), norms and admissibility.

Fields are vectorized callables: a(x, theta) and k(x, theta_in, theta_out)
take arrays of shape (m, n) and return shape (m,).  Angular measures are
normalized to total mass 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ConvexDomain, unit_from_angle


class NormError(ValueError):
    """Unknown norm tag."""


def _omega_mask(domain: ConvexDomain, x):
    return domain.in_omega(x)


# ---------------------------------------------------------------------------
# angular and spatial quadratures

def direction_nodes(dimension: int, n: int) -> np.ndarray:
    """Equal-weight direction nodes on S^{n-1} (uniform angles / Fibonacci)."""
    if dimension == 2:
        return unit_from_angle((np.arange(n) + 0.5) * 2 * np.pi / n)
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5 ** 0.5) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def ball_quadrature(center, radius: float, n_r: int, n_ang: int):
    """Midpoint quadrature nodes and weights on a disk/ball."""
    center = np.asarray(center, dtype=float)
    dim = center.size
    dr = radius / n_r
    r = (np.arange(n_r) + 0.5) * dr
    if dim == 2:
        ph = (np.arange(n_ang) + 0.5) * 2 * np.pi / n_ang
        Rr, P = np.meshgrid(r, ph, indexing="ij")
        pts = center + Rr.ravel()[:, None] * unit_from_angle(P.ravel())
        w = (Rr * dr * 2 * np.pi / n_ang).ravel()
        return pts, w
    n_col = max(2, n_ang // 2)
    col = (np.arange(n_col) + 0.5) * np.pi / n_col
    lon = (np.arange(n_ang) + 0.5) * 2 * np.pi / n_ang
    Rr, C, L = np.meshgrid(r, col, lon, indexing="ij")
    s = np.sin(C)
    u = np.stack([s * np.cos(L), s * np.sin(L), np.cos(C)], axis=-1).reshape(-1, 3)
    pts = center + Rr.ravel()[:, None] * u
    w = (Rr ** 2 * s * dr * (np.pi / n_col) * (2 * np.pi / n_ang)).ravel()
    return pts, w


def support_samples(domain: ConvexDomain, support: str, n_r: int = 24, n_ang: int = 48,
                    include_center: bool = True):
    """Sample points covering the support region (Omega or B_R), with weights."""
    if support == "omega":
        c, rad = domain.center, domain.omega_radius
    else:
        c, rad = np.zeros(domain.dimension), domain.R
    pts, w = ball_quadrature(c, rad, n_r, n_ang)
    if include_center:
        pts = np.vstack([c[None, :], pts])
        w = np.concatenate([[0.0], w])
    return pts, w


# ---------------------------------------------------------------------------
# attenuation fields

class AttenuationField:
    """Base class; subclasses implement _eval(x, theta)."""

    kind = "abstract"
    direction_independent = False

    def __init__(self, domain: ConvexDomain, support: str = "omega"):
        self.domain = domain
        self.support = support

    def __call__(self, x, theta):
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        v = self._eval(x, theta)
        if self.support == "omega":
            v = np.where(_omega_mask(self.domain, x), v, 0.0)
        return v

    def _eval(self, x, theta):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def sup_bound(self):
        """Closed-form ess-sup when known, else None."""
        return None

    def describe(self) -> dict:
        return {"kind": self.kind, "support": self.support}


class ConstantAttenuation(AttenuationField):
    kind = "constant"
    direction_independent = True

    def __init__(self, value: float, domain: ConvexDomain, support: str = "omega"):
        super().__init__(domain, support)
        if value < 0:
            raise ValueError("attenuation must be non-negative")
        self.value = float(value)

    def _eval(self, x, theta):
        return np.full(x.shape[:-1], self.value)

    @property
    def sup_bound(self):
        return self.value

    def describe(self):
        return {"kind": "constant", "value": self.value, "support": self.support}


class RadialPolynomialAttenuation(AttenuationField):
    """a(x) = sum_i c_i |x - c_Omega|^i."""

    kind = "radial_polynomial"
    direction_independent = True

    def __init__(self, coeffs, domain: ConvexDomain, support: str = "omega"):
        super().__init__(domain, support)
        self.coeffs = [float(c) for c in coeffs]

    def _eval(self, x, theta):
        r = np.linalg.norm(x - self.domain.center, axis=-1)
        return np.polynomial.polynomial.polyval(r, self.coeffs)

    def describe(self):
        return {"kind": self.kind, "coeffs": self.coeffs, "support": self.support}


class AnalyticAttenuation(AttenuationField):
    """Attenuation given by an arbitrary vectorized closure."""

    kind = "anisotropic_analytic"

    def __init__(self, func, domain: ConvexDomain, support: str = "omega",
                 sup_bound=None, direction_independent: bool = False, label: str = ""):
        super().__init__(domain, support)
        self.func = func
        self._sup = sup_bound
        self.direction_independent = direction_independent
        self.label = label

    def _eval(self, x, theta):
        return np.asarray(self.func(x, theta), dtype=float)

    @property
    def sup_bound(self):
        return self._sup

    def describe(self):
        return {"kind": self.kind, "label": self.label, "support": self.support}


class GridAttenuation(AttenuationField):
    """Grid-sampled attenuation: tensor grid in x, low-order angular expansion.

    2-D: values[..., :] = (c0, c1, s1, c2, s2, ...) Fourier coefficients in
    the direction angle.  3-D: values[..., :] = (c0, b_x, b_y, b_z) so that
    a = c0 + b . theta.  Spatial interpolation is multilinear; points outside
    the grid box evaluate to 0.
    """

    kind = "grid_sampled"

    def __init__(self, lower, upper, values, domain: ConvexDomain, support: str = "omega"):
        super().__init__(domain, support)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.values = np.ascontiguousarray(values, dtype=float)
        self.direction_independent = self.values.shape[-1] == 1

    @property
    def shape(self):
        return self.values.shape[:-1]

    def _spatial(self, x):
        dim = self.lower.size
        shape = np.array(self.shape)
        u = (x - self.lower) / (self.upper - self.lower) * (shape - 1)
        inside = np.all((u >= 0) & (u <= shape - 1), axis=-1)
        i0 = np.clip(np.floor(u).astype(np.int64), 0, shape - 2)
        f = np.clip(u - i0, 0.0, 1.0)
        out = 0.0
        for corner in range(2 ** dim):
            bits = [(corner >> d) & 1 for d in range(dim)]
            w = np.ones(x.shape[0])
            idx = []
            for d in range(dim):
                w = w * (f[:, d] if bits[d] else 1 - f[:, d])
                idx.append(i0[:, d] + bits[d])
            out = out + w[:, None] * self.values[tuple(idx)]
        return np.where(inside[:, None], out, 0.0)

    def _eval(self, x, theta):
        x2 = x.reshape(-1, x.shape[-1])
        th = theta.reshape(-1, theta.shape[-1])
        coef = self._spatial(x2)
        if self.lower.size == 2:
            ang = np.arctan2(th[:, 1], th[:, 0])
            v = coef[:, 0].copy()
            m = (coef.shape[1] - 1) // 2
            for j in range(1, m + 1):
                v += coef[:, 2 * j - 1] * np.cos(j * ang) + coef[:, 2 * j] * np.sin(j * ang)
        else:
            v = coef[:, 0].copy()
            if coef.shape[1] >= 4:
                v += np.sum(coef[:, 1:4] * th, axis=-1)
        return v.reshape(x.shape[:-1])

    @property
    def sup_bound(self):
        return None

    def describe(self):
        return {"kind": self.kind, "shape": list(self.values.shape),
                "lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "support": self.support}


def sample_attenuation(a: AttenuationField, domain: ConvexDomain, n_nodes: int = 65,
                       n_modes: int = 2, n_dirs: int = 32) -> GridAttenuation:
    """Sample a field onto a tensor grid with a low-order angular expansion."""
    dim = domain.dimension
    if a.support == "omega":
        lower = domain.center - domain.omega_radius
        upper = domain.center + domain.omega_radius
    else:
        lower = -np.full(dim, domain.R)
        upper = np.full(dim, domain.R)
    axes = [np.linspace(lower[d], upper[d], n_nodes) for d in range(dim)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    dirs = direction_nodes(dim, n_dirs)
    X = np.repeat(mesh, len(dirs), axis=0)
    T = np.tile(dirs, (len(mesh), 1))
    vals = a._eval(X, T).reshape(len(mesh), len(dirs))
    if dim == 2:
        ang = np.arctan2(dirs[:, 1], dirs[:, 0])
        cols = [np.ones_like(ang)]
        for j in range(1, n_modes + 1):
            cols += [np.cos(j * ang), np.sin(j * ang)]
        basis = np.stack(cols, axis=1)
    else:
        basis = np.hstack([np.ones((len(dirs), 1)), dirs])
    coef, *_ = np.linalg.lstsq(basis, vals.T, rcond=None)
    values = coef.T.reshape(*([n_nodes] * dim), basis.shape[1])
    return GridAttenuation(lower, upper, values, domain, a.support)


# ---------------------------------------------------------------------------
# scattering kernels

class ScatteringKernel:
    """Base class; subclasses implement _eval(x, theta_in, theta_out).

    Isotropic kernels (independent of both directions) also expose density(x).
    """

    kind = "abstract"
    isotropic = False

    def __init__(self, domain: ConvexDomain, support: str = "omega"):
        self.domain = domain
        self.support = support

    def __call__(self, x, theta_in, theta_out):
        x = np.asarray(x, dtype=float)
        v = self._eval(x, np.asarray(theta_in, dtype=float), np.asarray(theta_out, dtype=float))
        if self.support == "omega":
            v = np.where(_omega_mask(self.domain, x), v, 0.0)
        return v

    def density(self, x):
        """Direction-free value of an isotropic kernel."""
        if not self.isotropic:
            raise TypeError("kernel is not isotropic")
        x = np.asarray(x, dtype=float)
        d = np.zeros(x.shape)
        d[..., 0] = 1.0
        return self(x, d, d)

    def _eval(self, x, ti, to):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def sup_bound(self):
        return None

    @property
    def inf1_bound(self):
        return None

    @property
    def is_zero(self) -> bool:
        """True when the kernel is known to vanish identically."""
        return self.sup_bound == 0.0

    def describe(self) -> dict:
        return {"kind": self.kind, "support": self.support}


class ConstantKernel(ScatteringKernel):
    kind = "constant"
    isotropic = True

    def __init__(self, value: float, domain: ConvexDomain, support: str = "omega"):
        super().__init__(domain, support)
        if value < 0:
            raise ValueError("scattering kernel must be non-negative")
        self.value = float(value)

    def _eval(self, x, ti, to):
        return np.full(x.shape[:-1], self.value)

    @property
    def sup_bound(self):
        return self.value

    @property
    def inf1_bound(self):
        return self.value

    def describe(self):
        return {"kind": "constant", "value": self.value, "support": self.support}


class RadialPolynomialKernel(ScatteringKernel):
    """Isotropic k(x) = sum_i c_i |x - c_Omega|^i."""

    kind = "radial_polynomial"
    isotropic = True

    def __init__(self, coeffs, domain: ConvexDomain, support: str = "omega"):
        super().__init__(domain, support)
        self.coeffs = [float(c) for c in coeffs]

    def _eval(self, x, ti, to):
        r = np.linalg.norm(x - self.domain.center, axis=-1)
        return np.polynomial.polynomial.polyval(r, self.coeffs)

    def describe(self):
        return {"kind": self.kind, "coeffs": self.coeffs, "support": self.support}


class AnalyticKernel(ScatteringKernel):
    kind = "anisotropic_analytic"

    def __init__(self, func, domain: ConvexDomain, support: str = "omega",
                 isotropic: bool = False, sup_bound=None, inf1_bound=None, label: str = ""):
        super().__init__(domain, support)
        self.func = func
        self.isotropic = isotropic
        self._sup = sup_bound
        self._inf1 = inf1_bound
        self.label = label

    def _eval(self, x, ti, to):
        return np.asarray(self.func(x, ti, to), dtype=float)

    @property
    def sup_bound(self):
        return self._sup

    @property
    def inf1_bound(self):
        return self._inf1

    def describe(self):
        return {"kind": self.kind, "label": self.label, "support": self.support}


# ---------------------------------------------------------------------------
# pairs

@dataclass
class CoefficientPair:
    """Attenuation/kernel pair with declared class bounds (Sigma, rho)."""

    a: AttenuationField
    k: ScatteringKernel
    sigma: float | None = None
    rho: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def domain(self) -> ConvexDomain:
        return self.a.domain

    def describe(self) -> dict:
        return {"a": self.a.describe(), "k": self.k.describe(),
                "sigma": self.sigma, "rho": self.rho}


def constant_pair(a0: float, k0: float, domain: ConvexDomain) -> CoefficientPair:
    return CoefficientPair(ConstantAttenuation(a0, domain), ConstantKernel(k0, domain))


NORM_TAGS = ("a_inf", "k_inf1", "k_inf", "k_l1")


def _angular_integral_k(k, x, theta_out, dirs):
    """int k(x, theta', theta_out) d theta' for each row, normalized measure."""
    m = x.shape[0]
    q = len(dirs)
    X = np.repeat(x, q, axis=0)
    To = np.repeat(theta_out, q, axis=0)
    Ti = np.tile(dirs, (m, 1))
    return k(X, Ti, To).reshape(m, q).mean(axis=1)


def _outgoing_integral_k(k, x, theta_in, dirs):
    m = x.shape[0]
    q = len(dirs)
    X = np.repeat(x, q, axis=0)
    Ti = np.repeat(theta_in, q, axis=0)
    To = np.tile(dirs, (m, 1))
    return k(X, Ti, To).reshape(m, q).mean(axis=1)


def norms(pair: CoefficientPair, which: str, n_r: int = 16, n_ang: int = 32,
          n_dirs: int | None = None) -> float:
    """Requested norm of the pair; analytic descriptors short-circuit.

    a_inf: ess-sup |a|; k_inf: ess-sup |k|; k_inf1: sup over (x, theta') of
    int |k| d theta; k_l1: int over x, theta', theta of |k|.
    """
    if which not in NORM_TAGS:
        raise NormError(f"unknown norm {which!r}; expected one of {NORM_TAGS}")
    a, k = pair.a, pair.k
    d = pair.domain
    dim = d.dimension
    if n_dirs is None:
        n_dirs = 32 if dim == 2 else 64
    if which == "a_inf":
        if a.sup_bound is not None:
            return float(a.sup_bound)
        pts, _ = support_samples(d, a.support, n_r, n_ang)
        dirs = direction_nodes(dim, n_dirs)
        X = np.repeat(pts, len(dirs), axis=0)
        T = np.tile(dirs, (len(pts), 1))
        return float(np.max(np.abs(a(X, T))))
    if isinstance(k, ConstantKernel):
        if which in ("k_inf", "k_inf1"):
            return k.value
        vol = (math.pi * d.omega_radius ** 2 if dim == 2
               else 4.0 / 3.0 * math.pi * d.omega_radius ** 3)
        if k.support != "omega":
            vol = math.pi * d.R ** 2 if dim == 2 else 4.0 / 3.0 * math.pi * d.R ** 3
        return k.value * vol
    if which == "k_inf" and k.sup_bound is not None:
        return float(k.sup_bound)
    if which == "k_inf1" and k.inf1_bound is not None:
        return float(k.inf1_bound)
    pts, w = support_samples(d, k.support, n_r, n_ang)
    dirs = direction_nodes(dim, n_dirs)
    if which == "k_inf":
        X = np.repeat(pts, len(dirs) ** 2, axis=0)
        Ti = np.tile(np.repeat(dirs, len(dirs), axis=0), (len(pts), 1))
        To = np.tile(np.tile(dirs, (len(dirs), 1)), (len(pts), 1))
        return float(np.max(np.abs(k(X, Ti, To))))
    absk = _AbsKernel(k)
    if which == "k_inf1":
        X = np.repeat(pts, len(dirs), axis=0)
        Ti = np.tile(dirs, (len(pts), 1))
        return float(np.max(_outgoing_integral_k(absk, X, Ti, dirs)))
    # k_l1
    X = np.repeat(pts, len(dirs), axis=0)
    Ti = np.tile(dirs, (len(pts), 1))
    inner = _outgoing_integral_k(absk, X, Ti, dirs).reshape(len(pts), len(dirs)).mean(axis=1)
    return float(np.sum(inner * w))


class _AbsKernel:
    def __init__(self, k):
        self.k = k

    def __call__(self, x, ti, to):
        return np.abs(self.k(x, ti, to))


@dataclass
class SubcriticalResult:
    criterion: str
    passed: bool
    margin: float

    def __bool__(self):
        return self.passed


def check_subcritical(pair: CoefficientPair, domain: ConvexDomain, criterion: str = "TWO_D",
                      n_samples: int = 10_000) -> SubcriticalResult:
    """Smallness conditions guaranteeing a convergent Neumann series.

    TWO_D: R ||k||_inf < 1/2; CS: sup tau * int k d theta' < 1;
    DL: a - int k d theta' >= 0 (minimum over a dense sample).
    """
    k = pair.k
    if criterion == "TWO_D":
        margin = 0.5 - domain.R * norms(pair, "k_inf")
        return SubcriticalResult(criterion, margin > 0, margin)
    dim = domain.dimension
    n_dirs = 16 if dim == 2 else 32
    n_pts = max(1, n_samples // n_dirs)
    n_r = max(2, int(round((n_pts / 2) ** 0.5)))
    n_ang = max(4, n_pts // n_r)
    if criterion == "CS":
        if isinstance(k, ConstantKernel):
            sup_tau = 2.0 * domain.R if (k.value > 0) else 0.0
            margin = 1.0 - sup_tau * k.value
            return SubcriticalResult(criterion, margin > 0, margin)
        pts, _ = support_samples(domain, k.support, n_r, n_ang)
        dirs = direction_nodes(dim, n_dirs)
        X = np.repeat(pts, len(dirs), axis=0)
        T = np.tile(dirs, (len(pts), 1))
        from .geometry import chord_length
        tau = chord_length(X, T, domain)
        kint = _angular_integral_k(k, X, T, direction_nodes(dim, 2 * n_dirs))
        margin = 1.0 - float(np.max(tau * kint))
        return SubcriticalResult(criterion, margin > 0, margin)
    if criterion == "DL":
        if isinstance(k, ConstantKernel) and isinstance(pair.a, ConstantAttenuation):
            margin = pair.a.value - k.value
            return SubcriticalResult(criterion, margin >= 0, margin)
        pts, _ = support_samples(domain, "omega", n_r, n_ang)
        dirs = direction_nodes(dim, n_dirs)
        X = np.repeat(pts, len(dirs), axis=0)
        T = np.tile(dirs, (len(pts), 1))
        kint = _angular_integral_k(k, X, T, direction_nodes(dim, 2 * n_dirs))
        margin = float(np.min(pair.a(X, T) - kint))
        return SubcriticalResult(criterion, margin >= 0, margin)
    raise ValueError(f"unknown criterion {criterion!r}")


class _ZeroExtendedAttenuation(AttenuationField):
    def __init__(self, base: AttenuationField, domain: ConvexDomain):
        super().__init__(domain, "omega")
        self.base = base
        self.kind = base.kind
        self.direction_independent = base.direction_independent

    def _eval(self, x, theta):
        return self.base._eval(x, theta)

    @property
    def sup_bound(self):
        return self.base.sup_bound

    def describe(self):
        return {**self.base.describe(), "support": "omega"}


class _ZeroExtendedKernel(ScatteringKernel):
    def __init__(self, base: ScatteringKernel, domain: ConvexDomain):
        super().__init__(domain, "omega")
        self.base = base
        self.kind = base.kind
        self.isotropic = base.isotropic

    def _eval(self, x, ti, to):
        return self.base._eval(x, ti, to)

    @property
    def sup_bound(self):
        return self.base.sup_bound

    @property
    def inf1_bound(self):
        return self.base.inf1_bound

    def describe(self):
        return {**self.base.describe(), "support": "omega"}


def zero_extend(pair: CoefficientPair, domain: ConvexDomain) -> CoefficientPair:
    """Extend the pair by zero outside Omega (evaluators vanish for x not in Omega)."""
    a, k = pair.a, pair.k
    if a.support != "omega" or a.domain != domain:
        a = _ZeroExtendedAttenuation(a, domain)
    if k.support != "omega" or k.domain != domain:
        k = _ZeroExtendedKernel(k, domain)
    return replace(pair, a=a, k=k)


def declared_bounds(pair: CoefficientPair):
    """(Sigma, rho) using declared values when present, else measured norms."""
    d = pair.domain
    sigma = pair.sigma if pair.sigma is not None else norms(pair, "a_inf")
    if pair.rho is not None:
        rho = pair.rho
    else:
        rho = norms(pair, "k_inf1" if d.dimension == 3 else "k_inf")
    return float(sigma), float(rho)
