"""Command line harness: JSON configs, invariant suite, perturbation sweeps and
matrix export.

Exit codes: 0 all checks pass, 1 a check failed (including refusal of a
supercritical configuration), 2 the configuration could not be parsed or
validated.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import albedo as alb
from . import extension as ext
from . import formats
from . import gauge as gg
from .fields import (AnalyticAttenuation, CoefficientPair, ConstantAttenuation, ConstantKernel,
                     RadialPolynomialAttenuation, RadialPolynomialKernel,
                     norms)
from .geometry import ConvexDomain, DomainError, build_boundary_grid, sample_ball
from .transport import (SubcriticalError, contraction_bound, measured_contraction,
                        phase_grid_for, require_subcritical)

log = logging.getLogger("gaugelab")

SCHEMA_VERSION = "gaugelab.config/1"
CSV_COLUMNS = ["delta", "eps", "a_gap_inf", "k_gap", "C_eq113", "C_sec5", "bound_pass",
               "n_boundary", "n_theta", "wall_ms"]

_ATT = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "radial_polynomial", "grid"]},
        "value": {"type": "number", "minimum": 0},
        "coeffs": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "path": {"type": "string"},
        "support": {"enum": ["omega", "ball"]},
    },
    "additionalProperties": False,
}
_KER = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["constant", "radial_polynomial"]},
        "value": {"type": "number", "minimum": 0},
        "coeffs": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "support": {"enum": ["omega", "ball"]},
    },
    "additionalProperties": False,
}
_PAIR = {
    "type": "object",
    "required": ["a", "k"],
    "properties": {
        "a": _ATT,
        "k": _KER,
        "sigma": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema", "dimension", "domain", "grids", "pair_a"],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "dimension": {"enum": [2, 3]},
        "domain": {
            "type": "object",
            "required": ["R", "omega_radius"],
            "properties": {
                "R": {"type": "number", "exclusiveMinimum": 0},
                "omega_radius": {"type": "number", "exclusiveMinimum": 0},
                "omega_center": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "grids": {
            "type": "object",
            "required": ["n_boundary", "n_theta"],
            "properties": {
                "n_boundary": {"type": "integer", "minimum": 2},
                "n_theta": {"type": "integer", "minimum": 2},
                "n_radial": {"type": "integer", "minimum": 2},
                "chord_step": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "pair_a": _PAIR,
        "pair_b": _PAIR,
        "gauge": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["identity", "radial_bump", "directional"]},
                "amplitude": {"type": "number"},
                "power": {"type": "integer", "minimum": 1},
                "axis": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "experiment": {
            "type": "object",
            "properties": {
                "sweep": {
                    "type": "object",
                    "properties": {
                        "deltas": {"type": "array", "items": {"type": "number", "minimum": 0},
                                   "minItems": 1},
                        "slack": {"type": "number", "minimum": 0},
                        "mode": {"enum": ["star-2D", "L1-2D", "L1-3D"]},
                    },
                    "additionalProperties": False,
                },
                "suite": {
                    "type": "object",
                    "properties": {
                        "n_random_pairs": {"type": "integer", "minimum": 1},
                        "n_probe_bins": {"type": "integer", "minimum": 1},
                        "k_scaling": {"type": "array", "items": {"type": "number",
                                                                 "exclusiveMinimum": 0},
                                      "minItems": 2},
                        "isometry_outer": {"type": "integer", "minimum": 4},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """Configuration could not be parsed or validated (exit code 2)."""


class CheckFailure(RuntimeError):
    """A suite check or sweep bound failed (exit code 1)."""


def default_config() -> dict:
    text = resources.files("gaugelab").joinpath("configs/default_2d.json").read_text()
    return json.loads(text)


def validate_config(cfg: dict) -> dict:
    """Schema and semantic validation; returns the config unchanged."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    dom = cfg["domain"]
    c = dom.get("omega_center")
    if c is not None and len(c) != cfg["dimension"]:
        raise ConfigError("domain.omega_center must have one entry per dimension")
    try:
        domain = build_domain(cfg)
    except DomainError as exc:
        raise ConfigError(f"invalid domain: {exc}") from None
    for key in ("pair_a", "pair_b"):
        if key not in cfg:
            continue
        for part, schema_kind in (("a", "attenuation"), ("k", "kernel")):
            d = cfg[key][part]
            if d["kind"] == "constant" and "value" not in d:
                raise ConfigError(f"{key}.{part}: constant {schema_kind} needs 'value'")
            if d["kind"] == "radial_polynomial" and "coeffs" not in d:
                raise ConfigError(f"{key}.{part}: radial_polynomial needs 'coeffs'")
            if d["kind"] == "grid" and "path" not in d:
                raise ConfigError(f"{key}.{part}: grid attenuation needs 'path'")
        pair = build_pair(cfg, key, domain)
        # declared class bounds must dominate the descriptors
        if cfg[key].get("sigma") is not None:
            if norms(pair, "a_inf") > cfg[key]["sigma"] * (1 + 1e-9) + 1e-12:
                raise ConfigError(f"{key}.sigma is smaller than sup a")
        if cfg[key].get("rho") is not None:
            tag = "k_inf1" if domain.dimension == 3 else "k_inf"
            if norms(pair, tag) > cfg[key]["rho"] * (1 + 1e-9) + 1e-12:
                raise ConfigError(f"{key}.rho is smaller than the kernel norm")
        if norms(pair, "a_inf") < -1e-12:
            raise ConfigError(f"{key}: attenuation must be non-negative")
    return cfg


def load_config(path) -> dict:
    """Read and validate a JSON config; missing optional sections take the
    shipped defaults."""
    if path is None:
        return validate_config(default_config())
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return validate_config(cfg)


# ---------------------------------------------------------------------------
# builders

def build_domain(cfg: dict) -> ConvexDomain:
    d = cfg["domain"]
    return ConvexDomain(cfg["dimension"], float(d["R"]), float(d["omega_radius"]),
                        tuple(d["omega_center"]) if d.get("omega_center") else None)


def _attenuation(desc: dict, domain: ConvexDomain, base_dir: Path | None = None):
    sup = desc.get("support", "omega")
    if desc["kind"] == "constant":
        return ConstantAttenuation(desc["value"], domain, sup)
    if desc["kind"] == "radial_polynomial":
        return RadialPolynomialAttenuation(desc["coeffs"], domain, sup)
    path = Path(desc["path"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    a = formats.load_grid_attenuation(path, domain)
    a.support = sup
    return a


def _kernel(desc: dict, domain: ConvexDomain):
    sup = desc.get("support", "omega")
    if desc["kind"] == "constant":
        return ConstantKernel(desc["value"], domain, sup)
    return RadialPolynomialKernel(desc["coeffs"], domain, sup)


def build_pair(cfg: dict, key: str, domain: ConvexDomain | None = None) -> CoefficientPair:
    domain = domain or build_domain(cfg)
    d = cfg[key]
    return CoefficientPair(_attenuation(d["a"], domain), _kernel(d["k"], domain),
                           d.get("sigma"), d.get("rho"), {"name": key})


def build_gauge(cfg: dict, domain: ConvexDomain) -> gg.GaugeField:
    g = cfg.get("gauge") or {"kind": "radial_bump"}
    if g["kind"] == "identity":
        return gg.identity_gauge(domain)
    if g["kind"] == "radial_bump":
        return gg.radial_bump_gauge(domain, g.get("amplitude", 0.3), g.get("power", 2))
    return gg.directional_gauge(domain, g.get("amplitude", 0.2), g.get("axis"))


def build_grids(cfg: dict, domain: ConvexDomain, boundary: str = "ball"):
    g = cfg["grids"]
    return (build_boundary_grid(domain, boundary, "incoming", g["n_boundary"], g["n_theta"]),
            build_boundary_grid(domain, boundary, "outgoing", g["n_boundary"], g["n_theta"]))


def build_settings(cfg: dict, threads: int = 1, orders: str | None = None
                   ) -> alb.AssemblySettings:
    g = cfg["grids"]
    if orders is None:
        orders = "single" if cfg["dimension"] == 3 else "full"
    return alb.AssemblySettings(chord_step=g.get("chord_step"), n_radial=g.get("n_radial"),
                                orders=orders, threads=max(1, int(threads)))


def shifted_pair(pair: CoefficientPair, delta: float) -> CoefficientPair:
    """Same kernel, attenuation raised by delta on its support."""
    a = pair.a
    if isinstance(a, ConstantAttenuation):
        a2 = ConstantAttenuation(a.value + delta, a.domain, a.support)
    else:
        sup = a.sup_bound
        a2 = AnalyticAttenuation(lambda x, t, _a=a: _a(x, t) + delta, a.domain, a.support,
                                 None if sup is None else sup + delta,
                                 getattr(a, "direction_independent", False), f"shift {delta}")
    sig = None if pair.sigma is None else pair.sigma + delta
    return CoefficientPair(a2, pair.k, sig, pair.rho, {**pair.meta, "delta": delta})


# ---------------------------------------------------------------------------
# sweep

def sweep_rows(cfg: dict, threads: int = 1) -> list[dict]:
    """One row per perturbation delta: pair_a against pair_a with a + delta."""
    domain = build_domain(cfg)
    pair = build_pair(cfg, "pair_a", domain)
    sw = cfg.get("experiment", {}).get("sweep", {})
    deltas = sw.get("deltas", [0.0, 0.01, 0.02, 0.05, 0.1])
    slack = sw.get("slack", 1e-9)
    mode = sw.get("mode")
    gi, go = build_grids(cfg, domain)
    settings = build_settings(cfg, threads)
    h = cfg["grids"].get("chord_step")
    rows = []
    for delta in deltas:
        t0 = time.perf_counter()
        other = shifted_pair(pair, float(delta))
        rep = gg.class_distance(pair, other, domain, gi, go, mode, settings, h, slack,
                                threads=threads)
        rows.append({"delta": float(delta), "eps": rep.eps, "a_gap_inf": rep.a_gap_inf,
                     "k_gap": rep.k_gap, "C_eq113": rep.C_eq113, "C_sec5": rep.C_sec5,
                     "bound_pass": bool(rep.passed), "n_boundary": gi.n_b,
                     "n_theta": gi.n_theta,
                     "wall_ms": int(round(1000 * (time.perf_counter() - t0)))})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def run_sweep(cfg: dict, out_dir: Path, threads: int = 1) -> int:
    rows = sweep_rows(cfg, threads)
    path = out_dir / "sweep.csv"
    path.write_text(rows_to_csv(rows))
    for r in rows:
        print(f"delta={r['delta']:g} eps={r['eps']:.6g} a_gap={r['a_gap_inf']:.3g} "
              f"k_gap={r['k_gap']:.3g} bound={'pass' if r['bound_pass'] else 'FAIL'}")
    print(f"wrote {path}")
    return 0 if all(r["bound_pass"] for r in rows) else 1


# ---------------------------------------------------------------------------
# suite

def _check(name, measured, threshold, passed, **extra):
    log.info("check %s done", name)
    return {"name": name, "measured": float(measured), "threshold": float(threshold),
            "pass": bool(passed), **extra}


def _a_gap(p, q, domain, rng, n=2000):
    x = sample_ball(rng, n, domain.center, domain.omega_radius)
    th = rng.normal(size=x.shape)
    th /= np.linalg.norm(th, axis=1, keepdims=True)
    return float(np.max(np.abs(p.a(x, th) - q.a(x, th))))


def _k_gap(p, q, domain, rng, n=2000):
    x = sample_ball(rng, n, domain.center, domain.omega_radius)
    ti = rng.normal(size=x.shape)
    ti /= np.linalg.norm(ti, axis=1, keepdims=True)
    to = rng.normal(size=x.shape)
    to /= np.linalg.norm(to, axis=1, keepdims=True)
    return float(np.max(np.abs(p.k(x, ti, to) - q.k(x, ti, to))))


def suite_checks(cfg: dict, rng: np.random.Generator, threads: int = 1) -> list[dict]:
    """Invariant checks of all modules on the configured problem."""
    domain = build_domain(cfg)
    pair = build_pair(cfg, "pair_a", domain)
    # refuse supercritical problems before anything else
    if domain.dimension == 2:
        require_subcritical(pair, domain)
    phi = build_gauge(cfg, domain)
    st = cfg.get("experiment", {}).get("suite", {})
    settings = build_settings(cfg, threads)
    gi, go = build_grids(cfg, domain)
    h = cfg["grids"].get("chord_step") or domain.R / 1000
    checks = []

    # gauge group laws
    psi = gg.radial_bump_gauge(domain, 0.2, 2)
    ident = gg.apply_gauge(gg.identity_gauge(domain), pair)
    checks.append(_check("gauge_identity", _a_gap(ident, pair, domain, rng), 1e-12,
                         _a_gap(ident, pair, domain, rng) <= 1e-12))
    p1 = gg.apply_gauge(psi, gg.apply_gauge(phi, pair))
    p2 = gg.apply_gauge(phi * psi, pair)
    m = max(_a_gap(p1, p2, domain, rng), _k_gap(p1, p2, domain, rng))
    checks.append(_check("gauge_composition", m, 1e-9, m <= 1e-9))
    back = gg.apply_gauge(phi.inverse(), gg.apply_gauge(phi, pair))
    m = max(_a_gap(back, pair, domain, rng), _k_gap(back, pair, domain, rng))
    checks.append(_check("gauge_inverse", m, 1e-9, m <= 1e-9))

    # gauge invariance of the albedo operator
    gauged = gg.apply_gauge(phi, pair)
    dn = alb.difference_norms(alb.AlbedoAssembler(pair, domain, gi, go, settings),
                              alb.AlbedoAssembler(gauged, domain, gi, go, settings), threads)
    checks.append(_check("albedo_gauge_invariance", dn.l1, 0.05, dn.l1 <= 0.05))

    # exact recovery of a gauge-generated pair
    aligned, _ = gg.aligned_pair(pair, gauged, domain, h)
    mode = "L1-3D" if domain.dimension == 3 else "star-2D"
    a_gap, k_gap = gg.coefficient_gaps(aligned, gauged, domain, mode)
    checks.append(_check("exact_recovery_a", a_gap, 1e-6, a_gap <= 1e-6))
    checks.append(_check("exact_recovery_k", k_gap, 1e-6, k_gap <= 1e-6))

    if domain.dimension == 2:
        # contraction of M on random admissible pairs
        pg = phase_grid_for(domain, 8, 32, 32)
        worst = 0.0
        for _ in range(st.get("n_random_pairs", 5)):
            a0 = rng.uniform(0.0, 1.0)
            k0 = rng.uniform(0.0, 0.24 / domain.R)
            rp = CoefficientPair(RadialPolynomialAttenuation([a0, 0.2 * a0], domain),
                                 RadialPolynomialKernel([k0, -0.5 * k0], domain))
            meas = measured_contraction(rp, domain, pg, rng=rng, n_random=3)
            worst = max(worst, meas / contraction_bound(rp, domain))
        checks.append(_check("contraction_ratio", worst, 1.0, worst <= 1.0))

        # probe extraction against the measured operator gap
        if "pair_b" in cfg:
            other = build_pair(cfg, "pair_b", domain)
            asm_a = alb.AlbedoAssembler(pair, domain, gi, go, settings)
            asm_b = alb.AlbedoAssembler(other, domain, gi, go, settings)
            A = asm_a.assemble()
            B = asm_b.assemble()
            eps = alb.op_norm(A - B, "L1")
            probe_w = 2 * max(gi.meta["d_alpha"], gi.meta["d_s"])
            live = np.nonzero((asm_a.exit_index >= 0) & (gi.weights > 0))[0]
            n_pb = min(st.get("n_probe_bins", 40), live.size)
            bins = rng.choice(live, n_pb, replace=False)
            ea, eb = alb.probe_extraction(A, B, asm_a.exit_index, bins, probe_w)
            worst = float(np.max(np.abs(ea - eb) - eps))
            checks.append(_check("probe_extraction", worst, 0.01, worst <= 0.01, eps=eps))

        # remainder scaling with the kernel size
        kvals = st.get("k_scaling", [0.01, 0.02, 0.04])
        a0 = pair.a.value if isinstance(pair.a, ConstantAttenuation) else 0.5
        _, slope = alb.remainder_scaling(a0, kvals, domain, gi, go, settings)
        checks.append(_check("remainder_slope_deviation", abs(slope - 2.0), 0.2,
                             abs(slope - 2.0) <= 0.2, slope=slope))

        # isometry between the Omega and outer boundary formulations
        if "pair_b" in cfg:
            n_outer = st.get("isometry_outer", 2 * gi.n_b)
            other = build_pair(cfg, "pair_b", domain)
            rep = isometry_with_tolerance(pair, other, domain, gi.n_b, n_outer,
                                          alb.AssemblySettings(chord_step=settings.chord_step),
                                          threads)
            checks.append(_check("isometry_gap", rep.gap, rep.tolerance, rep.passed,
                                 norm_omega=rep.norm_omega, norm_outer=rep.norm_outer))
    return checks


def isometry_with_tolerance(pair_a, pair_b, domain, n_omega, n_outer, settings=None,
                            threads=1, mode="L1"):
    """Isometry check whose tolerance is twice the combined grid-refinement
    change of the two norms.

    Two refinement steps are measured: boundary position cells halved with the
    direction cells kept, and direction cells doubled with the position cells
    kept (halving the direction cells instead would leave the projection
    unresolved).  The larger combined change is used.
    """
    fine = ext.projection_grids(domain, n_omega, n_outer)
    rep = ext.isometry_check(pair_a, pair_b, domain, fine, mode, settings, threads=threads)
    variants = {
        "coarse_position": ext.projection_grids(domain, max(4, n_omega // 2),
                                                max(4, n_outer // 2),
                                                n_theta_omega=n_omega, n_theta_outer=n_outer),
        "fine_direction": ext.projection_grids(domain, n_omega, n_outer,
                                               n_theta_omega=2 * n_omega,
                                               n_theta_outer=2 * n_outer),
    }
    tol = 0.0
    extra = dict(rep.extra or {})
    for name, grids in variants.items():
        rc = ext.isometry_check(pair_a, pair_b, domain, grids, mode, settings, threads=threads)
        tol = max(tol, abs(rep.norm_omega - rc.norm_omega) + abs(rep.norm_outer - rc.norm_outer))
        extra[f"{name}_omega"] = rc.norm_omega
        extra[f"{name}_outer"] = rc.norm_outer
    rep.tolerance = 2.0 * tol + 1e-12
    rep.extra = extra
    return rep


def run_suite(cfg: dict, out_dir: Path, rng, threads: int = 1) -> int:
    checks = suite_checks(cfg, rng, threads)
    path = out_dir / "suite_report.json"
    path.write_text(json.dumps({"schema": SCHEMA_VERSION, "checks": checks}, indent=2) + "\n")
    for c in checks:
        flag = "PASS" if c["pass"] else "FAIL"
        print(f"{flag} {c['name']}: measured={c['measured']:.4g} threshold={c['threshold']:.4g}")
    print(f"wrote {path}")
    return 0 if all(c["pass"] for c in checks) else 1


# ---------------------------------------------------------------------------
# other subcommands

def run_albedo(cfg, out_dir: Path, threads: int = 1, which: str = "full") -> int:
    domain = build_domain(cfg)
    pair = build_pair(cfg, "pair_a", domain)
    gi, go = build_grids(cfg, domain)
    settings = build_settings(cfg, threads)
    if which == "full":
        A = alb.assemble_albedo(pair, domain, gi, go, settings)
        path = formats.save_albedo_matrix(out_dir / "albedo_full.bin", A,
                                          {"which": "full", "pair": pair.describe()})
        print(f"wrote {path} ({A.shape[0]}x{A.shape[1]})")
        return 0
    return run_decompose(cfg, out_dir, threads, [which])


def run_decompose(cfg, out_dir: Path, threads: int = 1, parts=None) -> int:
    domain = build_domain(cfg)
    pair = build_pair(cfg, "pair_a", domain)
    gi, go = build_grids(cfg, domain)
    dec = alb.decompose_kernel(pair, domain, gi, go, settings=build_settings(cfg, threads))
    mats = {"ballistic": dec.ballistic_matrix(), "single": dec.single,
            "remainder": dec.remainder}
    for name in parts or ["ballistic", "single", "remainder"]:
        A = alb.AlbedoMatrix(mats[name], gi, go, {"which": name})
        path = formats.save_albedo_matrix(out_dir / f"albedo_{name}.bin", A,
                                          {"which": name, "pair": pair.describe()})
        print(f"wrote {path}")
    return 0


def run_gauge_align(cfg, out_dir: Path, n_field: int = 33) -> int:
    domain = build_domain(cfg)
    pair = build_pair(cfg, "pair_a", domain)
    target = build_pair(cfg, "pair_b", domain) if "pair_b" in cfg \
        else gg.apply_gauge(build_gauge(cfg, domain), pair)
    h = cfg["grids"].get("chord_step")
    aligned, phi = gg.aligned_pair(pair, target, domain, h)
    mode = "L1-3D" if domain.dimension == 3 else "star-2D"
    a_gap, k_gap = gg.coefficient_gaps(aligned, target, domain, mode)
    report = {"a_gap_inf": a_gap, "k_gap": k_gap, "mode": mode}
    (out_dir / "gauge_align.json").write_text(json.dumps(report, indent=2) + "\n")
    if domain.dimension == 2:
        # log of the corrected gauge on a Cartesian grid times 16 directions
        xs = np.linspace(-domain.R, domain.R, n_field)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        ang = 2 * np.pi * np.arange(16) / 16
        pts = np.stack([X.ravel(), Y.ravel()], -1)
        inside = np.sum(pts ** 2, axis=-1) < domain.R ** 2
        vals = np.zeros((pts.shape[0], ang.size))
        for i, t in enumerate(ang):
            th = np.broadcast_to([np.cos(t), np.sin(t)], pts[inside].shape)
            # the gauge is 1 outside the ball
            vals[inside, i] = phi.log(pts[inside], th)
        formats.write_field(out_dir / "gauge_log.bin", vals.reshape(n_field, n_field, ang.size),
                            {"quantity": "log corrected gauge",
                             "axes": ["x", "y", "direction angle"],
                             "x": [-domain.R, domain.R], "y": [-domain.R, domain.R],
                             "angles": ang.tolist()})
    print(f"a_gap_inf={a_gap:.3g} k_gap={k_gap:.3g}")
    return 0


def run_distance(cfg, out_dir: Path, threads: int = 1) -> int:
    domain = build_domain(cfg)
    if "pair_b" not in cfg:
        raise ConfigError("distance needs pair_b")
    pa, pb = build_pair(cfg, "pair_a", domain), build_pair(cfg, "pair_b", domain)
    gi, go = build_grids(cfg, domain)
    slack = cfg.get("experiment", {}).get("sweep", {}).get("slack", 1e-9)
    rep = gg.class_distance(pa, pb, domain, gi, go, None, build_settings(cfg, threads),
                            cfg["grids"].get("chord_step"), slack, threads=threads)
    (out_dir / "distance.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    print(f"eps={rep.eps:.6g} a_gap={rep.a_gap_inf:.3g} k_gap={rep.k_gap:.3g} "
          f"C={rep.C:.4g} bound={'pass' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def run_isometry(cfg, out_dir: Path, threads: int = 1) -> int:
    domain = build_domain(cfg)
    if "pair_b" not in cfg:
        raise ConfigError("isometry needs pair_b")
    pa, pb = build_pair(cfg, "pair_a", domain), build_pair(cfg, "pair_b", domain)
    n = cfg["grids"]["n_boundary"]
    n_outer = cfg.get("experiment", {}).get("suite", {}).get("isometry_outer", 2 * n)
    reports = [isometry_with_tolerance(pa, pb, domain, n, n_outer,
                                       alb.AssemblySettings(chord_step=cfg["grids"].get(
                                           "chord_step")), threads, mode)
               for mode in (["L1", "star"] if domain.dimension == 2 else ["L1"])]
    (out_dir / "isometry.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    for r in reports:
        print(f"{r.mode}: omega={r.norm_omega:.6g} outer={r.norm_outer:.6g} gap={r.gap:.3g} "
              f"tol={r.tolerance:.3g} {'pass' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in reports) else 1


# ---------------------------------------------------------------------------
# entry point

def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: ./out)")
    common.add_argument("--threads", metavar="N", type=_positive, default=1,
                        help="worker threads for column assembly")
    common.add_argument("--seed", metavar="U64", type=_u64, default=0,
                        help="seed for randomized checks")
    p = argparse.ArgumentParser(prog="gaugelab", parents=[common],
                                description="Albedo operators, gauges and stability checks.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("suite", parents=[common], help="run the invariant suite")
    sub.add_parser("sweep", parents=[common], help="perturbation sweep to CSV")
    a = sub.add_parser("albedo", parents=[common], help="assemble and export an albedo matrix")
    a.add_argument("--which", choices=["full", "ballistic", "single", "remainder"],
                   default="full")
    sub.add_parser("decompose", parents=[common], help="export the kernel decomposition")
    sub.add_parser("gauge-align", parents=[common], help="align pair_a to pair_b")
    sub.add_parser("distance", parents=[common], help="class distance report")
    sub.add_parser("isometry", parents=[common], help="Omega versus outer-ball norms")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out or cfg.get("output_dir") or "out")
    if args.config and cfg.get("output_dir") and not Path(cfg["output_dir"]).is_absolute() \
            and not args.out:
        out_dir = Path(args.config).parent / cfg["output_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    try:
        if args.command == "suite":
            return run_suite(cfg, out_dir, rng, args.threads)
        if args.command == "sweep":
            return run_sweep(cfg, out_dir, args.threads)
        if args.command == "albedo":
            return run_albedo(cfg, out_dir, args.threads, args.which)
        if args.command == "decompose":
            return run_decompose(cfg, out_dir, args.threads)
        if args.command == "gauge-align":
            return run_gauge_align(cfg, out_dir)
        if args.command == "distance":
            return run_distance(cfg, out_dir, args.threads)
        if args.command == "isometry":
            return run_isometry(cfg, out_dir, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ext.ProjectionError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SubcriticalError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
