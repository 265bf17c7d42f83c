import importlib.util
from pathlib import Path

import numpy as np
import pytest

from gaugelab import albedo as alb
from gaugelab import kernels
from gaugelab.fields import (CoefficientPair, RadialPolynomialAttenuation, RadialPolynomialKernel,
                             constant_pair)
from gaugelab.geometry import ConvexDomain, build_boundary_grid

try:
    compiled = kernels.get_backend("compiled")
except ImportError:  # pragma: no cover - depends on the build
    compiled = None
python = kernels.get_backend("python")
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled backend not built")


def _bench_module():
    path = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="module")
def asm():
    d = ConvexDomain(2, 2.0, 1.0)
    gi = build_boundary_grid(d, "ball", "incoming", 16, 16)
    go = build_boundary_grid(d, "ball", "outgoing", 16, 16)
    return alb.AlbedoAssembler(constant_pair(0.5, 0.05, d), d, gi, go)


def _same(out_a, out_b, tol=1e-12):
    if isinstance(out_a, np.ndarray):
        out_a, out_b = (out_a,), (out_b,)
    for x, y in zip(out_a, out_b):
        x, y = np.asarray(x), np.asarray(y)
        assert x.shape == y.shape
        assert np.allclose(x, y, rtol=tol, atol=tol)


@needs_compiled
def test_polar_weights_agree():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(5000, 2))
    args = (np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]), 0.125, 8, 32)
    _same(python.polar_weights(*args), compiled.polar_weights(*args))


@needs_compiled
def test_window_points_agree(asm):
    args = kernels._conv(_bench_module().window_inputs(asm, 3000, np.random.default_rng(2)))
    _same(python.window_points(*args), compiled.window_points(*args))


@needs_compiled
def test_single_scatter_block_agrees(asm):
    cols = np.nonzero(asm.active_in_mask)[0][:16]
    pos = asm._act_pos[cols]
    ns = asm._sub_pts.shape[1]
    rows = (pos[:, None] * ns + np.arange(ns)[None, :]).ravel()
    t0, H, n, tab, tau = asm._in_tab
    o0, oH, on, otab, otau = asm._out_tab
    args = kernels._conv((asm._sub_pts.reshape(-1, 2)[rows], asm._sub_dirs.reshape(-1, 2)[rows],
                          tau[rows], tab[rows], t0[rows], H[rows], n[rows],
                          asm.grid_out.points[asm.active_out],
                          asm.grid_out.directions[asm.active_out], otau, otab, o0, oH, on))
    _same(python.single_scatter_block(*args), compiled.single_scatter_block(*args))


@needs_compiled
def test_assembly_identical_under_both_backends(monkeypatch):
    d = ConvexDomain(2, 2.0, 1.0)
    gi = build_boundary_grid(d, "ball", "incoming", 8, 8)
    go = build_boundary_grid(d, "ball", "outgoing", 8, 8)
    pair = CoefficientPair(RadialPolynomialAttenuation([0.5, 0.0, -0.2], d),
                           RadialPolynomialKernel([0.05], d))
    out = {}
    for name, mod in (("python", python), ("compiled", compiled)):
        monkeypatch.setattr(kernels, "_impl", mod)
        out[name] = alb.assemble_albedo(pair, d, gi, go).values
    assert np.max(np.abs(out["python"] - out["compiled"])) <= 1e-12
