import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaugelab import albedo as alb
from gaugelab import extension as ext
from gaugelab.fields import constant_pair


@pytest.fixture(scope="module")
def proj(disk):
    return ext.projection_grids(disk, 16, 32)


def test_pullback_of_callable(disk, proj):
    def f(x, th):
        return x[:, 0] + 10 * x[:, 1] + 100 * th[:, 0]

    Tf = ext.pullback_T(f, proj)
    g = proj.omega_in
    j = np.argmin(np.linalg.norm(g.points - [-1.0, 0.0], axis=1)
                  + np.linalg.norm(g.directions - [1.0, 0.0], axis=1))
    x, th = g.points[j], g.directions[j]
    # straight backtrace to the circle of radius 2
    b = x @ th
    tm = b + math.sqrt(b * b - x @ x + 4.0)
    y = x - tm * th
    assert Tf[j] == pytest.approx(y[0] + 10 * y[1] + 100 * th[0], abs=1e-12)
    assert np.allclose(ext.pullback_T(np.full(proj.outer_in.size, 3.0), proj), 3.0)
    pushed = ext.pushforward_Ttilde(np.full(proj.omega_out.size, 3.0), proj)
    live = proj.outgoing.transported > 0
    assert np.allclose(pushed[live], 3.0) and np.all(pushed[~live] == 0.0)


@given(seed=st.integers(0, 2 ** 32 - 1))
def test_transport_maps_preserve_norms(seed):
    from gaugelab.geometry import ConvexDomain
    d = ConvexDomain(2, 2.0, 1.0)
    P = _PROJ.get("p") or _PROJ.setdefault("p", ext.projection_grids(d, 16, 32))
    rng = np.random.default_rng(seed)
    f = rng.normal(size=P.outer_in.size)
    Tf = ext.pullback_T(f, P)
    mask = P.incoming.transported > 0
    fo = np.where(mask, f, 0.0)
    for p in (1, np.inf):
        lhs = np.sum(P.omega_in.weights * np.abs(Tf)) if p == 1 else np.max(np.abs(Tf))
        assert lhs == pytest.approx(P.norm_outer(fo, "incoming", p), abs=1e-9)
    g = rng.normal(size=P.omega_out.size)
    Tg = ext.pushforward_Ttilde(g, P)
    assert np.sum(P.omega_out.weights * np.abs(g)) == \
        pytest.approx(P.norm_outer(Tg, "outgoing", 1), abs=1e-9)
    assert np.max(np.abs(g)) == pytest.approx(P.norm_outer(Tg, "outgoing", np.inf), abs=1e-12)


_PROJ = {}


def test_coarse_outer_grid_is_refused(disk):
    with pytest.raises(ext.ProjectionError):
        ext.projection_grids(disk, 16, 16)


def test_complement_lines_miss_omega(proj):
    assert proj.complement().size > 0
    assert np.all(proj.complement_lengths() == 0.0)


def test_lifted_free_transport_is_free_transport(disk, proj):
    assert ext.lifted_gap(constant_pair(0.0, 0.0, disk), proj) == 0.0


def test_lifted_difference_identical_and_complement(disk, proj):
    pa, pb = constant_pair(0.5, 0.05, disk), constant_pair(0.55, 0.05, disk)
    dec_a = alb.decompose_kernel(pa, disk, proj.omega_in, proj.omega_out)
    La = ext.lifted_albedo(dec_a, proj)
    assert np.all(La.values - ext.lifted_albedo(dec_a, proj).values == 0.0)
    Lb = ext.lifted_albedo(alb.decompose_kernel(pb, disk, proj.omega_in, proj.omega_out), proj)
    comp = proj.complement("incoming")
    assert np.all((La.values - Lb.values)[:, comp] == 0.0)


def test_lifted_gap_decreases_under_refinement(disk):
    p = constant_pair(0.5, 0.05, disk)
    coarse = ext.lifted_gap(p, ext.projection_grids(disk, 12, 32))
    fine = ext.lifted_gap(p, ext.projection_grids(disk, 24, 48))
    assert fine < coarse


def test_isometry_constant_attenuations(disk, proj):
    pa, pb = constant_pair(0.5, 0.0, disk), constant_pair(0.55, 0.0, disk)
    oracle = math.exp(-1.0) - math.exp(-1.1)
    for mode in ("L1", "star"):
        rep = ext.isometry_check(pa, pb, disk, proj, mode)
        assert rep.norm_omega == pytest.approx(oracle, rel=2e-3)
        assert rep.norm_outer == pytest.approx(oracle, rel=2e-3)
    assert rep.strength_gap <= 1e-10
    same = ext.isometry_check(pa, pa, disk, proj, "L1")
    assert same.norm_omega == same.norm_outer == same.gap == 0.0
