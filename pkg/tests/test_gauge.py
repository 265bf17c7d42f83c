import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaugelab import albedo as alb
from gaugelab import gauge as gg
from gaugelab import transport as tr
from gaugelab.fields import constant_pair, declared_bounds
from gaugelab.geometry import (ConvexDomain, build_boundary_grid, min_chord_constant,
                               sample_ball, sample_unit_vectors)


def _nodes(rng, d, n=1000, radius=None):
    x = sample_ball(rng, n, np.zeros(d.dimension), d.R if radius is None else radius)
    return x, sample_unit_vectors(rng, n, d.dimension)


def _sup_gap(p, q, x, th, rng):
    th2 = sample_unit_vectors(rng, len(x), x.shape[1])
    return max(np.max(np.abs(p.a(x, th) - q.a(x, th))),
               np.max(np.abs(p.k(x, th2, th) - q.k(x, th2, th))))


def test_identity_gauge_leaves_pair(disk, rng):
    p = constant_pair(0.5, 0.05, disk)
    q = gg.apply_gauge(gg.identity_gauge(disk), p)
    x, th = _nodes(rng, disk)
    assert _sup_gap(p, q, x, th, rng) == 0.0


@given(amp1=st.floats(-0.5, 0.5), amp2=st.floats(-0.5, 0.5))
def test_group_laws(amp1, amp2):
    d = ConvexDomain(2, 2.0, 1.0)
    rng = np.random.default_rng(3)
    p = constant_pair(0.5, 0.05, d)
    phi = gg.radial_bump_gauge(d, amp1, 2)
    psi = gg.directional_gauge(d, amp2)
    x, th = _nodes(rng, d, 300)
    lhs = gg.apply_gauge(phi, gg.apply_gauge(psi, p))
    rhs = gg.apply_gauge(phi * psi, p)
    assert _sup_gap(lhs, rhs, x, th, rng) <= 1e-9
    back = gg.apply_gauge(phi.inverse(), gg.apply_gauge(phi, p))
    assert _sup_gap(back, p, x, th, rng) <= 1e-9


def test_gauged_attenuation_against_finite_differences(disk, rng):
    amp = 0.3
    psi = gg.radial_bump_gauge(disk, amp, 2)
    q = gg.apply_gauge(psi, constant_pair(0.5, 0.05, disk))
    x, th = _nodes(rng, disk, 1000, 1.0)

    def log_psi(y):
        return amp * np.maximum(1 - np.sum(y * y, axis=1), 0.0) ** 2

    step = 1e-5
    fd = (log_psi(x + step * th) - log_psi(x - step * th)) / (2 * step)
    assert np.max(np.abs(q.a(x, th) - (0.5 - fd))) <= 1e-6


def test_invalid_gauge_is_refused(disk):
    bad = gg.GaugeField(lambda x, t: np.full(x.shape[:-1], np.inf),
                        lambda x, t: np.zeros(x.shape[:-1]), disk)
    with pytest.raises(gg.InvalidGaugeError):
        gg.apply_gauge(bad, constant_pair(0.5, 0.0, disk))


def test_trial_gauge_constant_difference(disk):
    p, q = constant_pair(0.5, 0.0, disk), constant_pair(0.55, 0.0, disk)
    phi = gg.trial_gauge(p.a, q.a, disk, 1e-3)
    v = phi.log(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert v[0] == pytest.approx(-0.1, abs=1e-9)
    assert phi.phi(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))[0] == \
        pytest.approx(math.exp(-0.1), abs=1e-9)
    same = gg.trial_gauge(p.a, p.a, disk, 1e-3)
    x, th = _nodes(np.random.default_rng(0), disk, 100)
    assert np.all(same.log(x, th) == 0.0)


def test_trial_gauge_reproduces_boundary_one_gauge(disk, rng):
    psi = gg.radial_bump_gauge(disk, 0.3, 2)
    p = constant_pair(0.5, 0.05, disk)
    q = gg.apply_gauge(psi, p)
    phi = gg.trial_gauge(p.a, q.a, disk, 1e-3)
    x, th = _nodes(rng, disk, 500)
    assert np.max(np.abs(phi.log(x, th) - psi.log(x, th))) <= 1e-6


def test_corrected_gauge_boundary_values_and_bound(disk, rng):
    p, q = constant_pair(0.5, 0.0, disk), constant_pair(0.6, 0.0, disk)
    phi = gg.trial_gauge(p.a, q.a, disk, 1e-3)
    phit = gg.corrected_gauge(phi, disk)
    ang = rng.uniform(0, 2 * np.pi, 400)
    xb = 2.0 * np.stack([np.cos(ang), np.sin(ang)], 1)
    th = sample_unit_vectors(rng, 400, 2)
    assert np.max(np.abs(phit.log(xb, th))) <= 1e-8
    x, th = _nodes(rng, disk, 500)
    bound = np.max(np.abs(phi.log(x, th))) + np.max(np.abs(gg.exit_log(phi, x, th)))
    assert np.max(np.abs(phit.log(x, th))) <= bound + 1e-12


def test_corrected_gauge_keeps_gauge_with_unit_exit(disk, rng):
    psi = gg.radial_bump_gauge(disk, 0.3, 2)
    phit = gg.corrected_gauge(psi, disk)
    x, th = _nodes(rng, disk, 300)
    assert np.max(np.abs(phit.log(x, th) - psi.log(x, th))) <= 1e-12


@pytest.mark.parametrize("which", ["radial", "directional"])
def test_exact_recovery(disk, which):
    p = constant_pair(0.5, 0.05, disk)
    g = gg.radial_bump_gauge(disk, 0.3, 2) if which == "radial" else \
        gg.directional_gauge(disk, 0.2)
    q = gg.apply_gauge(g, p)
    aligned, _ = gg.aligned_pair(p, q, disk, 1e-3)
    a_gap, k_gap = gg.coefficient_gaps(aligned, q, disk, "star-2D")
    assert a_gap <= 1e-6 and k_gap <= 1e-6


def test_zero_kernel_stays_zero(disk, rng):
    p, q = constant_pair(0.5, 0.0, disk), constant_pair(0.55, 0.0, disk)
    aligned, _ = gg.aligned_pair(p, q, disk, 1e-3)
    x, th = _nodes(rng, disk, 200)
    assert np.all(aligned.k(x, th, th[::-1]) == 0.0)


def test_kernel_on_product_matches_pointwise(disk, rng):
    q = gg.apply_gauge(gg.directional_gauge(disk, 0.2), constant_pair(0.5, 0.05, disk))
    x = sample_ball(rng, 7, np.zeros(2), 1.0)
    dirs = sample_unit_vectors(rng, 5, 2)
    P = gg.kernel_on_product(q.k, x, dirs)
    for p_ in range(7):
        for i in range(5):
            v = q.k(np.repeat(x[p_:p_ + 1], 5, 0), np.repeat(dirs[i:i + 1], 5, 0), dirs)
            assert np.allclose(P[p_, i], v, rtol=1e-13, atol=0)


def test_constant_perturbation_estimate(disk):
    p, q = constant_pair(0.5, 0.0, disk), constant_pair(0.55, 0.0, disk)
    gi = build_boundary_grid(disk, "ball", "incoming", 16, 16)
    go = build_boundary_grid(disk, "ball", "outgoing", 16, 16)
    rep = gg.class_distance(p, q, disk, gi, go, h=1e-3)
    sigma = 0.55
    assert rep.a_gap_inf <= rep.eps * math.exp(2 * 2.0 * sigma) / min_chord_constant(disk)
    assert rep.passed


def test_stability_constant_examples():
    assert gg.stability_constant(0.0, 0.0, 2.0, 1.0, "eq113") == pytest.approx(2 * math.pi)
    c_R = 2 * math.sqrt(3)
    expect = max(math.pi * 2 * math.exp(4) * (1 + 0.2 * math.exp(8)), math.exp(8) / c_R)
    v = gg.stability_constant(1.0, 0.1, 2.0, c_R, "eq113")
    assert v == pytest.approx(expect, rel=1e-12)
    assert v == pytest.approx(2.05e5, rel=5e-3)
    sm = gg.stability_constant(1.0, 0.1, 2.0, c_R, "safe-max")
    assert sm == max(v, gg.stability_constant(1.0, 0.1, 2.0, c_R, "sec5"))
    with pytest.raises(ValueError):
        gg.stability_constant(0.1, 0.1, 0.0, 1.0)
    with pytest.raises(ValueError):
        gg.stability_constant(-0.1, 0.1, 2.0, 1.0)


@given(s=st.floats(0, 2), r=st.floats(0, 1), ds=st.floats(0, 1), dr=st.floats(0, 1))
def test_stability_constant_monotone(s, r, ds, dr):
    for v in ("eq113", "sec5", "safe-max"):
        assert gg.stability_constant(s + ds, r + dr, 2.0, 3.0, v) >= \
            gg.stability_constant(s, r, 2.0, 3.0, v)


def test_broken_path_attenuation_preserved(disk, rng):
    # F with the gauged attenuation against F with its aligned representative
    p = constant_pair(0.5, 0.05, disk)
    q = gg.apply_gauge(gg.radial_bump_gauge(disk, 0.3, 2), p)
    aligned, _ = gg.aligned_pair(q, p, disk, 1e-3)
    n = 300
    ang = rng.uniform(0, 2 * np.pi, n)
    x = 2 * np.stack([np.cos(ang), np.sin(ang)], 1)
    th_in = sample_unit_vectors(rng, n, 2)
    th_in = np.where((np.sum(th_in * x, 1) < 0)[:, None], th_in, -th_in)
    _, tp = tr.travel_times(x, th_in, disk)
    ev = tr.ScatterEvent(x, th_in, rng.uniform(0, 1, n) * tp, sample_unit_vectors(rng, n, 2))
    F, _ = tr.single_scatter_F(ev, q.a, disk, 1e-3)
    Fp, _ = tr.single_scatter_F(ev, aligned.a, disk, 1e-3)
    sigma, _ = declared_bounds(q)
    assert np.max(np.abs(F - Fp)) <= 1e-6
    assert Fp.min() >= math.exp(-4 * disk.R * sigma)


def test_ballistic_strength_gauge_invariant(disk, rng):
    p = constant_pair(0.5, 0.05, disk)
    q = gg.apply_gauge(gg.directional_gauge(disk, 0.2), p)
    ang = rng.uniform(0, 2 * np.pi, 200)
    x = 2 * np.stack([np.cos(ang), np.sin(ang)], 1)
    th = sample_unit_vectors(rng, 200, 2)
    th = np.where((np.sum(th * x, 1) < 0)[:, None], th, -th)
    A = tr.ballistic_A(x, th, p.a, disk, 1e-3)
    B = tr.ballistic_A(x, th, q.a, disk, 1e-3)
    assert np.max(np.abs(A - B)) <= 1e-8


def test_albedo_gauge_invariance_improves(disk):
    p = constant_pair(0.5, 0.05, disk)
    q = gg.apply_gauge(gg.radial_bump_gauge(disk, 0.3, 2), p)
    gaps = []
    for n in (16, 32):
        gi = build_boundary_grid(disk, "ball", "incoming", n, n)
        go = build_boundary_grid(disk, "ball", "outgoing", n, n)
        # fixed sub-line count so that only the grids and the chord step change
        st_ = alb.AssemblySettings(chord_step=2e-3 * 16 / n, n_sub=2)
        dn = alb.difference_norms(alb.AlbedoAssembler(p, disk, gi, go, st_),
                                  alb.AlbedoAssembler(q, disk, gi, go, st_))
        gaps.append(dn.l1)
    assert gaps[1] <= 0.05 and gaps[1] < gaps[0] / 1.5
