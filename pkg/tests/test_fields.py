import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaugelab.fields import (AnalyticAttenuation, CoefficientPair, ConstantAttenuation,
                             ConstantKernel, GridAttenuation, RadialPolynomialKernel,
                             check_subcritical, constant_pair, norms, sample_attenuation,
                             zero_extend)
from gaugelab.geometry import sample_ball, sample_unit_vectors


def test_constant_norms(disk):
    p = constant_pair(0.5, 0.05, disk)
    assert norms(p, "a_inf") == pytest.approx(0.5)
    assert norms(p, "k_inf") == pytest.approx(0.05)
    assert norms(p, "k_inf1") == pytest.approx(0.05)
    assert norms(p, "k_l1") == pytest.approx(0.05 * math.pi, rel=1e-9)


def test_sampled_norms_of_radial_kernel(disk):
    # k = 0.1 (1 - |x|): sup 0.1 at the center, L1 = 0.1 * 2 pi * (1/2 - 1/3)
    k = RadialPolynomialKernel([0.1, -0.1], disk)
    p = CoefficientPair(ConstantAttenuation(0.2, disk), k)
    assert norms(p, "k_inf") == pytest.approx(0.1, rel=2e-2)
    assert norms(p, "k_l1") == pytest.approx(0.1 * 2 * math.pi / 6, rel=1e-2)


def test_support_is_omega(disk):
    a = ConstantAttenuation(0.5, disk)
    k = ConstantKernel(0.05, disk)
    x = np.array([[1.5, 0.0], [0.2, 0.1]])
    th = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(a(x, th), [0.0, 0.5])
    assert np.allclose(k(x, th, th), [0.0, 0.05])


def test_zero_extend_keeps_inside_values(disk, rng):
    ball = AnalyticAttenuation(lambda x, t: 0.3 + 0.1 * x[..., 0], disk, "ball", 0.5, True)
    p = zero_extend(CoefficientPair(ball, ConstantKernel(0.0, disk)), disk)
    x = sample_ball(rng, 500, np.zeros(2), 2.0)
    th = sample_unit_vectors(rng, 500, 2)
    inside = np.linalg.norm(x, axis=1) <= 1.0
    v = p.a(x, th)
    assert np.all(v[~inside] == 0.0)
    assert np.allclose(v[inside], 0.3 + 0.1 * x[inside, 0])


def test_subcritical_examples(disk):
    assert check_subcritical(constant_pair(0.5, 0.0, disk), disk, "TWO_D").margin == \
        pytest.approx(0.5)
    res = check_subcritical(constant_pair(0.5, 0.1, disk), disk, "TWO_D")
    assert res.passed and res.margin == pytest.approx(0.3)
    assert not check_subcritical(constant_pair(0.5, 0.25, disk), disk, "TWO_D").passed
    for crit in ("CS", "DL"):
        assert check_subcritical(constant_pair(0.5, 0.0, disk), disk, crit).passed


def test_cs_fails_for_large_kernel_on_ball():
    from gaugelab.geometry import ConvexDomain
    d = ConvexDomain(3, 2.0, 1.0)
    p = CoefficientPair(ConstantAttenuation(0.0, d, "ball"), ConstantKernel(0.3, d, "ball"))
    # sup tau * int k = 4 * 0.3 > 1
    assert not check_subcritical(p, d, "CS").passed


@given(c0=st.floats(-1, 1), c1=st.floats(-1, 1), c2=st.floats(-1, 1))
def test_grid_attenuation_reproduces_linear_fields(c0, c1, c2):
    from gaugelab.geometry import ConvexDomain
    d = ConvexDomain(2, 2.0, 1.0)
    xs = np.linspace(-1, 1, 9)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = (c0 + c1 * X + c2 * Y)[..., None]
    g = GridAttenuation([-1, -1], [1, 1], vals, d)
    rng = np.random.default_rng(0)
    x = sample_ball(rng, 50, np.zeros(2), 1.0)
    th = sample_unit_vectors(rng, 50, 2)
    assert np.allclose(g(x, th), c0 + c1 * x[:, 0] + c2 * x[:, 1], atol=1e-12)


def test_sample_attenuation_directional(disk, rng):
    a = AnalyticAttenuation(lambda x, t: 0.4 + 0.1 * t[..., 0], disk, "omega", 0.5)
    g = sample_attenuation(a, disk, n_nodes=33, n_modes=1)
    x = sample_ball(rng, 200, np.zeros(2), 0.9)
    th = sample_unit_vectors(rng, 200, 2)
    assert np.max(np.abs(g(x, th) - a(x, th))) <= 1e-10
