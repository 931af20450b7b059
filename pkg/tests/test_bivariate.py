import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from masked_ntk.bivariate import (
    BivariateMomentParams,
    coupled_moments,
    coupled_standard_moments,
    copula_arcsin_bound,
    copula_endpoint_expression,
    copula_simple_bound,
    bvn_cdf,
    degenerate_relu_second_moment,
    gaussian_copula,
    indicator_joint_gap_bound,
    relu_product_expectation,
)
from masked_ntk.gaussmath import UnivariateGaussian, std_normal_cdf, truncated_second_moment
from masked_ntk.model import derive_rng

from conftest import INV_SQRT2PI, within_se

thr = st.floats(-6.0, 6.0)
corr = st.floats(-0.99, 0.99)

# 2-D adaptive quadrature of the bivariate density
BVN_HALF_GRID = 0.3333333333333332  # (0, 0, 0.5)
COPULA_Q = 0.08329497311894796  # (0.5, -0.2, 0.6)
UPPER_GAP_4_5 = 3.195788432638794e-05  # 1 - Phi2(4, 5, 0)
LOWER_GAP_M4_2 = 3.095071690245378e-05  # Phi2(-4, 2, 0)
# numpy MC, 1e7 draws
COUPLED_MC = (  # a=0.3, b=-0.4, rho=0.5; fields e_z1, e_z2, e_z1sq, e_z2sq, e_z1z2, prob
    [0.3325750291726065, 0.24414832484863974, 0.44745026833480644, 0.3535642939772688,
     0.2889959623470326, 0.3202076],
    [0.00018353314468783603, 0.00017145142718754595, 0.0003478179805089216,
     0.00032629464946785296, 0.00024955774681027207, 0.00014753803396741854],
)
RELU_PROD_MC = (0.14005121872017234, 0.00011997238632383181)  # (0.5, 0.8, -0.2, 1.1, -0.3)
DEGEN_MC = (1.8510336217784498, 0.0009542207329665133)  # (0.7, 1.3)


def test_bvn_values():
    assert bvn_cdf(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-15)
    assert abs(bvn_cdf(0.0, 0.0, 0.5) - BVN_HALF_GRID) <= 1e-12
    assert abs(bvn_cdf(0.0, 0.0, 0.5) - (0.25 + math.asin(0.5) / (2 * math.pi))) <= 1e-14
    assert abs(bvn_cdf(8.0, -0.3, 0.7) - std_normal_cdf(-0.3)) <= 1e-10


def test_bvn_rejects_bad_rho():
    for fn in (bvn_cdf, gaussian_copula, coupled_standard_moments):
        with pytest.raises(ValueError):
            fn(0.0, 0.0, 1.0 + 1e-9)


def test_bvn_infinite_arguments():
    assert bvn_cdf(math.inf, 0.3, 0.4) == std_normal_cdf(0.3)
    assert bvn_cdf(-math.inf, 0.3, 0.4) == 0.0


@given(thr, thr, st.floats(-1.0, 1.0))
def test_bvn_range_and_symmetry(a, b, rho):
    p = bvn_cdf(a, b, rho)
    assert 0.0 <= p <= 1.0
    assert abs(p - bvn_cdf(b, a, rho)) <= 1e-14


@given(thr, thr)
def test_bvn_independence(a, b):
    assert abs(bvn_cdf(a, b, 0.0) - std_normal_cdf(a) * std_normal_cdf(b)) <= 1e-10


@given(thr, corr)
def test_bvn_marginalization(a, rho):
    assert abs(bvn_cdf(a, 40.0, rho) - std_normal_cdf(a)) <= 1e-10


def test_bvn_monotone_on_sampled_triples():
    r = derive_rng(201)
    h = 1e-3
    for _ in range(1000):
        a, b = r.uniform(-4, 4, 2)
        rho = r.uniform(-0.99, 0.99 - h)
        p = bvn_cdf(a, b, rho)
        assert bvn_cdf(a + h, b, rho) >= p - 1e-15
        assert bvn_cdf(a, b + h, rho) >= p - 1e-15
        assert bvn_cdf(a, b, rho + h) >= p - 1e-15


def test_bvn_extreme_correlation():
    assert bvn_cdf(0.2, 0.5, 1.0) == pytest.approx(std_normal_cdf(0.2), abs=1e-15)
    assert bvn_cdf(0.2, 0.5, -1.0) == pytest.approx(std_normal_cdf(0.2) - std_normal_cdf(-0.5), abs=1e-15)


def test_copula_values():
    assert gaussian_copula(0.3, -1.1, 0.0) == 0.0
    assert gaussian_copula(0.0, 0.0, 1.0) == pytest.approx(0.25, abs=1e-15)
    assert abs(gaussian_copula(0.5, -0.2, 0.6) - COPULA_Q) <= 1e-9


def test_copula_bounds_random():
    r = derive_rng(202)
    for _ in range(10**4):
        a, b = r.uniform(-5, 5, 2)
        rho = r.uniform(-0.999, 0.999)
        c = abs(gaussian_copula(a, b, rho))
        assert c <= copula_arcsin_bound(a, b, rho) + 1e-15
        assert c <= copula_simple_bound(a, b, rho) + 1e-15
        assert copula_arcsin_bound(a, b, rho) <= copula_simple_bound(a, b, rho) * (1 + 1e-12)


def test_endpoint_expression_is_not_a_bound():
    # quadrature of the density over r in [0, rho] gives 0.031799361239686644
    a, b, rho = -1.5371250007625772, -0.5634409202559096, 0.6308787568857491
    c = gaussian_copula(a, b, rho)
    assert abs(c - 0.031799361239686644) <= 1e-12
    assert c > copula_endpoint_expression(a, b, rho)
    assert c <= copula_arcsin_bound(a, b, rho)


def test_joint_gap_bound_examples():
    assert indicator_joint_gap_bound(0.0, 0.0) == 2.0
    assert abs(bvn_cdf(0.0, 0.0, 0.0) - 1.0) <= 2.0
    assert indicator_joint_gap_bound(4.0, 5.0) == pytest.approx(2 * math.exp(-8.0), rel=1e-15)
    assert abs(1.0 - bvn_cdf(4.0, 5.0, 0.0) - UPPER_GAP_4_5) <= 1e-13
    assert UPPER_GAP_4_5 <= indicator_joint_gap_bound(4.0, 5.0)
    assert abs(bvn_cdf(-4.0, 2.0, 0.0) - LOWER_GAP_M4_2) <= 1e-13
    assert LOWER_GAP_M4_2 <= indicator_joint_gap_bound(-4.0, 2.0)


def test_joint_gap_bound_random():
    r = derive_rng(203)
    for _ in range(5000):
        a, b = r.uniform(-6, 6, 2)
        rho = r.uniform(-1.0, 1.0)
        gap = abs(bvn_cdf(a, b, rho) - float(a >= 0.0 and b >= 0.0))
        assert gap <= indicator_joint_gap_bound(a, b)


def test_coupled_standard_examples():
    m = coupled_standard_moments(0.0, 0.0, 0.0)
    assert m.e_z1 == pytest.approx(0.5 * INV_SQRT2PI, rel=1e-14)
    assert m.e_z1z2 == pytest.approx(1.0 / (2 * math.pi), rel=1e-14)
    assert coupled_standard_moments(0.0, 0.0, 1.0 - 1e-9).e_z1z2 == pytest.approx(0.5, abs=1e-12)
    got = coupled_standard_moments(0.3, -0.4, 0.5).as_tuple()
    assert within_se(got, *COUPLED_MC)


@given(thr, thr, corr)
def test_coupled_invariants(a, b, rho):
    m = coupled_standard_moments(a, b, rho)
    assert 0.0 <= m.prob <= 1.0
    assert m.e_z1sq >= -1e-15 and m.e_z2sq >= -1e-15
    assert m.e_z1z2**2 <= m.e_z1sq * m.e_z2sq * (1 + 1e-9) + 1e-24


@given(thr, thr, corr)
def test_coupled_swap_symmetry(a, b, rho):
    m = coupled_standard_moments(a, b, rho)
    s = coupled_standard_moments(b, a, rho)
    np.testing.assert_allclose(
        [m.e_z1, m.e_z2, m.e_z1sq, m.e_z2sq, m.e_z1z2, m.prob],
        [s.e_z2, s.e_z1, s.e_z2sq, s.e_z1sq, s.e_z1z2, s.prob], rtol=1e-10, atol=1e-13,
    )


def test_coupled_independent_factorizes():
    m = coupled_standard_moments(0.4, -0.7, 0.0)
    p1, p2 = std_normal_cdf(-0.4), std_normal_cdf(0.7)
    e1 = INV_SQRT2PI * math.exp(-0.08)
    e2 = INV_SQRT2PI * math.exp(-0.245)
    assert m.e_z1 == pytest.approx(e1 * p2, rel=1e-13)
    assert m.e_z1z2 == pytest.approx(e1 * e2, rel=1e-13)
    assert m.e_z1sq == pytest.approx(truncated_second_moment((0.0, 1.0), 0.4) * p2, rel=1e-13)


def test_coupled_continuous_at_degenerate_switch():
    for rho in (1.0 - 1e-7, -(1.0 - 1e-7)):
        inside = np.array(coupled_standard_moments(0.2, -0.1, rho * (1 - 1e-8)).as_tuple())
        limit = np.array(coupled_standard_moments(0.2, -0.1, rho).as_tuple())
        np.testing.assert_allclose(inside, limit, atol=2e-3)


def test_relu_product_examples():
    p0 = BivariateMomentParams(0.0, 1.0, 0.0, 1.0, 0.0)
    assert relu_product_expectation(p0) == pytest.approx(1.0 / (2 * math.pi), rel=1e-14)
    far = BivariateMomentParams(3.0, 0.01, 3.0, 0.01, 0.2)
    assert abs(relu_product_expectation(far) - (9.0 + 0.01 * 0.01 * 0.2)) <= 1e-8
    got = relu_product_expectation(BivariateMomentParams(0.5, 0.8, -0.2, 1.1, -0.3))
    assert within_se(got, *RELU_PROD_MC)


@given(st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3), corr, thr, thr)
def test_relu_product_swap(mu1, k1, mu2, k2, rho, a, b):
    p = relu_product_expectation(BivariateMomentParams(mu1, k1, mu2, k2, rho, a, b))
    q = relu_product_expectation(BivariateMomentParams(mu2, k2, mu1, k1, rho, b, a))
    assert abs(p - q) <= 1e-10 * (1.0 + abs(p))


@given(st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3), corr, thr, thr)
def test_general_moments_standardize(mu1, k1, mu2, k2, rho, a, b):
    g = coupled_moments(BivariateMomentParams(mu1, k1, mu2, k2, rho, a, b))
    s = coupled_standard_moments((a - mu1) / k1, (b - mu2) / k2, rho)
    assert g.prob == s.prob
    assert abs(g.e_z1 - (mu1 * s.prob + k1 * s.e_z1)) <= 1e-12 * (1 + abs(g.e_z1))


def test_relu_product_meets_degenerate_branch():
    for mu, k in ((0.3, 1.0), (-0.5, 0.7), (1.2, 2.0)):
        deg = degenerate_relu_second_moment(UnivariateGaussian(mu, k))
        near = relu_product_expectation(BivariateMomentParams(mu, k, mu, k, 1.0 - 1e-6))
        assert abs(near - deg) <= 1e-4
        # rho -> -1 with mirrored means pairs z with -z: product of relus vanishes
        anti = relu_product_expectation(BivariateMomentParams(mu, k, -mu, k, -(1.0 - 1e-6)))
        assert abs(anti) <= 1e-4


def test_degenerate_second_moment():
    assert degenerate_relu_second_moment((0.0, 1.0)) == pytest.approx(0.5, rel=1e-15)
    assert degenerate_relu_second_moment((5.0, 0.01)) == pytest.approx(25.0001, rel=1e-12)
    assert within_se(degenerate_relu_second_moment((0.7, 1.3)), *DEGEN_MC)
    with pytest.raises(ValueError):
        degenerate_relu_second_moment((0.0, 0.0))


def test_params_validation():
    with pytest.raises(ValueError):
        BivariateMomentParams(0.0, 0.0, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        BivariateMomentParams(0.0, 1.0, 0.0, 1.0, 1.5)
