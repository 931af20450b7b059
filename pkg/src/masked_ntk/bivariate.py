"""Bivariate normal CDF, Gaussian copula and coupled truncated moments.

Moments are of a correlated pair restricted to the quadrant
{z1 >= a, z2 >= b}. The standard-pair closed forms are the workhorse; the
general-mean versions are affine compositions of them.
"""
import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .gaussmath import INV_SQRT2PI, UnivariateGaussian, phi1, trunc_second

EPS_RHO = 1e-7
TWO_PI = 2.0 * math.pi
# thresholds are clamped so that a*exp(-a^2/2) never meets inf*0
_THRESH_CAP = 1e100

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


@dataclass(frozen=True)
class BivariateMomentParams:
    mu1: float
    kappa1: float
    mu2: float
    kappa2: float
    rho: float
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if not (self.kappa1 > 0.0 and self.kappa2 > 0.0):
            raise ValueError("kappa1 and kappa2 must be positive")
        if not abs(self.rho) <= 1.0:
            raise ValueError(f"|rho| must be <= 1, got {self.rho}")


@dataclass(frozen=True)
class CoupledMoments:
    e_z1: float
    e_z2: float
    e_z1sq: float
    e_z2sq: float
    e_z1z2: float
    prob: float

    def as_tuple(self):
        return (self.e_z1, self.e_z2, self.e_z1sq, self.e_z2sq, self.e_z1z2, self.prob)


@njit
def _bvn_upper(h, k, r, nodes, weights):
    """P(X > h, Y > k) for standard X, Y with correlation r (Genz's BVND scheme)."""
    hk = h * k
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = math.asin(r)
        acc = 0.0
        for i in range(nodes.size):
            sn = math.sin(0.5 * asr * (nodes[i] + 1.0))
            acc += weights[i] * math.exp((sn * hk - hs) / (1.0 - sn * sn))
        return acc * asr / (2.0 * TWO_PI) + phi1(-h) * phi1(-k)
    if r < 0.0:
        k = -k
        hk = -hk
    bvn = 0.0
    if abs(r) < 1.0:
        as_ = (1.0 - r) * (1.0 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        bvn = a * math.exp(-0.5 * (bs / as_ + hk)) * (
            1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0
        )
        if hk > -160.0:
            b = math.sqrt(bs)
            bvn -= (
                math.exp(-0.5 * hk) * math.sqrt(TWO_PI) * phi1(-b / a) * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
            )
        a = 0.5 * a
        for i in range(nodes.size):
            xs = (a * (nodes[i] + 1.0)) ** 2
            rs = math.sqrt(1.0 - xs)
            bvn += a * weights[i] * math.exp(-0.5 * (bs / xs + hk)) * (
                math.exp(-hk * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs - (1.0 + c * xs * (1.0 + d * xs))
            )
        bvn = -bvn / TWO_PI
    if r > 0.0:
        bvn += phi1(-max(h, k))
    else:
        bvn = -bvn
        if k > h:
            if h < 0.0:
                bvn += phi1(k) - phi1(h)
            else:
                bvn += phi1(-h) - phi1(-k)
    return bvn


@njit
def bvn(a, b, rho):
    """Phi_2(a, b, rho) = P(X <= a, Y <= b)."""
    if a == -math.inf or b == -math.inf:
        return 0.0
    if a == math.inf:
        return phi1(b)
    if b == math.inf:
        return phi1(a)
    v = _bvn_upper(-a, -b, rho, _GL_NODES, _GL_WEIGHTS)
    return min(1.0, max(0.0, v))


@njit
def _clamp_thresh(t):
    return min(_THRESH_CAP, max(-_THRESH_CAP, t))


@njit
def _degenerate_moments(a, b, rho):
    # rho = +1: z2 = z1, quadrant is z1 >= max(a, b)
    if rho > 0.0:
        t = max(a, b)
        p = phi1(-t)
        e1 = INV_SQRT2PI * math.exp(-0.5 * t * t)
        e2sq = trunc_second(0.0, 1.0, t)
        return e1, e1, e2sq, e2sq, e2sq, p
    # rho = -1: z2 = -z1, quadrant is a <= z1 <= -b
    if a > -b:
        return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    p = max(0.0, phi1(-b) - phi1(a))
    e1 = INV_SQRT2PI * (math.exp(-0.5 * a * a) - math.exp(-0.5 * b * b))
    sq = trunc_second(0.0, 1.0, a) - trunc_second(0.0, 1.0, -b)
    return e1, -e1, sq, sq, -sq, p


@njit
def standard_moments(a, b, rho):
    """(e_z1, e_z2, e_z1sq, e_z2sq, e_z1z2, prob) for a standard pair on {z1>=a, z2>=b}."""
    a = _clamp_thresh(a)
    b = _clamp_thresh(b)
    if abs(rho) >= 1.0 - EPS_RHO:
        return _degenerate_moments(a, b, rho)
    om = (1.0 - rho) * (1.0 + rho)
    sq = math.sqrt(om)
    ea = math.exp(-0.5 * a * a)
    eb = math.exp(-0.5 * b * b)
    t1 = ea * phi1((rho * a - b) / sq)
    t2 = eb * phi1((rho * b - a) / sq)
    # exp(-(a^2 - 2 rho a b + b^2)/(2(1-rho^2))) factored to avoid overflow
    q = ea * math.exp(-0.5 * (b - rho * a) ** 2 / om)
    f = bvn(-a, -b, rho)
    e1 = INV_SQRT2PI * (t1 + rho * t2)
    e2 = INV_SQRT2PI * (t2 + rho * t1)
    base = rho * sq / TWO_PI * q + f
    e11 = base + INV_SQRT2PI * (a * t1 + rho * rho * b * t2)
    e22 = base + INV_SQRT2PI * (b * t2 + rho * rho * a * t1)
    e12 = sq / TWO_PI * q + rho * f + rho * INV_SQRT2PI * (a * t1 + b * t2)
    return e1, e2, e11, e22, e12, f


@njit
def general_moments(mu1, k1, mu2, k2, rho, a, b):
    """Quadrant moments of z_i = mu_i + k_i * zhat_i via affine standardization."""
    s1, s2, s11, s22, s12, p = standard_moments((a - mu1) / k1, (b - mu2) / k2, rho)
    e1 = mu1 * p + k1 * s1
    e2 = mu2 * p + k2 * s2
    e11 = mu1 * mu1 * p + 2.0 * mu1 * k1 * s1 + k1 * k1 * s11
    e22 = mu2 * mu2 * p + 2.0 * mu2 * k2 * s2 + k2 * k2 * s22
    e12 = mu1 * mu2 * p + mu1 * k2 * s2 + mu2 * k1 * s1 + k1 * k2 * s12
    return e1, e2, e11, e22, e12, p


@njit
def relu_product(mu1, k1, mu2, k2, rho, a, b):
    return general_moments(mu1, k1, mu2, k2, rho, a, b)[4]


def _check_rho(rho):
    if not abs(rho) <= 1.0:
        raise ValueError(f"|rho| must be <= 1, got {rho}")


def bvn_cdf(a, b, rho):
    """Bivariate standard normal CDF Phi_2(a, b, rho)."""
    _check_rho(rho)
    return bvn(float(a), float(b), float(rho))


def gaussian_copula(a, b, rho):
    """Phi_2(a, b, rho) - Phi(a) Phi(b)."""
    _check_rho(rho)
    if rho == 0.0:
        return 0.0
    return bvn(float(a), float(b), float(rho)) - phi1(float(a)) * phi1(float(b))


def coupled_standard_moments(a, b, rho):
    """Quadrant moments of a standard correlated pair.

    For |rho| >= 1 - EPS_RHO the exact rho = +-1 limit is returned, since the
    closed forms divide by 1 - rho^2.
    """
    _check_rho(rho)
    return CoupledMoments(*standard_moments(float(a), float(b), float(rho)))


def coupled_moments(p: BivariateMomentParams):
    """Quadrant moments of a general correlated pair."""
    return CoupledMoments(*general_moments(p.mu1, p.kappa1, p.mu2, p.kappa2, p.rho, p.a, p.b))


def relu_product_expectation(p: BivariateMomentParams):
    """E[z1 z2 1{z1 >= a, z2 >= b}]; at a = b = 0 this is E[relu(z1) relu(z2)]."""
    return relu_product(p.mu1, p.kappa1, p.mu2, p.kappa2, p.rho, p.a, p.b)


def degenerate_relu_second_moment(g):
    """E[relu(z)^2], the diagonal rho = 1 case."""
    if not isinstance(g, UnivariateGaussian):
        g = UnivariateGaussian(*map(float, g))
    return trunc_second(g.mu, g.kappa, 0.0)


def indicator_joint_gap_bound(a, b):
    """2 exp(-min(a, b)^2 / 2): the signed minimum is taken before squaring."""
    lo = min(float(a), float(b))
    return 2.0 * math.exp(-0.5 * lo * lo)


def copula_arcsin_bound(a, b, rho):
    """(|asin rho| / 2 pi) exp(-(a^2 + b^2) / (2 (1 + |rho|))).

    C is the integral of the bivariate density over correlations in [0, rho];
    a^2 - 2 r a b + b^2 >= (1 - |r|)(a^2 + b^2) bounds the exponent uniformly.
    Evaluating the exponent only at r = rho does not give a bound.
    """
    _check_rho(rho)
    return abs(math.asin(rho)) / TWO_PI * math.exp(-0.5 * (a * a + b * b) / (1.0 + abs(rho)))


def copula_endpoint_expression(a, b, rho):
    """(|asin rho| / 2 pi) exp(-(a^2 - 2 rho a b + b^2) / (2 (1 - rho^2))); not a bound in general."""
    _check_rho(rho)
    if abs(rho) >= 1.0:
        return 0.0
    om = (1.0 - rho) * (1.0 + rho)
    return abs(math.asin(rho)) / TWO_PI * math.exp(-0.5 * a * a - 0.5 * (b - rho * a) ** 2 / om)


def copula_simple_bound(a, b, rho):
    """(|rho| / 4) exp(-(a^2 + b^2) / 4)."""
    return 0.25 * abs(rho) * math.exp(-0.25 * (a * a + b * b))
