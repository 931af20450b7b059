"""Scalar Gaussian special functions and univariate truncated moments."""
import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
INV_SQRT2PI = 1.0 / SQRT2PI
PSI_SUP = 1.0 / math.sqrt(2.0 * math.e)

# below this exponent the product coef*exp(arg) is formed in log space
_LOG_SPACE_CUTOFF = -700.0


@dataclass(frozen=True)
class UnivariateGaussian:
    mu: float
    kappa: float

    def __post_init__(self):
        if not (self.kappa > 0.0) or not math.isfinite(self.kappa):
            raise ValueError(f"kappa must be a positive finite number, got {self.kappa}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")


@njit
def phi1(x):
    # erfc keeps full relative accuracy in the lower tail
    return 0.5 * math.erfc(-x / SQRT2)


@njit
def npdf(x):
    return INV_SQRT2PI * math.exp(-0.5 * x * x)


@njit
def scaled_exp(coef, arg):
    """coef * exp(arg) without spurious overflow of either factor."""
    if coef == 0.0:
        return 0.0
    if arg < _LOG_SPACE_CUTOFF:
        sign = 1.0 if coef > 0.0 else -1.0
        return sign * math.exp(math.log(abs(coef)) + arg)
    return coef * math.exp(arg)


@njit
def trunc_first(mu, kappa, a):
    # E[z 1{z>=a}] in the standardized variable t = (mu - a)/kappa
    t = (mu - a) / kappa
    return scaled_exp(kappa * INV_SQRT2PI, -0.5 * t * t) + mu * phi1(t)


@njit
def trunc_second(mu, kappa, a):
    t = (mu - a) / kappa
    return scaled_exp(kappa * (a + mu) * INV_SQRT2PI, -0.5 * t * t) + (kappa * kappa + mu * mu) * phi1(t)


@njit
def _phi1_array(x, out):
    for i in range(x.size):
        out[i] = phi1(x[i])


def std_normal_cdf(x):
    """Standard normal CDF for a scalar or an array."""
    if np.ndim(x) == 0:
        xf = float(x)
        if math.isnan(xf):
            raise ValueError("std_normal_cdf: x is NaN")
        return phi1(xf)
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty(arr.size)
    _phi1_array(arr.ravel(), out)
    return out.reshape(arr.shape)


def sq_exp_phi(x):
    """exp(-x^2)."""
    return np.exp(-np.square(x)) if np.ndim(x) else math.exp(-float(x) ** 2)


def abs_sq_exp_psi(x):
    """|x| exp(-x^2); bounded above by 1/sqrt(2e)."""
    if np.ndim(x):
        return np.abs(x) * np.exp(-np.square(x))
    xf = float(x)
    return abs(xf) * math.exp(-xf * xf)


def _as_gaussian(g):
    if isinstance(g, UnivariateGaussian):
        return g
    mu, kappa = g
    return UnivariateGaussian(float(mu), float(kappa))


def truncated_first_moment(g, a):
    """E[z 1{z >= a}] for z ~ N(mu, kappa^2). ``g`` is a UnivariateGaussian or (mu, kappa)."""
    g = _as_gaussian(g)
    return trunc_first(g.mu, g.kappa, float(a))


def truncated_second_moment(g, a):
    """E[z^2 1{z >= a}] for z ~ N(mu, kappa^2)."""
    g = _as_gaussian(g)
    return trunc_second(g.mu, g.kappa, float(a))


def cdf_indicator_gap_bound(alpha):
    """Upper bound exp(-alpha^2/2) on |Phi(alpha) - 1{alpha >= 0}|."""
    a = float(alpha)
    return math.exp(-0.5 * a * a)
