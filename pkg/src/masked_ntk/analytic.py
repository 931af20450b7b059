"""Closed-form expectations over Gaussian input masks.

Everything here is exact except the residual bounds, which are the stated
inequalities evaluated with the network's own norm and tail quantities.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._accel import njit, prange
from .bivariate import EPS_RHO, general_moments
from .gaussmath import PSI_SUP, npdf, phi1, std_normal_cdf, trunc_first, trunc_second
from .model import clean_gradient, clean_loss

EPS = float(np.finfo(np.float64).eps)


class HypothesisViolation(ValueError):
    """A bound's standing hypothesis fails on the given instance."""


class DegenerateInput(ValueError):
    """Some w_r * x_i is the zero vector, so the mask has no effect on it."""


@dataclass(frozen=True)
class DefQuantities:
    b_x: float
    b_y: float
    r_w: float
    r_u: float
    phi_max: float
    psi_max: float


@dataclass(frozen=True)
class LossBreakdown:
    exact: float
    t1_smoothed: float
    t2_regularizer: float
    residual: float
    residual_bound: float

    def to_dict(self):
        return asdict(self)

    def within_bound(self):
        # the residual is a difference of O(1) terms and inherits their rounding error
        slack = 4.0 * EPS * (abs(self.exact) + abs(self.t1_smoothed) + abs(self.t2_regularizer))
        return abs(self.residual) <= self.residual_bound + slack


@dataclass(frozen=True)
class GradientDecomposition:
    clean_grad_row: np.ndarray
    t3_row: np.ndarray
    exact_expected_row: np.ndarray
    residual_row: np.ndarray
    residual_bound: float

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


# ---------------------------------------------------------------- activations

def _pre(w, x, kappa):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return float(w @ x), kappa * float(np.linalg.norm(w * x))


def smoothed_activation(w, x, kappa):
    """(w.x) Phi(w.x / (kappa ||w * x||)), falling back to relu when the scale is 0."""
    z, s = _pre(w, x, kappa)
    if s == 0.0:
        return max(z, 0.0)
    return z * phi1(z / s)


def exact_masked_activation_expectation(w, x, kappa):
    """E_c[relu(w.(x * c))] = z Phi(z/s) + s pdf(z/s)."""
    z, s = _pre(w, x, kappa)
    if s == 0.0:
        return max(z, 0.0)
    return trunc_first(z, s, 0.0)


def _preacts(net, X, kappa):
    Z = X @ net.W.T
    S = kappa * np.sqrt((X * X) @ (net.W * net.W).T)
    return Z, S


def _smoothed_gate(Z, S):
    # Phi(z/s), with the s = 0 limit 1{z > 0} (z = 0 there contributes nothing)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(S > 0.0, Z / np.where(S > 0.0, S, 1.0), np.sign(Z) * np.inf)
    return std_normal_cdf(ratio)


def smoothed_network(net, x, kappa):
    """m^{-1/2} sum_r a_r sigma_hat(w_r, x)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Z, S = _preacts(net, X, kappa)
    out = (Z * _smoothed_gate(Z, S)) @ net.a / math.sqrt(net.m)
    return float(out[0]) if np.ndim(x) == 1 else out


# ---------------------------------------------------------------- quantities

def def_quantities(net, data, kappa):
    """B_x, B_y, R_w, R_u and the phi/psi maxima at argument w.x / (2 kappa ||w * x||)."""
    if not kappa > 0.0:
        raise ValueError("def_quantities needs kappa > 0")
    X = data.inputs
    Z, S = _preacts(net, X, kappa)
    unorm = S / kappa
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(S > 0.0, Z / (2.0 * np.where(S > 0.0, S, 1.0)), 0.0)
    phi = np.exp(-arg * arg)
    psi = np.abs(arg) * phi
    return DefQuantities(
        b_x=float(np.max(np.abs(X))),
        b_y=float(np.max(np.abs(data.targets))),
        r_w=float(np.max(np.linalg.norm(net.W, axis=1))),
        r_u=float(np.max(unorm)),
        phi_max=float(np.max(phi)),
        psi_max=float(min(np.max(psi), PSI_SUP)),
    )


def _check_loss_hypothesis(net, q):
    if q.b_y > 3.0 * math.sqrt(net.m) * q.r_w:
        raise HypothesisViolation(
            f"B_y = {q.b_y:.6g} exceeds 3 sqrt(m) R_w = {3.0 * math.sqrt(net.m) * q.r_w:.6g}"
        )


def _check_nondegenerate(net, data):
    unorm = np.sqrt((data.inputs ** 2) @ (net.W ** 2).T)
    bad = np.argwhere(unorm == 0.0)
    if bad.size:
        i, r = (int(v) for v in bad[0])
        raise DegenerateInput(f"w_{r} * x_{i} is the zero vector (sample {i}, neuron {r})")


# ---------------------------------------------------------------- exact loss

@njit
def _pair_rho(U, nrm, r, q):
    d = U.shape[1]
    dot = 0.0
    for j in range(d):
        dot += U[r, j] * U[q, j]
    rho = dot / (nrm[r] * nrm[q])
    return min(1.0, max(-1.0, rho))


@njit(parallel=True)
def _exact_loss_terms(W, a, X, y, kappa):
    n, d = X.shape
    m = W.shape[0]
    out = np.empty(n)
    for i in prange(n):
        U = W * X[i]
        z = W @ X[i]
        nrm = np.sqrt(np.sum(U * U, axis=1))
        ef = 0.0
        ef2 = 0.0
        for r in range(m):
            sr = kappa * nrm[r]
            ef += a[r] * trunc_first(z[r], sr, 0.0)
            ef2 += trunc_second(z[r], sr, 0.0)
            for q in range(r + 1, m):
                rho = _pair_rho(U, nrm, r, q)
                e12 = general_moments(z[r], sr, z[q], kappa * nrm[q], rho, 0.0, 0.0)[4]
                ef2 += 2.0 * a[r] * a[q] * e12
        ef /= math.sqrt(m)
        ef2 /= m
        out[i] = 0.5 * (ef2 - 2.0 * y[i] * ef + y[i] * y[i])
    return out


def expected_loss_exact(net, data, kappa):
    """E_C[L_C(W)] in closed form; Theta(n m^2) bivariate evaluations."""
    if not kappa > 0.0:
        raise ValueError("expected_loss_exact needs kappa > 0; use clean_loss at kappa = 0")
    _check_nondegenerate(net, data)
    terms = _exact_loss_terms(net.W, net.a, data.inputs, data.targets, float(kappa))
    return float(np.sum(terms))


def smoothed_terms(net, data, kappa):
    """(T1, T2): the smoothed-network loss and the kappa^2 regularizer."""
    X = data.inputs
    Z, S = _preacts(net, X, kappa)
    gate = _smoothed_gate(Z, S)
    fhat = (Z * gate) @ net.a / math.sqrt(net.m)
    t1 = 0.5 * float(np.sum((fhat - data.targets) ** 2))
    V = X * ((gate * net.a) @ net.W)
    t2 = kappa * kappa / (2.0 * net.m) * float(np.sum(V * V))
    return t1, t2


def loss_residual_bound(net, data, kappa, q=None):
    q = q or def_quantities(net, data, kappa)
    mn = net.m * data.n
    return mn * (kappa ** 2 * q.r_u ** 2 * q.psi_max ** 2 + (kappa ** 2 * q.r_u ** 2 + kappa * q.r_w) * q.phi_max ** 2)


def expected_loss_decomposition(net, data, kappa):
    """Exact expected loss split into smoothed loss, regularizer and residual."""
    q = def_quantities(net, data, kappa)
    _check_loss_hypothesis(net, q)
    exact = expected_loss_exact(net, data, kappa)
    t1, t2 = smoothed_terms(net, data, kappa)
    return LossBreakdown(exact, t1, t2, exact - t1 - t2, loss_residual_bound(net, data, kappa, q))


# ---------------------------------------------------------------- conditioning

def _gram(u, v):
    uu, vv, uv = float(u @ u), float(v @ v), float(u @ v)
    if uu == 0.0 or vv == 0.0:
        raise ValueError("u and v must be nonzero")
    rho = uv / math.sqrt(uu * vv)
    if abs(rho) >= 1.0 - EPS_RHO:
        raise ValueError(f"u and v are (nearly) parallel: correlation {rho:.17g}")
    return uu, vv, uv


def conditional_mean(mu, kappa, u, v, z1, z2):
    """E[c | c.u = z1, c.v = z2] for c ~ N(mu, kappa^2 I)."""
    mu, u, v = (np.asarray(t, dtype=np.float64) for t in (mu, u, v))
    uu, vv, uv = _gram(u, v)
    det = uu * vv - uv * uv
    s1 = (vv * u - uv * v) / det
    s2 = (uu * v - uv * u) / det
    return mu + s1 * (z1 - mu @ u) + s2 * (z2 - mu @ v)


def conditional_cov(kappa, u, v):
    """Cov[c | c.u, c.v] = kappa^2 (I - projection onto span{u, v})."""
    u, v = (np.asarray(t, dtype=np.float64) for t in (u, v))
    uu, vv, uv = _gram(u, v)
    det = uu * vv - uv * uv
    skew = np.outer(u, v) - np.outer(v, u)
    # skew @ skew = -det * P_span, so the sign in front of the square is +
    return kappa * kappa * (np.eye(u.size) + skew @ skew / det)


@njit
def _indicator_vector(mu, kappa, u):
    nu = math.sqrt(np.sum(u * u))
    t = np.sum(mu * u) / (kappa * nu)
    return mu * phi1(t) + u * (kappa * npdf(t) / nu)


@njit
def _second_moment_action(mu, kappa, u, v):
    uu = np.sum(u * u)
    vv = np.sum(v * v)
    uv = np.sum(u * v)
    nu = math.sqrt(uu)
    nv = math.sqrt(vv)
    rho = min(1.0, max(-1.0, uv / (nu * nv)))
    mu_u = np.sum(mu * u)
    mu_v = np.sum(mu * v)
    if rho <= -1.0 + EPS_RHO:
        # opposite half-spaces only meet on a null set
        return np.zeros_like(u)
    if rho >= 1.0 - EPS_RHO:
        # one conditioning variable z = c.u: E[c c^T | z] = kappa^2 (I - uu^T/|u|^2) + m(z) m(z)^T
        k1 = kappa * nu
        p = phi1(mu_u / k1)
        e1 = trunc_first(mu_u, k1, 0.0)
        e11 = trunc_second(mu_u, k1, 0.0)
        alpha = mu - u * (mu_u / uu)
        av = np.sum(alpha * v)
        out = kappa * kappa * (v - u * (uv / uu)) * p
        out += alpha * (av * p + uv * e1 / uu)
        out += u * (av * e1 / uu + uv * e11 / (uu * uu))
        return out
    e1, e2, e11, e22, e12, p = general_moments(mu_u, kappa * nu, mu_v, kappa * nv, rho, 0.0, 0.0)
    det = uu * vv * (1.0 - rho) * (1.0 + rho)
    s1 = (vv * u - uv * v) / det
    s2 = (uu * v - uv * u) / det
    # E[c (c.v) 1 1] = E[E[c | z1, z2] z2 1 1]
    return mu * e2 + s1 * (e12 - mu_u * e2) + s2 * (e22 - mu_v * e2)


def _vec_args(mu, u, v=None):
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if not np.any(u):
        raise ValueError("u must be nonzero")
    if v is None:
        return mu, u
    v = np.ascontiguousarray(v, dtype=np.float64)
    if not np.any(v):
        raise ValueError("v must be nonzero")
    return mu, u, v


def expected_indicator_vector(mu, kappa, u):
    """E[c 1{c.u >= 0}] for c ~ N(mu, kappa^2 I)."""
    if not kappa > 0.0:
        raise ValueError("kappa must be positive")
    mu, u = _vec_args(mu, u)
    return _indicator_vector(mu, float(kappa), u)


def expected_second_moment_action(mu, kappa, u, v):
    """E[c c^T 1{c.u >= 0, c.v >= 0}] v for c ~ N(mu, kappa^2 I)."""
    if not kappa > 0.0:
        raise ValueError("kappa must be positive")
    mu, u, v = _vec_args(mu, u, v)
    return _second_moment_action(mu, float(kappa), u, v)


# ---------------------------------------------------------------- exact gradient

@njit(parallel=True)
def _exact_grad_terms(W, a, X, y, kappa, r):
    n, d = X.shape
    m = W.shape[0]
    out = np.zeros((n, d))
    ones = np.ones(d)
    for i in prange(n):
        U = W * X[i]
        acc = np.zeros(d)
        for q in range(m):
            acc += a[q] * _second_moment_action(ones, kappa, U[r], U[q])
        acc /= math.sqrt(m)
        acc -= y[i] * _indicator_vector(ones, kappa, U[r])
        out[i] = X[i] * acc
    return out


def expected_gradient_exact(net, data, kappa, r):
    """E_C[grad_{w_r} L_C(W)] in closed form."""
    if not kappa > 0.0:
        raise ValueError("expected_gradient_exact needs kappa > 0; use clean_gradient at kappa = 0")
    if not 0 <= r < net.m:
        raise IndexError(f"neuron index {r} out of range for width {net.m}")
    _check_nondegenerate(net, data)
    terms = _exact_grad_terms(net.W, net.a, data.inputs, data.targets, float(kappa), int(r))
    return net.a[r] / math.sqrt(net.m) * np.sum(terms, axis=0)


def regularizer_t3(net, data, kappa, r):
    """(3 kappa^2 a_r / m) sum_i sum_r' a_r' x_i^2 * w_r' 1{w_r.x_i >= 0} 1{w_r'.x_i >= 0}."""
    X = data.inputs
    act = (X @ net.W.T >= 0.0).astype(np.float64)
    coef = act * act[:, [r]] * net.a
    return 3.0 * kappa ** 2 * net.a[r] / net.m * np.sum((X * X) * (coef @ net.W), axis=0)


def gradient_residual_bound(net, data, kappa, q=None):
    q = q or def_quantities(net, data, kappa)
    n, d = data.n, data.d
    sigma_max = float(np.linalg.norm(data.inputs, 2))
    loss_root = math.sqrt(clean_loss(net, data))
    return (
        (6.0 * n * kappa ** 2 * q.b_x ** 2 * q.r_w + 5.0 * n * kappa * q.r_u * math.sqrt(d)) * q.phi_max
        + sigma_max / math.sqrt(net.m) * q.phi_max * loss_root
        + 6.0 * n * kappa * q.r_u * q.psi_max
    )


def gradient_decomposition(net, data, kappa, r):
    """Exact expected gradient row split into clean gradient, t3 and residual."""
    if kappa > 1.0:
        raise HypothesisViolation(f"gradient decomposition assumes kappa <= 1, got {kappa}")
    clean = clean_gradient(net, data)[r]
    if kappa == 0.0:
        zero = np.zeros(net.d)
        return GradientDecomposition(clean, zero, clean.copy(), zero.copy(), 0.0)
    exact = expected_gradient_exact(net, data, kappa, r)
    t3 = regularizer_t3(net, data, kappa, r)
    return GradientDecomposition(clean, t3, exact, exact - clean - t3, gradient_residual_bound(net, data, kappa))


# ---------------------------------------------------------------- bound expressions

def epsilon_bounds(net, data, kappa):
    """(eps1, eps2, eps3) with every hidden constant set to 1."""
    if kappa == 0.0:
        return 0.0, 0.0, 0.0
    q = def_quantities(net, data, kappa)
    _check_loss_hypothesis(net, q)
    return epsilon_bounds_from(q, net.m, data.n, data.d, kappa, float(np.linalg.norm(data.inputs, 2)))


def epsilon_bounds_from(q, m, n, d, kappa, sigma_max):
    k2 = kappa * kappa
    eps1 = (
        2.0 * m * n * k2 * q.r_u ** 2
        + m * n * (k2 * q.r_u ** 2 + kappa * q.r_w) * q.phi_max ** 2
        + m * n * k2 * (q.r_u ** 2 + 1.0) * q.psi_max ** 2
    )
    eps2 = (
        (n * k2 * q.b_x ** 2 * q.r_w + n * kappa * q.r_u * math.sqrt(d)) * q.phi_max
        + n * kappa * q.r_u * q.psi_max
        + k2 * math.sqrt(m) * q.b_x ** 2 * q.r_w
    )
    eps3 = sigma_max * q.phi_max / math.sqrt(m)
    return eps1, eps2, eps3
