"""Datasets, the two-layer ReLU network, Gaussian masks and per-realization
losses and gradients."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

COLLINEARITY_TOL = 1e-12
NORM_TOL = 1e-12


def _flatten(keys):
    for k in keys:
        if isinstance(k, (tuple, list)):
            yield from _flatten(k)
        else:
            yield k


def derive_rng(*keys):
    """Independent generator for an integer key path, e.g. (base_seed, step).

    Nested tuples are flattened, so ``derive_rng((1, 2), 3)`` equals ``derive_rng(1, 2, 3)``.
    """
    ints = []
    for k in _flatten(keys):
        k = int(k)
        if k < 0:
            raise ValueError(f"seed keys must be nonnegative, got {k}")
        ints.append(k)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))


def _frozen(arr, ndim, name):
    out = np.array(arr, dtype=np.float64, copy=True)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = _frozen(self.inputs, 2, "inputs")
        y = _frozen(self.targets, 1, "targets")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("dataset needs n >= 1 and d >= 1")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def d(self):
        return self.inputs.shape[1]


@dataclass(frozen=True)
class NetworkState:
    W: np.ndarray
    a: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        W = _frozen(self.W, 2, "W")
        a = _frozen(self.a, 1, "a")
        if W.shape[0] != a.shape[0]:
            raise ValueError(f"W has {W.shape[0]} rows but a has {a.shape[0]} entries")
        if W.shape[0] < 1:
            raise ValueError("network width must be >= 1")
        if not np.all(np.abs(a) == 1.0):
            raise ValueError("second-layer signs must be +1 or -1")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "a", a)

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def with_weights(self, W):
        return NetworkState(W, self.a, self.tau)


@dataclass(frozen=True)
class MaskBatch:
    masks: np.ndarray
    kappa: float
    seed: tuple = field(default=())


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    reason: str = ""
    pair: tuple = None


def validate_dataset(data, target_bound=1.0):
    """Check unit-ball inputs, bounded targets and pairwise non-collinearity.

    ``pair`` in a collinearity failure is 1-based. Pass ``target_bound=None``
    to skip the target check.
    """
    x = data.inputs
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms > 1.0 + NORM_TOL)
    if bad.size:
        i = int(bad[0])
        return ValidationReport(False, f"input {i + 1} has norm {norms[i]:.17g} > 1", (i + 1,))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        i = int(zero[0])
        return ValidationReport(False, f"input {i + 1} is the zero vector", (i + 1,))
    if target_bound is not None:
        over = np.flatnonzero(np.abs(data.targets) > target_bound)
        if over.size:
            i = int(over[0])
            return ValidationReport(False, f"target {i + 1} exceeds bound {target_bound}", (i + 1,))
    xhat = x / norms[:, None]
    gram = np.abs(xhat @ xhat.T)
    np.fill_diagonal(gram, 0.0)
    hits = np.argwhere(gram > 1.0 - COLLINEARITY_TOL)
    if hits.size:
        i, j = sorted(int(v) for v in hits[0])
        return ValidationReport(False, f"inputs {i + 1} and {j + 1} are collinear", (i + 1, j + 1))
    return ValidationReport(True)


def init_network(m, d, tau, sign_seed, weight_seed):
    """W entries iid N(0, tau^2); signs iid uniform on {-1, +1}."""
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    W = derive_rng(weight_seed).standard_normal((m, d)) * tau
    a = np.where(derive_rng(sign_seed).random(m) < 0.5, -1.0, 1.0)
    return NetworkState(W, a, float(tau))


def _check_input(net, x):
    if x.shape[-1] != net.d:
        raise ValueError(f"input dimension {x.shape[-1]} does not match network dimension {net.d}")


def forward_batch(net, X):
    """Network outputs for the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    _check_input(net, X)
    Z = X @ net.W.T
    return np.maximum(Z, 0.0) @ net.a / math.sqrt(net.m)


def forward(net, x):
    """f(W, x) = m^{-1/2} sum_r a_r relu(w_r . x)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    return float(forward_batch(net, x[None, :])[0])


def sample_masks(n, d, kappa, seed):
    """n masks with iid N(1, kappa^2) entries. ``seed`` is an int or a key tuple."""
    if not kappa >= 0.0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    if kappa == 0.0:
        c = np.ones((n, d))
    else:
        c = 1.0 + kappa * derive_rng(*keys).standard_normal((n, d))
    return MaskBatch(c, float(kappa), keys)


def _mask_array(masks, data):
    c = masks.masks if isinstance(masks, MaskBatch) else np.asarray(masks, dtype=np.float64)
    if c.shape != data.inputs.shape:
        raise ValueError(f"mask shape {c.shape} does not match inputs {data.inputs.shape}")
    return c


def loss_grad_arrays(W, a, X, y, need_grad=True):
    """Loss and W-gradient on raw arrays; no validation, for inner loops."""
    Z = X @ W.T
    scaled = a / math.sqrt(W.shape[0])
    res = np.maximum(Z, 0.0) @ scaled - y
    loss = 0.5 * float(res @ res)
    if not need_grad:
        return loss, None
    G = ((Z >= 0.0) * res[:, None]).T @ X
    G *= scaled[:, None]
    return loss, G


def _loss_and_grad(net, X, y, need_grad=True):
    _check_input(net, X)
    return loss_grad_arrays(net.W, net.a, X, y, need_grad)


def masked_loss(net, data, masks):
    """1/2 sum_i (f(W, x_i * c_i) - y_i)^2."""
    X = data.inputs * _mask_array(masks, data)
    return _loss_and_grad(net, X, data.targets, need_grad=False)[0]


def masked_gradient(net, data, masks):
    """Gradient of masked_loss in W (m x d)."""
    X = data.inputs * _mask_array(masks, data)
    return _loss_and_grad(net, X, data.targets)[1]


def masked_loss_and_gradient(net, data, masks):
    X = data.inputs * _mask_array(masks, data)
    return _loss_and_grad(net, X, data.targets)


def clean_loss(net, data):
    return _loss_and_grad(net, data.inputs, data.targets, need_grad=False)[0]


def clean_gradient(net, data):
    return _loss_and_grad(net, data.inputs, data.targets)[1]


def mask_linf_bound(kappa, d, delta):
    """1 + kappa sqrt(2 log(2d/delta)): exceeded by ||c||_inf with probability <= delta."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if d < 1 or kappa < 0.0:
        raise ValueError("need d >= 1 and kappa >= 0")
    return 1.0 + kappa * math.sqrt(2.0 * math.log(2.0 * d / delta))


def smoothness_ratio_bound(data, masks, m):
    """(2n/m) max_i ||x_i * c_i||^2, the per-realization smoothness constant."""
    X = data.inputs * _mask_array(masks, data)
    return 2.0 * data.n / m * float(np.max(np.sum(X * X, axis=1)))


def unit_sphere_inputs(n, d, rng):
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def synthetic_regression(n, d, seed, noise=0.05, signal_scale=0.5, clip=1.0):
    """Unit-norm inputs with targets clip(tanh(v.x) + noise*xi) for a seeded v."""
    x = unit_sphere_inputs(n, d, derive_rng(seed, 0))
    v = derive_rng(seed, 1).standard_normal(d) * signal_scale
    xi = derive_rng(seed, 2).standard_normal(n)
    y = np.clip(np.tanh(x @ v) + noise * xi, -clip, clip)
    return Dataset(x, y)


def save_dataset_csv(data, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{j + 1}" for j in range(data.d)] + ["y"])
        for xi, yi in zip(data.inputs, data.targets):
            w.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])


def load_dataset_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    if header != [f"x_{j + 1}" for j in range(d)] + ["y"]:
        raise ValueError(f"unexpected dataset header {header}")
    arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(-1, d + 1)
    return Dataset(arr[:, :d], arr[:, d])


def network_to_json(net):
    return json.dumps({
        "m": net.m, "d": net.d, "tau": net.tau,
        "a": [float(v) for v in net.a],
        "W": [float(v) for v in net.W.ravel()],
    })


def network_from_json(text):
    obj = json.loads(text)
    m, d = int(obj["m"]), int(obj["d"])
    W = np.array(obj["W"], dtype=np.float64)
    if W.size != m * d:
        raise ValueError(f"W has {W.size} entries, expected {m * d}")
    return NetworkState(W.reshape(m, d), np.array(obj["a"], dtype=np.float64), float(obj["tau"]))
