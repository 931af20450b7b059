"""Masked gradient descent, error-floor measurement and a FedAvg simulator.

Mask streams are keyed by integer tuples. A centralized step ``k`` uses the
key ``(base_seed, k, 0, 0)``, which is the key FedAvg gives worker 0 at local
step 0 of round ``k``; a single full-batch worker therefore reproduces the
centralized trajectory exactly.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    derive_rng,
    loss_grad_arrays,
    masked_loss_and_gradient,
    smoothness_ratio_bound,
)

DIVERGENCE_LOSS = 1e12
RATE_FIT_MIN_POINTS = 5
PRE_PLATEAU_FACTOR = 3.0
# slack for rounding in the per-realization smoothness check
_SMOOTH_RTOL = 1e-9


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    iters: int
    kappa: float
    base_seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if not (self.eta > 0.0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError(f"iters must be an integer >= 1, got {self.iters}")
        if not (self.kappa >= 0.0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError(f"record_every must be an integer >= 1, got {self.record_every}")
        if int(self.base_seed) != self.base_seed or self.base_seed < 0:
            raise ValueError(f"base_seed must be a nonnegative integer, got {self.base_seed}")


@dataclass
class Trajectory:
    iterations: list = field(default_factory=list)
    clean_loss: list = field(default_factory=list)
    masked_loss: list = field(default_factory=list)
    weight_drift: list = field(default_factory=list)
    smoothness_violations: int = 0
    final: object = None

    def __len__(self):
        return len(self.iterations)


@dataclass(frozen=True)
class FedConfig:
    workers: int
    local_steps: int
    rounds: int
    kappa: float
    eta: float
    batch_size: int
    base_seed: int = 0
    mask_per_round: bool = False

    def __post_init__(self):
        for name in ("workers", "local_steps", "rounds", "batch_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v}")
        if not (self.eta > 0.0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (self.kappa >= 0.0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if int(self.base_seed) != self.base_seed or self.base_seed < 0:
            raise ValueError(f"base_seed must be a nonnegative integer, got {self.base_seed}")


def step_key(base_seed, k):
    return (int(base_seed), int(k), 0, 0)


def _masks(keys, shape, kappa):
    if kappa == 0.0:
        return np.ones(shape)
    return 1.0 + kappa * derive_rng(*keys).standard_normal(shape)


def _check_grad(G):
    if not np.all(np.isfinite(G)):
        raise DivergenceError("non-finite gradient")


def gd_step(net, data, kappa, eta, step_seed):
    """One step W - eta grad L_C(W) with masks drawn from the key ``step_seed``."""
    if not eta > 0.0:
        raise ValueError(f"eta must be positive, got {eta}")
    keys = tuple(step_seed) if isinstance(step_seed, (tuple, list)) else (step_seed,)
    C = _masks(keys, data.inputs.shape, kappa)
    G = masked_loss_and_gradient(net, data, C)[1]
    _check_grad(G)
    return net.with_weights(net.W - eta * G)


def _smooth_ok(G, loss, data, C, m):
    lhs = np.sum(G * G, axis=1).max()
    return lhs <= smoothness_ratio_bound(data, C, m) * loss * (1.0 + _SMOOTH_RTOL) + 1e-300


def train(net, data, cfg):
    """Masked full-batch gradient descent; records every ``record_every`` steps.

    Entry ``k`` of the trajectory describes the iterate before step ``k``; the
    final iterate is always recorded with index ``iters``.
    """
    traj = Trajectory()
    X, y, a = data.inputs, data.targets, net.a
    W0 = net.W
    W = W0.copy()
    for k in range(cfg.iters + 1):
        C = _masks(step_key(cfg.base_seed, k), X.shape, cfg.kappa)
        record = k % cfg.record_every == 0 or k == cfg.iters
        step = k < cfg.iters
        if not (step or record):
            continue
        mloss, G = loss_grad_arrays(W, a, X * C, y, need_grad=step)
        if record:
            closs = loss_grad_arrays(W, a, X, y, need_grad=False)[0]
            if not closs <= DIVERGENCE_LOSS:
                raise DivergenceError(
                    f"clean loss {closs:.6g} exceeds {DIVERGENCE_LOSS:g} at iteration {k} "
                    f"(eta={cfg.eta}, kappa={cfg.kappa}, base_seed={cfg.base_seed})"
                )
            traj.iterations.append(k)
            traj.clean_loss.append(closs)
            traj.masked_loss.append(mloss)
            traj.weight_drift.append(float(np.linalg.norm(W - W0, axis=1).max()))
            if step and not _smooth_ok(G, mloss, data, C, net.m):
                traj.smoothness_violations += 1
        if step:
            _check_grad(G)
            W = W - cfg.eta * G
    traj.final = net.with_weights(W)
    return traj


def plateau_loss(traj, tail_fraction=0.1):
    """Mean clean loss over the last ``tail_fraction`` of recorded steps."""
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError(f"tail_fraction must lie in (0, 1], got {tail_fraction}")
    losses = traj.clean_loss if isinstance(traj, Trajectory) else list(traj)
    if not losses:
        raise ValueError("empty trajectory")
    count = max(1, int(math.ceil(tail_fraction * len(losses))))
    return float(np.mean(losses[-count:]))


def fit_decay_factor(iterations, losses):
    """Per-step factor q from a least-squares fit of log(loss) on iteration."""
    k = np.asarray(iterations, dtype=np.float64)
    y = np.log(np.asarray(losses, dtype=np.float64))
    if k.size < RATE_FIT_MIN_POINTS:
        raise ValueError(f"rate fit needs at least {RATE_FIT_MIN_POINTS} points, got {k.size}")
    kc = k - k.mean()
    slope = float(kc @ (y - y.mean()) / (kc @ kc))
    return math.exp(slope)


def convergence_report(traj, lambda0, eta, bounds, net_meta):
    """Fitted rate, floor expression and weight drift next to their reference scales.

    ``net_meta`` needs keys m, n and tau.
    """
    if not lambda0 > 0.0:
        raise ValueError(f"lambda0 must be positive, got {lambda0}")
    eps1, eps2, eps3 = bounds
    m, n, tau = int(net_meta["m"]), int(net_meta["n"]), float(net_meta["tau"])
    floor = plateau_loss(traj, 0.1)
    pre = [(k, v) for k, v in zip(traj.iterations, traj.clean_loss) if v > PRE_PLATEAU_FACTOR * floor]
    if len(pre) < RATE_FIT_MIN_POINTS:
        raise ValueError(
            f"degenerate rate fit: {len(pre)} pre-plateau points, need {RATE_FIT_MIN_POINTS}"
        )
    q = fit_decay_factor([p[0] for p in pre], [p[1] for p in pre])
    return {
        "fitted_decay_factor": q,
        "reference_decay_factor": 1.0 - eta * lambda0 / 2.0,
        "pre_plateau_points": len(pre),
        "plateau_loss": floor,
        "floor_expression": m * n / lambda0**2 * eps2**2 + eps1,
        "eps1": eps1,
        "eps2": eps2,
        "eps3": eps3,
        "max_weight_drift": max(traj.weight_drift),
        "drift_scale": tau * lambda0 / n,
    }


def shard_indices(n, workers, base_seed):
    """Contiguous equal splits of a seeded permutation, each kept in ascending order."""
    if workers > n:
        raise ValueError(f"{workers} workers for only {n} samples")
    perm = derive_rng(int(base_seed), 1 << 32).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, workers)]


def fedavg_simulate(net0, data, cfg):
    """FedAvg over a multiplicative Gaussian fading channel.

    Each round the server broadcasts W, every worker runs ``local_steps``
    masked mini-batch steps on its shard, and the server averages the worker
    weights in fixed worker order. A fresh mask is drawn for every local step
    from the key (base_seed, round, worker, local_step); ``mask_per_round``
    instead reuses the local-step-0 mask for the whole round.
    Returns a list of per-round dicts (round 0 is the initial model).
    """
    shards = shard_indices(data.n, cfg.workers, cfg.base_seed)
    X, y, a = data.inputs, data.targets, net0.a
    W = net0.W.copy()
    rows = [{"round": 0, "clean_loss": loss_grad_arrays(W, a, X, y, need_grad=False)[0]}]
    for rnd in range(1, cfg.rounds + 1):
        acc = np.zeros_like(W)
        for w, shard in enumerate(shards):
            Xs, ys = X[shard], y[shard]
            size = shard.size
            bs = min(cfg.batch_size, size)
            Xc = None
            if cfg.mask_per_round:
                Xc = Xs * _masks((cfg.base_seed, rnd - 1, w, 0), Xs.shape, cfg.kappa)
            Ww = W
            for step in range(cfg.local_steps):
                if not cfg.mask_per_round:
                    Xc = Xs * _masks((cfg.base_seed, rnd - 1, w, step), Xs.shape, cfg.kappa)
                if bs == size:
                    G = loss_grad_arrays(Ww, a, Xc, ys)[1]
                else:
                    idx = np.sort(derive_rng(cfg.base_seed, rnd - 1, w, step, 1).choice(size, bs, replace=False))
                    G = loss_grad_arrays(Ww, a, Xc[idx], ys[idx])[1]
                _check_grad(G)
                Ww = Ww - cfg.eta * G
            acc += Ww
        W = acc / cfg.workers
        loss = loss_grad_arrays(W, a, X, y, need_grad=False)[0]
        if not loss <= DIVERGENCE_LOSS:
            raise DivergenceError(
                f"clean loss {loss:.6g} exceeds {DIVERGENCE_LOSS:g} at round {rnd} ({cfg})"
            )
        rows.append({"round": rnd, "clean_loss": loss})
    return rows


def save_trajectory_csv(traj, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "clean_loss", "masked_loss", "max_weight_drift"])
        for row in zip(traj.iterations, traj.clean_loss, traj.masked_loss, traj.weight_drift):
            w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


def save_fedavg_csv(rows, path):
    """``rows`` carry round, kappa, local_steps and clean_loss."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "kappa", "local_steps", "clean_loss"])
        for r in rows:
            w.writerow([r["round"], f"{r['kappa']:.17g}", r["local_steps"], f"{r['clean_loss']:.17g}"])
