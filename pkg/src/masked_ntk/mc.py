"""Seeded Monte Carlo oracles for the closed forms in ``analytic``.

Draws are made in fixed-size chunks; chunk ``j`` uses the stream derived
from ``(seed, j)``. Chunk summaries are combined in index order, so the
estimate does not depend on how many workers evaluated the chunks.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._accel import NUMBA_ENABLED, njit, thread_cap
from .model import clean_gradient, clean_loss, derive_rng

CHUNK_SIZE = 4096
# cap on floats per mask sub-block inside one chunk
_BLOCK_FLOATS = 1 << 21


@dataclass(frozen=True)
class McEstimate:
    mean: object
    std_error: object
    n_samples: int
    seed: object

    @property
    def resolution(self):
        """1/N: an all-identical sample cannot resolve expectations below this scale."""
        return 1.0 / self.n_samples

    def z_score(self, value, floor=False):
        """(value - mean) / SE; with ``floor`` the SE is at least ``resolution``."""
        diff = np.asarray(value, dtype=np.float64) - np.asarray(self.mean)
        se = np.asarray(self.std_error)
        if floor:
            se = np.maximum(se, self.resolution)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0.0, diff / np.where(se > 0.0, se, 1.0), np.where(diff == 0.0, 0.0, np.inf))
        return z

    def agrees(self, value, n_se=4.0):
        return bool(np.all(np.abs(self.z_score(value, floor=True)) <= n_se))


def _chunk_summary(values, offset):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    finite = np.isfinite(values).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"statistic is not finite at draw {offset + bad}")
    if np.all(values == values[0]):
        return values.shape[0], values[0].copy(), np.zeros(values.shape[1])
    mean = values.mean(axis=0)
    return values.shape[0], mean, np.sum((values - mean) ** 2, axis=0)


def _combine(summaries, n_total, scalar):
    counts = np.array([s[0] for s in summaries], dtype=np.float64)
    means = np.array([s[1] for s in summaries])
    m2 = np.array([s[2] for s in summaries])
    if np.all(means == means[0]) and not np.any(m2):
        mean = means[0]
        var = np.zeros_like(mean)
    else:
        mean = np.sum(counts[:, None] * means, axis=0) / n_total
        total_m2 = np.sum(m2, axis=0) + np.sum(counts[:, None] * (means - mean) ** 2, axis=0)
        var = total_m2 / (n_total - 1)
    se = np.sqrt(var / n_total)
    if scalar:
        return float(mean[0]), float(se[0])
    return mean, se


def _run_chunks(chunk_fn, n_samples, seed, scalar):
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    n_chunks = -(-n_samples // CHUNK_SIZE)
    seed_keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)

    def work(j):
        count = min(CHUNK_SIZE, n_samples - j * CHUNK_SIZE)
        return _chunk_summary(chunk_fn(derive_rng(*seed_keys, j), count), j * CHUNK_SIZE)

    workers = min(thread_cap(), n_chunks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(work, range(n_chunks)))
    else:
        summaries = [work(j) for j in range(n_chunks)]
    mean, se = _combine(summaries, n_samples, scalar)
    return McEstimate(mean, se, int(n_samples), seed)


def mc_expectation(sampler, statistic, n_samples, seed, scalar=None):
    """Estimate E[statistic(X)] with X drawn by ``sampler(rng, count)``.

    ``statistic`` maps a batch of draws to one value (or one row) per draw.
    """
    def chunk(rng, count):
        return statistic(sampler(rng, count))

    if scalar is None:
        probe = np.asarray(statistic(sampler(derive_rng(0), 2)))
        scalar = probe.ndim == 1
    return _run_chunks(chunk, n_samples, seed, scalar)


def gaussian_sampler(mean, cov_factor):
    """Sampler for mean + cov_factor @ g with g standard normal."""
    mean = np.asarray(mean, dtype=np.float64)
    L = np.asarray(cov_factor, dtype=np.float64)

    def sample(rng, count):
        return mean + rng.standard_normal((count, L.shape[1])) @ L.T

    return sample


def mask_sampler(d, kappa):
    def sample(rng, count):
        return 1.0 + kappa * rng.standard_normal((count, d))

    return sample


# ---------------------------------------------------------------- network statistics

@njit
def _loss_block_loop(W, a, X, y, C):
    b, n, d = C.shape
    m = W.shape[0]
    scale = 1.0 / math.sqrt(m)
    out = np.empty(b)
    for t in range(b):
        tot = 0.0
        for i in range(n):
            f = 0.0
            for r in range(m):
                z = 0.0
                for j in range(d):
                    z += W[r, j] * X[i, j] * C[t, i, j]
                if z > 0.0:
                    f += a[r] * z
            res = f * scale - y[i]
            tot += res * res
        out[t] = 0.5 * tot
    return out


@njit
def _grad_block_loop(W, a, X, y, C, row):
    b, n, d = C.shape
    m = W.shape[0]
    scale = 1.0 / math.sqrt(m)
    out = np.zeros((b, d))
    for t in range(b):
        for i in range(n):
            f = 0.0
            zr = 0.0
            for r in range(m):
                z = 0.0
                for j in range(d):
                    z += W[r, j] * X[i, j] * C[t, i, j]
                if r == row:
                    zr = z
                if z > 0.0:
                    f += a[r] * z
            if zr >= 0.0:
                res = f * scale - y[i]
                for j in range(d):
                    out[t, j] += res * X[i, j] * C[t, i, j]
        for j in range(d):
            out[t, j] *= a[row] * scale
    return out


def _loss_block_numpy(W, a, X, y, C):
    Xc = X[None, :, :] * C
    Z = Xc @ W.T
    res = np.maximum(Z, 0.0) @ a / math.sqrt(W.shape[0]) - y
    return 0.5 * np.sum(res * res, axis=1)


def _grad_block_numpy(W, a, X, y, C, row):
    Xc = X[None, :, :] * C
    Z = Xc @ W.T
    res = np.maximum(Z, 0.0) @ a / math.sqrt(W.shape[0]) - y
    weight = (Z[:, :, row] >= 0.0) * res
    return a[row] / math.sqrt(W.shape[0]) * np.einsum("bi,bid->bd", weight, Xc)


def _blocked(fn, n, d, kappa):
    # sequential sub-blocks of one chunk's stream keep memory bounded
    block = max(1, _BLOCK_FLOATS // (n * d))

    def chunk(rng, count):
        parts = []
        done = 0
        while done < count:
            b = min(block, count - done)
            C = 1.0 + kappa * rng.standard_normal((b, n, d))
            parts.append(fn(C))
            done += b
        return np.concatenate(parts, axis=0)

    return chunk


def mc_masked_loss(net, data, kappa, n_batches, seed):
    """Estimate E_C[L_C(W)] from ``n_batches`` independent mask batches."""
    if n_batches < 2:
        raise ValueError(f"n_batches must be >= 2, got {n_batches}")
    if kappa == 0.0:
        return McEstimate(clean_loss(net, data), 0.0, int(n_batches), seed)
    W, a, X, y = net.W, net.a, data.inputs, data.targets
    kern = _loss_block_loop if NUMBA_ENABLED else _loss_block_numpy
    chunk = _blocked(lambda C: kern(W, a, X, y, C), data.n, data.d, kappa)
    return _run_chunks(chunk, n_batches, seed, scalar=True)


def mc_masked_gradient(net, data, kappa, r, n_batches, seed):
    """Estimate E_C[grad_{w_r} L_C(W)] from ``n_batches`` mask batches."""
    if n_batches < 2:
        raise ValueError(f"n_batches must be >= 2, got {n_batches}")
    if kappa == 0.0:
        return McEstimate(clean_gradient(net, data)[r], np.zeros(net.d), int(n_batches), seed)
    W, a, X, y = net.W, net.a, data.inputs, data.targets
    kern = _grad_block_loop if NUMBA_ENABLED else _grad_block_numpy
    chunk = _blocked(lambda C: kern(W, a, X, y, C, int(r)), data.n, data.d, kappa)
    return _run_chunks(chunk, n_batches, seed, scalar=False)


def mc_activation_expectation(w, x, kappa, n_samples, seed):
    """Estimate E_c[relu(w.(x * c))] for c ~ N(1, kappa^2 I)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if kappa == 0.0:
        return McEstimate(max(float(w @ x), 0.0), 0.0, int(n_samples), seed)
    u = w * x
    return mc_expectation(
        mask_sampler(x.size, kappa), lambda c: np.maximum(c @ u, 0.0), n_samples, seed, scalar=True
    )
