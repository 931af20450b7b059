"""Infinite-width and empirical NTK Gram matrices and their spectra."""
import csv
import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit

SYMMETRY_TOL = 1e-12
_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class KernelMatrix:
    entries: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in ("infinite", "empirical"):
            raise ValueError(f"kind must be 'infinite' or 'empirical', got {self.kind!r}")
        K = np.array(self.entries, dtype=np.float64, copy=True)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel must be square, got shape {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("kernel has non-finite entries")
        if np.max(np.abs(K - K.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError("kernel is not symmetric")
        K.setflags(write=False)
        object.__setattr__(self, "entries", K)

    @property
    def n(self):
        return self.entries.shape[0]


def h_infinity(data):
    """H_ij = x_i.x_j (pi - theta_ij) / (2 pi), the Gaussian-weight limit kernel."""
    X = data.inputs
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        i = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"input {i + 1} is the zero vector")
    G = X @ X.T
    cos = np.clip(G / np.outer(norms, norms), -1.0, 1.0)
    np.fill_diagonal(cos, 1.0)
    H = G * (math.pi - np.arccos(cos)) / (2.0 * math.pi)
    np.fill_diagonal(H, 0.5 * norms * norms)
    return KernelMatrix(0.5 * (H + H.T), "infinite")


def empirical_ntk(net, data):
    """H_ij = (x_i.x_j / m) sum_r 1{w_r.x_i >= 0} 1{w_r.x_j >= 0}."""
    X = data.inputs
    if X.shape[1] != net.d:
        raise ValueError(f"input dimension {X.shape[1]} does not match network dimension {net.d}")
    act = (X @ net.W.T >= 0.0).astype(np.float64)
    H = (X @ X.T) * (act @ act.T) / net.m
    return KernelMatrix(0.5 * (H + H.T), "empirical")


@njit
def _jacobi_eigenvalues(A, tol, max_sweeps):
    n = A.shape[0]
    A = A.copy()
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += A[i, j] * A[i, j]
    scale = math.sqrt(scale)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += A[p, q] * A[p, q]
        if math.sqrt(off) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
    out = np.empty(n)
    for i in range(n):
        out[i] = A[i, i]
    return np.sort(out)


def eigenvalues(K):
    """Ascending eigenvalues of the symmetrized matrix by cyclic Jacobi rotations."""
    A = K.entries if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if A.shape[0] == 0:
        raise ValueError("matrix is empty")
    S = np.ascontiguousarray(0.5 * (A + A.T))
    return _jacobi_eigenvalues(S, _JACOBI_TOL, _JACOBI_MAX_SWEEPS)


def min_eigenvalue(K):
    return float(eigenvalues(K)[0])


def kernel_frobenius_distance(K1, K2):
    A = K1.entries if isinstance(K1, KernelMatrix) else np.asarray(K1, dtype=np.float64)
    B = K2.entries if isinstance(K2, KernelMatrix) else np.asarray(K2, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    D = A - B
    return float(math.sqrt(np.sum(D * D)))


def save_kernel_csv(K, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in K.entries:
            w.writerow([f"{v:.17g}" for v in row])


def load_kernel_csv(path, kind):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh)]
    return KernelMatrix(np.array(rows, dtype=np.float64), kind)
