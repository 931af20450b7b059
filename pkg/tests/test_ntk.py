import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from masked_ntk.model import Dataset, NetworkState, derive_rng, init_network, unit_sphere_inputs
from masked_ntk.ntk import (
    KernelMatrix,
    eigenvalues,
    empirical_ntk,
    h_infinity,
    kernel_frobenius_distance,
    load_kernel_csv,
    min_eigenvalue,
    save_kernel_csv,
)

from conftest import within_se


def test_jacobi_examples():
    np.testing.assert_array_equal(eigenvalues(np.eye(3)), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(eigenvalues(np.diag([2.0, 0.5])), [0.5, 2.0], rtol=1e-15)
    assert min_eigenvalue(np.array([[2.0, 1.0], [1.0, 2.0]])) == pytest.approx(1.0, rel=1e-14)


@given(st.integers(0, 10**6), st.integers(1, 12))
def test_jacobi_matches_lapack(seed, n):
    A = derive_rng(400, seed).standard_normal((n, n))
    S = A.T @ A
    ev = eigenvalues(S)
    ref = np.linalg.eigvalsh(S)
    assert np.max(np.abs(ev - ref)) <= 1e-8 * max(1.0, ref[-1])
    assert np.all(np.diff(ev) >= 0.0)


def test_eigenvalues_reject_bad_input():
    for bad in (np.ones((2, 3)), np.array([[np.nan]]), np.zeros((0, 0))):
        with pytest.raises(ValueError):
            eigenvalues(bad)


def test_frobenius_distance():
    d = 0.3
    assert kernel_frobenius_distance(np.eye(2), np.eye(2) + d * np.array([[0, 1], [1, 0]])) == pytest.approx(d * math.sqrt(2), rel=1e-15)
    r = derive_rng(401)
    A, B = r.standard_normal((4, 4)), r.standard_normal((4, 4))
    loop = math.sqrt(sum((A[i, j] - B[i, j]) ** 2 for i in range(4) for j in range(4)))
    assert kernel_frobenius_distance(A, B) == pytest.approx(loop, rel=1e-14)
    with pytest.raises(ValueError):
        kernel_frobenius_distance(np.eye(2), np.eye(3))


def test_h_infinity_examples():
    X = unit_sphere_inputs(6, 4, derive_rng(402))
    H = h_infinity(Dataset(X, np.zeros(6)))
    np.testing.assert_allclose(np.diag(H.entries), 0.5, rtol=1e-15)
    assert H.kind == "infinite"
    orth = h_infinity(Dataset(np.eye(2), [0.0, 0.0])).entries
    assert orth[0, 1] == 0.0
    anti = h_infinity(Dataset([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])).entries
    assert anti[0, 1] == pytest.approx(0.0, abs=1e-16)
    with pytest.raises(ValueError, match="input 2"):
        h_infinity(Dataset([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0]))


def test_h_infinity_pair_against_gaussian_weights():
    # E_w[x.y 1{w.x >= 0} 1{w.y >= 0}] over w ~ N(0, I)
    X = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
    H = h_infinity(Dataset(X, [0.0, 0.0])).entries
    w = derive_rng(403).standard_normal((10**6, 3))
    s = (X[0] @ X[1]) * ((w @ X[0] >= 0) & (w @ X[1] >= 0))
    assert within_se(H[0, 1], s.mean(), s.std(ddof=1) / math.sqrt(s.size))


def test_h_infinity_is_psd():
    for s in range(10):
        X = unit_sphere_inputs(15, 5, derive_rng(404, s))
        assert min_eigenvalue(h_infinity(Dataset(X, np.zeros(15)))) > 0.0


def test_empirical_single_neuron():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    both = empirical_ntk(NetworkState([[1.0, 1.0]], [1.0]), Dataset(x, [0.0, 0.0])).entries
    np.testing.assert_array_equal(both, [[1.0, 0.0], [0.0, 1.0]])
    one = empirical_ntk(NetworkState([[1.0, -1.0]], [1.0]), Dataset(x, [0.0, 0.0])).entries
    np.testing.assert_array_equal(one, [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        empirical_ntk(NetworkState([[1.0, 1.0, 1.0]], [1.0]), Dataset(x, [0.0, 0.0]))


@given(st.integers(0, 10**6))
def test_empirical_entrywise_bound(seed):
    X = unit_sphere_inputs(5, 3, derive_rng(405, seed))
    net = init_network(7, 3, 1.0, seed, seed + 1)
    H = empirical_ntk(net, Dataset(X, np.zeros(5))).entries
    G = np.abs(X @ X.T)
    assert np.all(np.abs(H) <= G + 1e-15)


def test_empirical_concentrates_on_limit():
    X = unit_sphere_inputs(8, 4, derive_rng(406))
    data = Dataset(X, np.zeros(8))
    H = h_infinity(data)
    means = []
    for m in (100, 1000, 10000):
        dist = [kernel_frobenius_distance(empirical_ntk(init_network(m, 4, 1.0, s, s + 100), data), H) for s in range(20)]
        means.append(np.mean(dist))
    assert means[0] > means[1] > means[2]
    # Frobenius error scales like m^(-1/2)
    assert means[0] / means[2] == pytest.approx(10.0, rel=0.3)


def test_kernel_matrix_validation():
    for bad in (np.ones((2, 3)), np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[np.inf]])):
        with pytest.raises(ValueError):
            KernelMatrix(bad, "infinite")
    with pytest.raises(ValueError):
        KernelMatrix(np.eye(2), "finite")
    K = KernelMatrix(np.eye(2), "empirical")
    assert K.n == 2
    with pytest.raises(ValueError):
        K.entries[0, 0] = 3.0


def test_kernel_csv_round_trip(tmp_path):
    X = unit_sphere_inputs(5, 3, derive_rng(407))
    H = h_infinity(Dataset(X, np.zeros(5)))
    path = tmp_path / "k.csv"
    save_kernel_csv(H, path)
    back = load_kernel_csv(path, "infinite")
    np.testing.assert_array_equal(back.entries, H.entries)
