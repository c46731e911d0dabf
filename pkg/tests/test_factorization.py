import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsprune.engine import conv2d_forward, im2col
from bsprune.errors import ConvergenceError
from bsprune.factorization import compact_svd, pca_identities_check, reshape_weights, unreshape_weights
from oracles import eigen_singular_values


def _check_invariants(w, f):
    r = min(w.shape)
    assert f.U.shape == (w.shape[0], r) and f.V.shape == (w.shape[1], r) and f.sigma.shape == (r,)
    assert np.abs(f.U.T @ f.U - np.eye(r)).max() <= 1e-5
    assert np.abs(f.V.T @ f.V - np.eye(r)).max() <= 1e-5
    assert np.all(np.diff(f.sigma) <= 0) and f.sigma.min() >= 0
    assert np.linalg.norm(f.reconstruct() - w) <= 1e-5 * (np.linalg.norm(w) + 1e-12)


def test_reshape_row_vector():
    w = np.arange(5, dtype=np.float32).reshape(1, 1, 1, 5)
    assert reshape_weights(w).tolist() == [[0, 1, 2, 3, 4]]


def test_reshape_roundtrip(rng):
    w = rng.normal(size=(3, 3, 4, 8))
    assert np.array_equal(unreshape_weights(reshape_weights(w), w.shape), w)


def test_conv_equals_im2col_times_reshaped_kernel(rng):
    x = rng.normal(size=(2, 6, 6, 4))
    w = rng.normal(size=(3, 3, 4, 5)).astype(np.float32)
    cols, (oh, ow), _ = im2col(x, 3, 3)
    ref = (cols @ reshape_weights(w).astype(np.float64)).reshape(2, oh, ow, 5)
    assert np.abs(conv2d_forward(x, w) - ref).max() <= 1e-12


def test_identity_and_diagonal():
    f = compact_svd(np.eye(2))
    assert np.allclose(f.sigma, [1, 1]) and np.allclose(f.U @ f.V.T, np.eye(2))
    assert np.allclose(compact_svd(np.diag([3.0, 1.0])).sigma, [3, 1])
    assert np.allclose(compact_svd(np.diag([1.0, 3.0])).sigma, [3, 1])


def test_random_27x16_against_eigen_oracle(rng):
    w = rng.normal(size=(27, 16))
    f = compact_svd(w)
    _check_invariants(w, f)
    ref = eigen_singular_values(w)
    assert np.abs(f.sigma - ref[:16]).max() / ref.max() <= 1e-4
    assert np.all(np.abs(f.sigma - ref[:16]) <= 1e-4 * ref[:16])


@pytest.mark.parametrize("shape", [(27, 16), (576, 64), (64, 576), (1, 8)])
def test_invariants_on_seeded_shapes(shape):
    for seed in range(25 if max(shape) < 500 else 5):
        w = np.random.default_rng(seed).normal(size=shape)
        _check_invariants(w, compact_svd(w))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_invariants_property(k, co, seed):
    w = np.random.default_rng(seed).normal(size=(k, co))
    _check_invariants(w, compact_svd(w))


def test_pca_identities(rng):
    for shape in [(27, 16), (8, 20)]:
        w = rng.normal(size=shape)
        res = pca_identities_check(w, compact_svd(w))
        assert res["covariance"] <= 1e-4 * np.linalg.norm(w)
        assert res["projection"] <= 1e-4 * np.linalg.norm(w)


def test_zero_matrix_residuals_exactly_zero():
    w = np.zeros((6, 4))
    assert pca_identities_check(w, compact_svd(w)) == {"covariance": 0.0, "projection": 0.0}


def test_rank_deficient_duplicated_columns(rng):
    w = rng.normal(size=(10, 3))
    w = np.hstack([w, w[:, :2]])
    f = compact_svd(w)
    assert f.sigma.min() <= 1e-6 * f.sigma.max()
    _check_invariants(w, f)


def test_deterministic_and_sign_convention(rng):
    w = rng.normal(size=(18, 7))
    a, b = compact_svd(w), compact_svd(w)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.sigma, b.sigma)
    pivots = np.abs(a.U).argmax(axis=0)
    assert np.all(a.U[pivots, np.arange(7)] >= 0)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        compact_svd(np.array([[1.0, np.nan]]))


def test_non_convergence_carries_residual(rng):
    with pytest.raises(ConvergenceError) as info:
        compact_svd(rng.normal(size=(40, 30)), max_sweeps=1)
    assert info.value.residual > 0
