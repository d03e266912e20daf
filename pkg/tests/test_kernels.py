import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from falkdet.errors import InputError
from falkdet.kernels import GaussianKernelParams, gaussian_kernel, iter_kernel_tiles, kernel_block


def naive_block(A, B, sigma):
    out = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            out[i, j] = math.exp(-sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * sigma ** 2))
    return out


@pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan"), float("inf")])
def test_params_reject_bad_sigma(sigma):
    with pytest.raises(InputError):
        GaussianKernelParams(sigma)


def test_gaussian_kernel_examples():
    assert gaussian_kernel([1.5, -2.0, 7.0], [1.5, -2.0, 7.0], GaussianKernelParams(1.0)) == 1.0
    assert gaussian_kernel([0.0], [1.0], GaussianKernelParams(1.0)) == pytest.approx(0.60653, abs=1e-5)
    assert gaussian_kernel([0.0, 0.0], [3.0, 4.0], GaussianKernelParams(5.0)) == pytest.approx(
        math.exp(-0.5), rel=1e-15)


def test_gaussian_kernel_dimension_mismatch():
    with pytest.raises(InputError):
        gaussian_kernel([0.0, 1.0], [0.0], GaussianKernelParams(1.0))


def test_kernel_block_singleton():
    x = np.array([[0.3, -0.2]])
    np.testing.assert_array_equal(kernel_block(x, x, GaussianKernelParams(2.0)), [[1.0]])


def test_kernel_block_matches_naive_loop(rng):
    A, B = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(kernel_block(A, B, GaussianKernelParams(1.3)),
                               naive_block(A, B, 1.3), rtol=0, atol=1e-12)


@pytest.mark.parametrize("tile_rows", [1, 2, 3, 7, 64, 1000])
def test_kernel_block_independent_of_tiling(rng, tile_rows):
    A, B = rng.standard_normal((23, 6)) * 2, rng.standard_normal((11, 6)) * 2
    ref = naive_block(A, B, 2.5)
    np.testing.assert_allclose(kernel_block(A, B, GaussianKernelParams(2.5), tile_rows),
                               ref, rtol=0, atol=1e-12)


def test_self_block_symmetric_unit_diagonal(rng):
    A = rng.standard_normal((40, 5)) * 3 + 100.0   # offset stresses the norm expansion
    K = kernel_block(A, A, GaussianKernelParams(4.0), tile_rows=16)
    np.testing.assert_array_equal(np.diag(K), 1.0)
    assert np.max(np.abs(K - K.T)) <= 1e-12
    assert np.all((K > 0) & (K <= 1))


def test_kernel_block_dimension_mismatch(rng):
    with pytest.raises(InputError):
        kernel_block(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)),
                     GaussianKernelParams(1.0))


def test_tiles_cover_rows_once(rng):
    A, B = rng.standard_normal((10, 2)), rng.standard_normal((3, 2))
    spans = [(s, e) for s, e, _ in iter_kernel_tiles(A, B, GaussianKernelParams(1.0), 4)]
    assert spans == [(0, 4), (4, 8), (8, 10)]
    with pytest.raises(InputError):
        list(iter_kernel_tiles(A, B, GaussianKernelParams(1.0), 0))


def test_large_bandwidth_limit(rng):
    X = rng.standard_normal((30, 8))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    K = kernel_block(X, X[::-1].copy(), GaussianKernelParams(1e6))
    assert np.all(np.abs(K - 1.0) <= 1e-6)


vectors = st.integers(1, 6).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=st.floats(-50, 50)),
    arrays(np.float64, d, elements=st.floats(-50, 50))))


@settings(max_examples=200, deadline=None)
@given(vectors, st.floats(0.05, 100))
def test_kernel_symmetry_and_range(xy, sigma):
    x, y = xy
    p = GaussianKernelParams(sigma)
    k = gaussian_kernel(x, y, p)
    assert k == gaussian_kernel(y, x, p)
    assert 0.0 <= k <= 1.0
    assert gaussian_kernel(x, x, p) == 1.0
