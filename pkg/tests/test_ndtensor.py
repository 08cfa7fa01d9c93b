"""Shape/dtype plumbing: the checked wrappers must reject what numpy forgives."""

import numpy as np
import pytest

from dynmask import DegenerateRowError, DimensionError
from dynmask import ndtensor


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    np.testing.assert_allclose(ndtensor.matmul(a, b), a @ b, rtol=1e-13)


def test_matmul_rejects_inner_mismatch():
    a = np.zeros((4, 5))
    b = np.zeros((6, 3))
    with pytest.raises(DimensionError):
        ndtensor.matmul(a, b)


def test_matmul_rejects_integer_dtype():
    with pytest.raises(DimensionError):
        ndtensor.matmul(np.zeros((2, 2), dtype=np.int64), np.zeros((2, 2)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_rows_sum_to_one(dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 9)).astype(dtype)
    p = ndtensor.softmax_row(x)
    assert p.dtype == x.dtype
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_handles_neg_inf_exactly():
    x = np.array([[0.0, -np.inf, 1.0, -np.inf]])
    p = ndtensor.softmax_row(x)
    assert p[0, 1] == 0.0 and p[0, 3] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], np.exp([0.0, 1.0]) / (1 + np.e), rtol=1e-15)


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        ndtensor.softmax_row(np.full((1, 4), -np.inf))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8))
    np.testing.assert_allclose(ndtensor.softmax_row(x), ndtensor.softmax_row(x + 100.0),
                               atol=1e-12)


def test_softplus_large_input_is_identity_tail():
    x = np.array([-50.0, 0.0, 50.0, 800.0])
    y = ndtensor.softplus(x)
    assert y[0] == pytest.approx(np.exp(-50.0), rel=1e-6)
    assert y[1] == pytest.approx(np.log(2.0), rel=1e-12)
    assert y[2] == pytest.approx(50.0, rel=1e-12)
    assert np.isfinite(y[3]) and y[3] == 800.0


def test_sigmoid_saturates_without_overflow():
    y = ndtensor.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert y[0] == 0.0 and y[1] == 0.5 and y[2] == 1.0


def test_elementwise_dispatch_and_unknown_op():
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(ndtensor.elementwise(x, "scale", 3.0), x * 3.0)
    np.testing.assert_array_equal(ndtensor.elementwise(x, "add_scalar", -1.0), x - 1.0)
    with pytest.raises(DimensionError):
        ndtensor.elementwise(x, "cube")
    with pytest.raises(DimensionError):
        ndtensor.elementwise(x, "scale")
