import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smoothvq.errors import CalibrationError, ShapeError, SizeError
from smoothvq.transform import (
    SmoothingFactors,
    TransformConfig,
    calibrate_smoothing,
    degenerate_channels,
    hadamard_apply,
    transform_keys,
    transform_query,
    walsh_hadamard_matrix,
)


def test_hadamard_base_cases():
    assert np.array_equal(walsh_hadamard_matrix(0), np.ones((1, 1), dtype=np.float32))
    h1 = walsh_hadamard_matrix(1, np.float64)
    np.testing.assert_allclose(h1, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-15)
    h2 = walsh_hadamard_matrix(2, np.float64)
    np.testing.assert_allclose(h2[0], [0.5] * 4, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(h2, axis=1), 1.0, atol=1e-15)


@pytest.mark.parametrize("k", range(0, 9))
def test_hadamard_orthonormal_and_symmetric(k):
    h = walsh_hadamard_matrix(k, np.float64)
    assert np.abs(h @ h.T - np.eye(1 << k)).max() <= 1e-6
    assert np.array_equal(h, h.T)


def test_hadamard_rejects_large_order():
    with pytest.raises(SizeError):
        walsh_hadamard_matrix(17)


def test_apply_identity_gives_matrix():
    out = hadamard_apply(np.eye(2, dtype=np.float32))
    np.testing.assert_allclose(out, walsh_hadamard_matrix(1), atol=1e-7)


@pytest.mark.parametrize("dim", [1, 2, 8, 64, 128, 256])
def test_fast_matches_matmul(dim, rng):
    x = rng.standard_normal((33, dim)).astype(np.float32)
    dense = x.astype(np.float64) @ walsh_hadamard_matrix(dim.bit_length() - 1, np.float64)
    assert np.abs(hadamard_apply(x) - dense).max() <= 1e-5


def test_apply_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        hadamard_apply(np.ones((2, 6)))
    with pytest.raises(ShapeError):
        hadamard_apply(np.array([[np.nan, 1.0]]))


def test_apply_is_row_independent(rng):
    x = rng.standard_normal((50, 64)).astype(np.float32)
    full = hadamard_apply(x)
    assert np.array_equal(full[7:8], hadamard_apply(x[7:8]))


rows = st.integers(1, 6).flatmap(
    lambda n: st.sampled_from([2, 4, 16, 64]).flatmap(
        lambda d: arrays(np.float32, (n, d), elements=st.floats(-100, 100, width=32))
    )
)


@settings(max_examples=60, deadline=None)
@given(rows)
def test_involution_and_norm(x):
    y = hadamard_apply(x)
    scale = max(1.0, float(np.abs(x).max()))
    assert np.abs(hadamard_apply(y) - x).max() <= 1e-6 * scale * 10
    n_in = np.linalg.norm(x.astype(np.float64), axis=1)
    n_out = np.linalg.norm(y.astype(np.float64), axis=1)
    assert np.all(np.abs(n_in - n_out) <= 1e-6 * np.maximum(n_in, 1.0) * 10)


def test_row_mean_square_identity(rng):
    for dim in (16, 128, 256):
        x = rng.standard_normal((200, dim)).astype(np.float32)
        ms = np.mean(hadamard_apply(x).astype(np.float64) ** 2, axis=1)
        expected = np.sum(x.astype(np.float64) ** 2, axis=1) / dim
        assert np.abs(ms - expected).max() <= 1e-6


def test_calibration_examples():
    x = np.array([[-4, 1, 0], [1, 1, 0], [2, 1, 0], [0, 1, 0]], dtype=np.float32)
    x = np.pad(x, ((0, 0), (0, 1)))
    s = calibrate_smoothing(x, TransformConfig(4, epsilon_floor=1e-6))
    np.testing.assert_allclose(s.lam, [2.0, 1.0, 1e-6, 1e-6], rtol=1e-6)
    assert degenerate_channels(s).tolist() == [2, 3]
    assert np.all(s.lam > 0)


def test_calibration_pools_leading_axes(rng):
    x = rng.standard_normal((3, 10, 8)).astype(np.float32)
    a = calibrate_smoothing(x, TransformConfig(8))
    b = calibrate_smoothing(x.reshape(30, 8), TransformConfig(8))
    assert np.array_equal(a.lam, b.lam)


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_smoothing(np.zeros((0, 4)), TransformConfig(4))
    with pytest.raises(ShapeError):
        calibrate_smoothing(np.ones((3, 8)), TransformConfig(4))
    with pytest.raises(ValueError):
        TransformConfig(6)


def test_smoothing_factor_validation():
    with pytest.raises(ValueError):
        SmoothingFactors(np.array([1.0, 0.0], dtype=np.float32))
    s = SmoothingFactors.identity(4)
    with pytest.raises(ValueError):
        s.lam[0] = 2.0


def test_unit_lambda_reduces_to_rotation(rng):
    x = rng.standard_normal((5, 32)).astype(np.float32)
    s = SmoothingFactors.identity(32)
    assert np.array_equal(transform_keys(x, s), hadamard_apply(x))
    assert np.array_equal(transform_query(x, s), hadamard_apply(x))
    assert not transform_keys(np.zeros((2, 32)), s).any()
    assert not transform_query(np.zeros((1, 32)), s).any()


def test_smoothed_channel_max_is_sqrt():
    k = np.random.default_rng(7).standard_normal((64, 64)).astype(np.float32)
    s = calibrate_smoothing(k, TransformConfig(64))
    smoothed = np.abs(k / s.lam).max(axis=0)
    np.testing.assert_allclose(smoothed, np.sqrt(np.abs(k).max(axis=0)), atol=1e-6)


def test_score_invariance_example():
    rng = np.random.default_rng(3)
    k = rng.standard_normal((256, 128)).astype(np.float32)
    k[:, 5] *= 30
    q = rng.standard_normal((4, 128)).astype(np.float32)
    s = calibrate_smoothing(k, TransformConfig(128))
    approx = transform_query(q, s).astype(np.float64) @ transform_keys(k, s).astype(np.float64).T
    exact = q.astype(np.float64) @ k.astype(np.float64).T
    assert np.abs(approx - exact).max() / np.abs(exact).max() <= 1e-4


def test_lambda_dim_mismatch():
    with pytest.raises(ShapeError):
        transform_keys(np.ones((2, 8)), SmoothingFactors.identity(4))
