import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothvq.errors import CorruptionError, InsufficientDataError, ShapeError
from smoothvq.synth import generate_keys
from smoothvq.transform import TransformConfig, calibrate_smoothing, transform_keys
from smoothvq.vq import (
    Codebook,
    VQConfig,
    avg_bits,
    decode,
    encode,
    kmeans_train,
    lossless_codebook,
    memory_footprint,
    nearest_centroid,
    pack_codes,
    parse_kv_configs,
    quantization_mse,
    unpack_codes,
)


def brute_force_2means(points):
    """Best objective over every 2-partition of a small point set."""
    best = None
    for labels in itertools.product([0, 1], repeat=len(points)):
        labels = np.array(labels)
        if labels.min() == labels.max():
            continue
        cents = np.stack([points[labels == j].mean(axis=0) for j in (0, 1)])
        obj = ((points - cents[labels]) ** 2).sum()
        if best is None or obj < best[0]:
            best = (obj, cents)
    return best


def _sorted_rows(a):
    return a[np.lexsort(a.T[::-1])]


def test_config_parsing():
    cfg = VQConfig.parse("d8b12", 128)
    assert (cfg.d, cfg.b, cfg.m, cfg.n_centroids, cfg.row_bytes) == (8, 12, 16, 4096, 24)
    k, v = parse_kv_configs("K-d8b12/V-d8b8", 128)
    assert (k.name, v.name) == ("d8b12", "d8b8")
    with pytest.raises(ValueError):
        VQConfig(3, 8, 128)
    with pytest.raises(ValueError):
        VQConfig(4, 17, 128)
    with pytest.raises(ValueError):
        VQConfig.parse("d4x8", 128)


def test_kmeans_singletons():
    cb = kmeans_train(np.array([[0, 0], [10, 10]], np.float32), 1)
    assert np.array_equal(_sorted_rows(cb.centroids), np.array([[0, 0], [10, 10]], np.float32))


def test_kmeans_matches_brute_force():
    pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], np.float32)
    obj, cents = brute_force_2means(pts.astype(np.float64))
    cb = kmeans_train(pts, 1, seed=5)
    np.testing.assert_allclose(_sorted_rows(cb.centroids), _sorted_rows(cents), atol=1e-6)
    np.testing.assert_allclose(_sorted_rows(cb.centroids), [[0, 0.5], [10, 10.5]], atol=1e-6)
    assert cb.final_objective == pytest.approx(obj, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_random_small_sets_reach_optimum(seed):
    rng = np.random.default_rng(seed)
    pts = np.concatenate([rng.normal(0, 0.3, (4, 2)), rng.normal(6, 0.3, (4, 2))]).astype(np.float32)
    obj, _ = brute_force_2means(pts.astype(np.float64))
    assert kmeans_train(pts, 1, seed=seed).final_objective == pytest.approx(obj, rel=1e-5)


def test_kmeans_identical_points_reseeds_empty_cluster():
    pts = np.full((6, 3), 2.5, np.float32)
    cb = kmeans_train(pts, 1)
    assert np.all(cb.centroids == 2.5)
    assert cb.final_objective == 0.0


def test_kmeans_errors():
    with pytest.raises(InsufficientDataError):
        kmeans_train(np.zeros((3, 2), np.float32), 2)
    with pytest.raises(ShapeError):
        kmeans_train(np.zeros(8, np.float32), 1)


def test_kmeans_objective_monotone_and_deterministic():
    x = np.random.default_rng(2).standard_normal((4000, 4)).astype(np.float32)
    a = kmeans_train(x, 6, max_iters=15, seed=9)
    b = kmeans_train(x, 6, max_iters=15, seed=9)
    assert np.array_equal(a.centroids, b.centroids)
    h = np.array(a.history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_encode_examples():
    cb = Codebook(VQConfig(2, 1, 2), np.array([[0, 0], [1, 1]], np.float32))
    assert encode(np.array([[0.9, 1.2]]), cb).tolist() == [[1]]
    assert encode(np.array([[0.5, 0.5]]), cb).tolist() == [[0]]


def test_tie_rule_lowest_index_for_duplicate_centroids():
    c = np.array([[1, 1], [3, 3], [1, 1], [3, 3]], np.float32)
    codes, _ = nearest_centroid(np.array([[1, 1], [3, 3], [2, 2]], np.float32), c)
    assert codes.tolist() == [0, 1, 0]


def test_nearest_matches_float64_brute_force():
    rng = np.random.default_rng(4)
    c = rng.standard_normal((64, 4)).astype(np.float32)
    x = np.concatenate([rng.standard_normal((500, 4)), c[:20] + 1e-7]).astype(np.float32)
    codes, dist = nearest_centroid(x, c)
    full = ((x[:, None, :].astype(np.float64) - c[None].astype(np.float64)) ** 2).sum(-1)
    assert np.array_equal(codes, full.argmin(axis=1))
    np.testing.assert_allclose(dist, full.min(axis=1), rtol=1e-12)


def test_decode_examples():
    cb = Codebook(VQConfig(2, 1, 4), np.array([[1, 2], [3, 4]], np.float32))
    assert decode(np.zeros((3, 2), np.uint16), cb).tolist() == [[1, 2, 1, 2]] * 3
    assert decode(np.array([[1, 0]]), cb).tolist() == [[3, 4, 1, 2]]


def test_fixed_point_and_lossless(rng):
    cfg = VQConfig(4, 6, 16)
    cb = Codebook(cfg, rng.standard_normal((64, 4)).astype(np.float32))
    x = decode(rng.integers(0, 64, (10, 4)), cb)
    assert np.array_equal(decode(encode(x, cb), cb), x)
    assert quantization_mse(x, cb) == 0.0
    y = rng.standard_normal((8, 16)).astype(np.float32)
    lcb = lossless_codebook(y, VQConfig(4, 8, 16))
    assert np.array_equal(decode(encode(y, lcb), lcb), y)


def test_mse_single_centroid_offset():
    cb = Codebook(VQConfig(2, 1, 2), np.array([[0, 0], [100, 100]], np.float32))
    assert quantization_mse(np.array([[0.25, -0.25]]), cb) == pytest.approx(0.0625)


def test_decode_error_equals_objective():
    x = np.random.default_rng(0).standard_normal((300, 16)).astype(np.float32)
    cb = kmeans_train(x.reshape(-1, 4), 4, seed=0, head_dim=16)
    assert quantization_mse(x, cb) == pytest.approx(cb.final_objective / x.size, abs=1e-6)


def test_dual_transform_lowers_mse_on_outlier_keys():
    k = generate_keys(2048, 128, 4, 20.0, seed=11)
    s = calibrate_smoothing(k, TransformConfig(128))
    kt = transform_keys(k, s)
    raw = kmeans_train(k.reshape(-1, 4), 8, 10, seed=0, head_dim=128)
    dual = kmeans_train(kt.reshape(-1, 4), 8, 10, seed=0, head_dim=128)
    assert quantization_mse(kt, dual) < quantization_mse(k, raw)


def test_parallel_encode_is_identical():
    x = np.random.default_rng(8).standard_normal((3000, 32)).astype(np.float32)
    cb = kmeans_train(x.reshape(-1, 4), 8, 3, head_dim=32)
    assert np.array_equal(encode(x, cb), encode(x, cb, workers=4))


def test_encode_shape_mismatch():
    cb = Codebook(VQConfig(2, 1, 4), np.zeros((2, 2), np.float32))
    with pytest.raises(ShapeError):
        encode(np.zeros((1, 6)), cb)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 16), st.integers(1, 12), st.integers(0, 9), st.data())
def test_pack_round_trip(b, m, n, data):
    codes = np.array(
        data.draw(st.lists(st.lists(st.integers(0, (1 << b) - 1), min_size=m, max_size=m), min_size=n, max_size=n)),
        dtype=np.uint16,
    ).reshape(n, m)
    packed = pack_codes(codes, b)
    assert packed.shape == (n, (m * b + 7) // 8)
    assert np.array_equal(unpack_codes(packed, b, m), codes)


def test_pack_is_lsb_first():
    assert pack_codes(np.array([[1, 2]]), 3).tolist() == [[0b010001]]
    assert pack_codes(np.array([[0xABC, 0x123]]), 12).tolist() == [[0xBC, 0x3A, 0x12]]


def test_unpack_rejects_wrong_length():
    with pytest.raises(CorruptionError):
        unpack_codes(np.zeros((2, 3), np.uint8), 12, 4)


def test_footprint_examples():
    assert memory_footprint(VQConfig(4, 8, 128), 0).codebook_bytes == 2048
    assert memory_footprint(VQConfig(4, 8, 128), 1).index_bytes == 32
    assert memory_footprint(VQConfig(8, 12, 128), 1).index_bytes == 24
    assert memory_footprint(VQConfig(4, 10, 128), 3).index_bytes == 3 * 40


def test_avg_bits_table_values():
    assert avg_bits(VQConfig(4, 8, 128)) == 2.0
    assert avg_bits(VQConfig(8, 12, 128)) == 1.5
    assert avg_bits(*parse_kv_configs("K-d8b12/V-d8b8", 128)) == 1.25
