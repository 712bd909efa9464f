import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothvq.errors import ConfigError, ShapeError
from smoothvq.kvcache import CacheConfig, QuantizedKVCache, append, materialize, prefill
from smoothvq.transform import transform_keys
from smoothvq.vq import decode, encode, memory_footprint


def _kv(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)).astype(np.float32), rng.standard_normal((n, dim)).astype(np.float32)


def test_prefill_boundaries(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    r = cfg.residual_len
    k, v = _kv(r + 1, 16)
    at = prefill(k[:r], v[:r], s, cb_k, cb_v, cfg)
    assert (at.n_quantized, at.n_residual) == (0, r)
    over = prefill(k, v, s, cb_k, cb_v, cfg)
    assert (over.n_quantized, over.n_residual, len(over)) == (1, r, r + 1)


def test_prefill_composition(d4b8_setup):
    cfg, s, cb_k, cb_v = d4b8_setup
    k, v = _kv(4096, 128, 1)
    cache = prefill(k, v, s, cb_k, cb_v, cfg)
    assert cache.n_quantized == 3968
    kt = transform_keys(k, s)
    k_hat, v_hat = materialize(cache, cb_k, cb_v)
    assert np.array_equal(k_hat[:3968], decode(encode(kt[:3968], cb_k), cb_k))
    assert np.array_equal(k_hat[3968:], kt[3968:])
    assert np.array_equal(v_hat[:3968], decode(encode(v[:3968], cb_v), cb_v))
    assert np.array_equal(v_hat[3968:], v[3968:])


def test_materialize_edge_cases(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    k0, v0 = materialize(QuantizedKVCache.empty(cfg), cb_k, cb_v)
    assert k0.shape == v0.shape == (0, 16)
    k, v = _kv(3, 16)
    cache = prefill(k, v, s, cb_k, cb_v, cfg)
    kk, vv = materialize(cache, cb_k, cb_v)
    assert np.array_equal(kk, transform_keys(k, s)) and np.array_equal(vv, v)
    q_only = prefill(k, v, s, cb_k, cb_v, cfg, n_quantized=3)
    kk, vv = materialize(q_only, cb_k, cb_v)
    assert np.array_equal(kk, decode(q_only.key_codes, cb_k))
    assert np.array_equal(vv, decode(q_only.value_codes, cb_v))


def test_append_to_empty(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    k, v = _kv(1, 16)
    c = append(QuantizedKVCache.empty(cfg), k, v, s, cb_k, cb_v)
    assert (len(c), c.n_residual, c.n_quantized) == (1, 1, 0)


def test_flush_counts(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    r = cfg.residual_len
    k, v = _kv(4 * r, 16)
    cache = QuantizedKVCache.empty(cfg)
    seen = []
    for i in range(4 * r):
        cache = append(cache, k[i : i + 1], v[i : i + 1], s, cb_k, cb_v)
        seen.append(cache.n_quantized)
        assert cache.n_residual < cfg.flush_at
        assert cache.key_codes.shape[0] == cache.value_codes.shape[0]
    assert seen[2 * r - 2] == 0 and seen[2 * r - 1] == r
    assert seen[-1] == 3 * r


def test_residual_zero_flushes_every_row(small_setup):
    _, s, cb_k, cb_v = small_setup
    cfg = CacheConfig(cb_k.config, cb_v.config, 0)
    k, v = _kv(5, 16)
    cache = QuantizedKVCache.empty(cfg)
    for i in range(5):
        cache = append(cache, k[i : i + 1], v[i : i + 1], s, cb_k, cb_v)
        assert (cache.n_quantized, cache.n_residual) == (i + 1, 0)


def test_snapshots_are_immutable(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    k, v = _kv(10, 16)
    a = prefill(k, v, s, cb_k, cb_v, cfg)
    b = append(a, k[:1], v[:1], s, cb_k, cb_v)
    assert len(a) == 10 and len(b) == 11
    with pytest.raises(ValueError):
        a.key_codes[0, 0] = 1


@settings(max_examples=40, deadline=None)
@given(
    prompt=st.integers(0, 20),
    steps=st.integers(0, 25),
    residual=st.sampled_from([0, 1, 3, 4]),
    seed=st.integers(0, 2**16),
)
def test_replay_oracle(small_setup, prompt, steps, residual, seed):
    _, s, cb_k, cb_v = small_setup
    cfg = CacheConfig(cb_k.config, cb_v.config, residual)
    k, v = _kv(prompt + steps, 16, seed)
    cache = prefill(k[:prompt], v[:prompt], s, cb_k, cb_v, cfg)
    for i in range(prompt, prompt + steps):
        cache = append(cache, k[i : i + 1], v[i : i + 1], s, cb_k, cb_v)
    oneshot = prefill(k, v, s, cb_k, cb_v, cfg, n_quantized=cache.n_quantized)
    for a, b in zip(materialize(cache, cb_k, cb_v), materialize(oneshot, cb_k, cb_v)):
        assert a.tobytes() == b.tobytes()


def test_nbytes_accounting(d4b8_setup):
    cfg, s, cb_k, cb_v = d4b8_setup
    k, v = _kv(300, 128)
    cache = prefill(k, v, s, cb_k, cb_v, cfg)
    fp = memory_footprint(cfg.key_cfg, 172)
    assert cache.nbytes() == 2 * fp.total + 128 * 128 * 4
    assert cache.fp16_nbytes() == 300 * 128 * 4


def test_prefill_errors(small_setup):
    cfg, s, cb_k, cb_v = small_setup
    k, v = _kv(4, 16)
    with pytest.raises(ShapeError):
        prefill(k, v[:3], s, cb_k, cb_v, cfg)
    with pytest.raises(ConfigError):
        prefill(k, v, s, cb_k, cb_v, cfg, n_quantized=9)
    with pytest.raises(ShapeError):
        append(QuantizedKVCache.empty(cfg), k[:2], v[:2], s, cb_k, cb_v)
