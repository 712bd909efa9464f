import numpy as np
import pytest

from smoothvq.kvcache import CacheConfig
from smoothvq.synth import generate_kv
from smoothvq.transform import TransformConfig, calibrate_smoothing, transform_keys
from smoothvq.vq import VQConfig, kmeans_train


def train_pair(key_cfg: VQConfig, value_cfg: VQConfig, seed: int = 0, tokens: int = 1024, iters: int = 4):
    """Smoothing plus key/value codebooks trained on a small synthetic draw."""
    dim = key_cfg.head_dim
    k, v = generate_kv(tokens, dim, seed=seed + 500)
    s = calibrate_smoothing(k, TransformConfig(dim))
    kt = transform_keys(k, s)
    cb_k = kmeans_train(kt.reshape(-1, key_cfg.d), key_cfg.b, iters, seed, dim, init_sample=key_cfg.n_centroids * 2)
    cb_v = kmeans_train(v.reshape(-1, value_cfg.d), value_cfg.b, iters, seed + 1, dim, init_sample=value_cfg.n_centroids * 2)
    return s, cb_k, cb_v


@pytest.fixture(scope="session")
def d4b8_setup():
    cfg = VQConfig(4, 8, 128)
    s, cb_k, cb_v = train_pair(cfg, cfg, seed=3)
    return CacheConfig(cfg, cfg, 128), s, cb_k, cb_v


@pytest.fixture(scope="session")
def small_setup():
    cfg = VQConfig(4, 4, 16)
    s, cb_k, cb_v = train_pair(cfg, cfg, seed=1, tokens=256)
    return CacheConfig(cfg, cfg, 4), s, cb_k, cb_v


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
