"""Quantized KV cache with a full-precision residual window.

Caches are immutable snapshots: ``append`` returns a new cache, so a reader
holding an older snapshot never sees a partially flushed window.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .transform import SmoothingFactors, as_head_matrix, transform_keys
from .vq import Codebook, VQConfig, decode, encode, memory_footprint, validate_codes


@dataclass(frozen=True)
class CacheConfig:
    key_cfg: VQConfig
    value_cfg: VQConfig
    residual_len: int = 128

    def __post_init__(self):
        if self.residual_len < 0:
            raise ConfigError("residual_len must be >= 0")
        if self.key_cfg.head_dim != self.value_cfg.head_dim:
            raise ConfigError("key and value configs must share head_dim")

    @property
    def head_dim(self) -> int:
        return self.key_cfg.head_dim

    @property
    def flush_at(self) -> int:
        """Residual row count that triggers a batch flush."""
        return max(2 * self.residual_len, 1)

    @property
    def flush_rows(self) -> int:
        return max(self.residual_len, 1)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QuantizedKVCache:
    config: CacheConfig
    key_codes: np.ndarray = field(repr=False)
    value_codes: np.ndarray = field(repr=False)
    # residual keys are stored already dual-transformed
    key_residual: np.ndarray = field(repr=False)
    value_residual: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.config.head_dim
        if self.key_codes.shape[0] != self.value_codes.shape[0]:
            raise ShapeError("key and value code matrices must have equal row counts")
        if self.key_residual.shape != self.value_residual.shape:
            raise ShapeError("key and value residual windows must have equal shapes")
        if self.key_residual.shape[1:] != (d,):
            raise ShapeError(f"residual rows must have head_dim {d}")
        if self.key_codes.shape[1:] != (self.config.key_cfg.m,):
            raise ShapeError("key code width does not match the key config")
        if self.value_codes.shape[1:] != (self.config.value_cfg.m,):
            raise ShapeError("value code width does not match the value config")
        for name in ("key_codes", "value_codes", "key_residual", "value_residual"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @classmethod
    def empty(cls, config: CacheConfig) -> "QuantizedKVCache":
        d = config.head_dim
        return cls(
            config,
            np.zeros((0, config.key_cfg.m), np.uint16),
            np.zeros((0, config.value_cfg.m), np.uint16),
            np.zeros((0, d), np.float32),
            np.zeros((0, d), np.float32),
        )

    @property
    def n_quantized(self) -> int:
        return self.key_codes.shape[0]

    @property
    def n_residual(self) -> int:
        return self.key_residual.shape[0]

    @property
    def total_len(self) -> int:
        return self.n_quantized + self.n_residual

    def __len__(self) -> int:
        return self.total_len

    def nbytes(self) -> int:
        """Storage cost: packed codes, fp16 residual rows and both fp16 codebooks."""
        kf = memory_footprint(self.config.key_cfg, self.n_quantized)
        vf = memory_footprint(self.config.value_cfg, self.n_quantized)
        residual = self.n_residual * self.config.head_dim * 2 * 2
        return kf.total + vf.total + residual

    def fp16_nbytes(self) -> int:
        return self.total_len * self.config.head_dim * 2 * 2


def _check_codebooks(cfg: CacheConfig, cb_k: Codebook, cb_v: Codebook) -> None:
    if cb_k.config != cfg.key_cfg:
        raise ConfigError(f"key codebook {cb_k.config} does not match cache config {cfg.key_cfg}")
    if cb_v.config != cfg.value_cfg:
        raise ConfigError(f"value codebook {cb_v.config} does not match cache config {cfg.value_cfg}")


def prefill(
    k,
    v,
    s: SmoothingFactors,
    cb_k: Codebook,
    cb_v: Codebook,
    cfg: CacheConfig,
    n_quantized: int | None = None,
    workers: int = 1,
) -> QuantizedKVCache:
    """Quantize a prompt's keys and values, keeping the trailing window in full precision.

    ``n_quantized`` overrides where the quantized/residual split falls
    (default ``max(N - residual_len, 0)``); the replay tests use it to match
    the flush boundary of an append sequence.
    """
    k = as_head_matrix(k, "K")
    v = as_head_matrix(v, "V")
    if k.shape != v.shape:
        raise ShapeError(f"K {k.shape} and V {v.shape} differ in shape")
    if k.shape[1] != cfg.head_dim:
        raise ShapeError(f"tensors have head_dim {k.shape[1]}, cache expects {cfg.head_dim}")
    _check_codebooks(cfg, cb_k, cb_v)
    n = k.shape[0]
    q = max(n - cfg.residual_len, 0) if n_quantized is None else n_quantized
    if not 0 <= q <= n:
        raise ConfigError(f"n_quantized={q} outside [0, {n}]")
    kt = transform_keys(k, s)
    return QuantizedKVCache(
        cfg,
        encode(kt[:q], cb_k, workers),
        encode(v[:q], cb_v, workers),
        kt[q:],
        v[q:],
    )


def append(cache: QuantizedKVCache, k, v, s: SmoothingFactors, cb_k: Codebook, cb_v: Codebook) -> QuantizedKVCache:
    """Add one decode-step token and return the new snapshot.

    The key is transformed on arrival. Once the residual window holds
    ``2 * residual_len`` rows the oldest ``residual_len`` rows are encoded in
    one batch (every row when ``residual_len == 0``).
    """
    cfg = cache.config
    k = as_head_matrix(k, "k")
    v = as_head_matrix(v, "v")
    if k.shape != (1, cfg.head_dim) or v.shape != (1, cfg.head_dim):
        raise ShapeError(f"append expects 1 x {cfg.head_dim} rows, got {k.shape} and {v.shape}")
    _check_codebooks(cfg, cb_k, cb_v)
    kres = np.concatenate([cache.key_residual, transform_keys(k, s)])
    vres = np.concatenate([cache.value_residual, v])
    if len(kres) < cfg.flush_at:
        return replace(cache, key_residual=kres, value_residual=vres)
    f = cfg.flush_rows
    return QuantizedKVCache(
        cfg,
        np.concatenate([cache.key_codes, encode(kres[:f], cb_k)]),
        np.concatenate([cache.value_codes, encode(vres[:f], cb_v)]),
        kres[f:],
        vres[f:],
    )


def materialize(cache: QuantizedKVCache, cb_k: Codebook, cb_v: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Decoded (transformed) keys and values in token order."""
    _check_codebooks(cache.config, cb_k, cb_v)
    kq = decode(validate_codes(cache.key_codes, cb_k), cb_k)
    vq = decode(validate_codes(cache.value_codes, cb_v), cb_v)
    return (
        np.concatenate([kq, cache.key_residual]),
        np.concatenate([vq, cache.value_residual]),
    )
