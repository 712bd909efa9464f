"""Deterministic synthetic key/value/query generators with planted outlier channels."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .transform import is_power_of_two

TAILS = ("gauss", "laplace")


def outlier_channel_indices(dim: int, count: int, seed: int) -> np.ndarray:
    """Sorted channel indices that receive the outlier scale for a given seed."""
    if not 0 <= count <= dim:
        raise ConfigError(f"outlier channel count {count} outside [0, {dim}]")
    rng = np.random.default_rng([seed, 0x0C4A])
    return np.sort(rng.choice(dim, size=count, replace=False))


def _base(rng: np.random.Generator, shape, tail: str) -> np.ndarray:
    if tail == "gauss":
        return rng.standard_normal(shape)
    if tail == "laplace":
        # unit variance
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), shape)
    raise ConfigError(f"unknown tail {tail!r}; expected one of {TAILS}")


def generate_keys(
    n: int,
    dim: int,
    outlier_channels: int = 0,
    outlier_scale: float = 1.0,
    tail: str = "gauss",
    seed: int = 0,
) -> np.ndarray:
    """i.i.d. base samples with ``outlier_channels`` fixed channels multiplied by ``outlier_scale``."""
    if n < 1 or dim < 1:
        raise ConfigError("n and dim must be >= 1")
    if not is_power_of_two(dim):
        raise ConfigError(f"dim must be a power of two, got {dim}")
    rng = np.random.default_rng(seed)
    x = _base(rng, (n, dim), tail)
    x[:, outlier_channel_indices(dim, outlier_channels, seed)] *= outlier_scale
    return x.astype(np.float32)


def generate_kv(n: int, dim: int, seed: int, outlier_channels: int = 4, outlier_scale: float = 20.0):
    """Keys with planted outlier channels and plain Gaussian values, as a pair."""
    k = generate_keys(n, dim, outlier_channels, outlier_scale, "gauss", seed)
    v = np.random.default_rng([seed, 0x5A]).standard_normal((n, dim)).astype(np.float32)
    return k, v


def generate_queries(n: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x9E]).standard_normal((n, dim)).astype(np.float32)
