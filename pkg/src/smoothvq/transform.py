"""Smoothing + Walsh-Hadamard rotation applied as an opposed pair to queries and keys.

Keys are divided channel-wise by ``lambda`` and rotated, queries are multiplied
by ``lambda`` and rotated by the same orthonormal matrix, so ``q @ K.T`` is
unchanged while the key distribution loses its outlier channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ShapeError, SizeError

MAX_HADAMARD_LOG2 = 16
_INV_SQRT2 = np.float32(1.0 / np.sqrt(2.0))


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def as_head_matrix(x, name: str = "x") -> np.ndarray:
    """Widen to a 2-D float32 array, rejecting NaN/Inf."""
    arr = np.asarray(x)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (tokens x head_dim), got shape {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class TransformConfig:
    head_dim: int
    epsilon_floor: float = 1e-6
    calibration_token_budget: int = 256 * 512

    def __post_init__(self):
        if not is_power_of_two(self.head_dim):
            raise ShapeError(f"head_dim must be a power of two, got {self.head_dim}")
        if not self.epsilon_floor > 0:
            raise CalibrationError("epsilon_floor must be positive")


@dataclass(frozen=True)
class SmoothingFactors:
    """Per-channel positive scales; keys are divided by them, queries multiplied."""

    lam: np.ndarray = field(repr=False)
    epsilon_floor: float = 1e-6

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(lam)) or np.any(lam < np.float32(self.epsilon_floor)):
            raise CalibrationError("smoothing factors must be finite and >= epsilon_floor")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def head_dim(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def identity(cls, head_dim: int) -> "SmoothingFactors":
        return cls(np.ones(head_dim, dtype=np.float32))


def walsh_hadamard_matrix(k: int, dtype=np.float32) -> np.ndarray:
    """Orthonormal Sylvester-ordered Hadamard matrix of size ``2**k``, built recursively."""
    if k < 0:
        raise SizeError("k must be non-negative")
    if k > MAX_HADAMARD_LOG2:
        raise SizeError(f"k={k} exceeds the supported maximum {MAX_HADAMARD_LOG2}")
    h = np.ones((1, 1), dtype=np.float64)
    for _ in range(k):
        h = np.block([[h, h], [h, -h]]) / np.sqrt(2.0)
    return h.astype(dtype)


def hadamard_apply(x) -> np.ndarray:
    """Return ``x @ H_D`` with the in-place butterfly transform, O(N D log D).

    Each level scales by 1/sqrt(2) so the result is orthonormal. Rows are
    transformed independently, so results do not depend on batch size.
    """
    out = as_head_matrix(x).copy()
    n, dim = out.shape
    if not is_power_of_two(dim):
        raise ShapeError(f"head dimension {dim} is not a power of two")
    h = 1
    while h < dim:
        view = out.reshape(n, dim // (2 * h), 2, h)
        a = view[:, :, 0, :].copy()
        b = view[:, :, 1, :]
        view[:, :, 0, :] = (a + b) * _INV_SQRT2
        view[:, :, 1, :] = (a - b) * _INV_SQRT2
        h *= 2
    return out


def calibrate_smoothing(samples, cfg: TransformConfig) -> SmoothingFactors:
    """lambda_i = sqrt(max |K[:, i]|) over all pooled calibration tokens.

    ``samples`` may carry leading batch axes; everything but the last axis is
    pooled. Channels whose max is below ``epsilon_floor`` are floored.
    """
    arr = np.asarray(samples, dtype=np.float32)
    if arr.size == 0:
        raise CalibrationError("empty calibration sample set")
    if arr.shape[-1] != cfg.head_dim:
        raise ShapeError(f"samples have head_dim {arr.shape[-1]}, config expects {cfg.head_dim}")
    arr = arr.reshape(-1, cfg.head_dim)
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("calibration samples contain non-finite entries")
    lam = np.sqrt(np.abs(arr).max(axis=0))
    lam = np.maximum(lam, np.float32(cfg.epsilon_floor))
    return SmoothingFactors(lam, cfg.epsilon_floor)


def degenerate_channels(s: SmoothingFactors) -> np.ndarray:
    """Indices of channels that were floored during calibration."""
    return np.flatnonzero(s.lam <= np.float32(s.epsilon_floor))


def _check_lambda(x: np.ndarray, s: SmoothingFactors) -> None:
    if x.shape[1] != s.head_dim:
        raise ShapeError(f"head_dim mismatch: tensor {x.shape[1]} vs smoothing {s.head_dim}")


def transform_keys(k, s: SmoothingFactors) -> np.ndarray:
    """K diag(lambda)^-1 H."""
    k = as_head_matrix(k, "K")
    _check_lambda(k, s)
    return hadamard_apply(k / s.lam)


def transform_query(q, s: SmoothingFactors) -> np.ndarray:
    """q diag(lambda) H."""
    q = as_head_matrix(q, "q")
    _check_lambda(q, s)
    return hadamard_apply(q * s.lam)
