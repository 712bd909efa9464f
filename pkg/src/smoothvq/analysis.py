"""Distribution diagnostics for key tensors and the transform ablation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .transform import (
    TransformConfig,
    as_head_matrix,
    calibrate_smoothing,
    hadamard_apply,
)
from .vq import VQConfig, decode, encode, kmeans_train

ABLATION_MODES = ("none", "S", "H", "H+S", "S+H")


@dataclass(frozen=True)
class DistributionReport:
    per_channel_max: np.ndarray
    per_channel_p99: np.ndarray
    global_outlier_ratio: float
    excess_kurtosis: float
    row_ms_error: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["per_channel_max"] = self.per_channel_max.tolist()
        d["per_channel_p99"] = self.per_channel_p99.tolist()
        return d


def excess_kurtosis(x) -> float:
    """Population (bias-uncorrected) excess kurtosis over all entries."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    c = a - a.mean()
    m2 = np.mean(c**2)
    if not m2 > 0:
        raise DegenerateInputError("kurtosis is undefined for constant input")
    return float(np.mean(c**4) / m2**2 - 3.0)


def outlier_ratio(x) -> float:
    """max |x| over the root-mean-square of all entries."""
    a = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(a**2))
    if not rms > 0:
        raise DegenerateInputError("outlier ratio is undefined for all-zero input")
    return float(np.abs(a).max() / rms)


def distribution_report(k, original=None) -> DistributionReport:
    """Channel and tail statistics of ``k``.

    ``row_ms_error`` checks the norm identity mean(row^2) == |original row|^2 / D
    row by row. If ``original`` is omitted, ``k`` plays the original and the
    rotated rows are computed with :func:`hadamard_apply`.
    """
    k = as_head_matrix(k, "K")
    n, dim = k.shape
    if n < 2:
        raise ShapeError("distribution_report needs at least 2 rows")
    mags = np.abs(k.astype(np.float64))
    if original is None:
        rotated, base = hadamard_apply(k), k
    else:
        rotated, base = k, as_head_matrix(original, "original")
        if base.shape != k.shape:
            raise ShapeError("original must match K in shape")
    ms = np.mean(rotated.astype(np.float64) ** 2, axis=1)
    expected = np.sum(base.astype(np.float64) ** 2, axis=1) / dim
    return DistributionReport(
        per_channel_max=mags.max(axis=0),
        per_channel_p99=np.percentile(mags, 99, axis=0),
        global_outlier_ratio=outlier_ratio(k),
        excess_kurtosis=excess_kurtosis(k),
        row_ms_error=float(np.abs(ms - expected).max()),
    )


@dataclass(frozen=True)
class Lemma1Result:
    kurtosis_before: float
    kurtosis_after: float
    outlier_ratio_before: float
    outlier_ratio_after: float

    @property
    def heavy_tailed(self) -> bool:
        return self.kurtosis_before > 1.0

    @property
    def holds(self) -> bool:
        """Rotation lowered both kurtosis and outlier ratio, when the input was heavy-tailed."""
        if not self.heavy_tailed:
            return True
        return (
            self.kurtosis_after < self.kurtosis_before
            and self.outlier_ratio_after < self.outlier_ratio_before
        )

    def as_dict(self) -> dict:
        return {**asdict(self), "heavy_tailed": self.heavy_tailed, "holds": self.holds}


def lemma1_check(k) -> Lemma1Result:
    """Compare tail statistics of ``k`` before and after Hadamard rotation."""
    k = as_head_matrix(k, "K")
    rotated = hadamard_apply(k)
    return Lemma1Result(
        excess_kurtosis(k),
        excess_kurtosis(rotated),
        outlier_ratio(k),
        outlier_ratio(rotated),
    )


def _apply_mode(k: np.ndarray, q: np.ndarray, mode: str, eps: float):
    """Transformed keys and queries plus the map from transformed keys back to raw ones."""
    dim = k.shape[1]
    cfg = TransformConfig(dim, eps)
    if mode == "none":
        return k, q, lambda x: x
    if mode == "S":
        lam = calibrate_smoothing(k, cfg).lam
        return k / lam, q * lam, lambda x: x * lam
    if mode == "H":
        return hadamard_apply(k), hadamard_apply(q), hadamard_apply
    if mode == "S+H":
        lam = calibrate_smoothing(k, cfg).lam
        return hadamard_apply(k / lam), hadamard_apply(q * lam), lambda x: hadamard_apply(x) * lam
    if mode == "H+S":
        kh, qh = hadamard_apply(k), hadamard_apply(q)
        lam = calibrate_smoothing(kh, cfg).lam
        return kh / lam, qh * lam, lambda x: hadamard_apply(x * lam)
    raise ValueError(f"unknown transform mode {mode!r}; expected one of {ABLATION_MODES}")


def transform_ablation(
    k,
    q,
    cfg: VQConfig,
    mode: str,
    seed: int = 0,
    max_iters: int = 30,
    epsilon_floor: float = 1e-6,
) -> dict:
    """Quantize keys under one transform composition and measure the damage.

    Returns the key MSE after mapping the reconstruction back to the raw key
    space, so modes are comparable, and the relative Frobenius error of the
    approximate scores ``q' K_hat'^T`` against exact ``q K^T``.
    """
    k = as_head_matrix(k, "K")
    q = as_head_matrix(q, "q")
    if k.shape[1] != q.shape[1] or k.shape[1] != cfg.head_dim:
        raise ShapeError("K, q and config disagree on head_dim")
    kt, qt, back = _apply_mode(k, q, mode, epsilon_floor)
    cb = kmeans_train(kt.reshape(-1, cfg.d), cfg.b, max_iters, seed, head_dim=cfg.head_dim)
    k_hat = decode(encode(kt, cb), cb)
    exact = q.astype(np.float64) @ k.astype(np.float64).T
    approx = qt.astype(np.float64) @ k_hat.astype(np.float64).T
    raw_hat = back(k_hat).astype(np.float64)
    return {
        "mode": mode,
        "mse": float(np.mean((k.astype(np.float64) - raw_hat) ** 2)),
        "score_error": float(np.linalg.norm(approx - exact) / np.linalg.norm(exact)),
    }

