"""Product quantization: codebook training, encode/decode, packing and byte accounting."""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, CorruptionError, InsufficientDataError, ShapeError
from .transform import as_head_matrix

_EPS32 = float(np.finfo(np.float32).eps)
# distance-matrix elements per chunk in the nearest-centroid search
_CHUNK_ELEMS = 1 << 22
_CONFIG_RE = re.compile(r"^d(\d+)b(\d+)$")


@dataclass(frozen=True)
class VQConfig:
    """Sub-vector dimension ``d``, code width ``b`` bits, head dimension ``head_dim``."""

    d: int
    b: int
    head_dim: int

    def __post_init__(self):
        if self.d < 1 or self.head_dim < 1:
            raise ConfigError("d and head_dim must be positive")
        if not 1 <= self.b <= 16:
            raise ConfigError(f"b must be in [1, 16], got {self.b}")
        if self.head_dim % self.d:
            raise ConfigError(f"d={self.d} does not divide head_dim={self.head_dim}")

    @property
    def m(self) -> int:
        """Number of sub-vectors per token."""
        return self.head_dim // self.d

    @property
    def n_centroids(self) -> int:
        return 1 << self.b

    @property
    def row_bytes(self) -> int:
        """Bytes for one token's packed codes (sub-byte codes padded per row)."""
        return (self.m * self.b + 7) // 8

    @property
    def name(self) -> str:
        return f"d{self.d}b{self.b}"

    @classmethod
    def parse(cls, text: str, head_dim: int) -> "VQConfig":
        match = _CONFIG_RE.match(text.strip())
        if not match:
            raise ConfigError(f"bad config id {text!r}, expected e.g. 'd4b8'")
        return cls(int(match.group(1)), int(match.group(2)), head_dim)


def parse_kv_configs(text: str, head_dim: int) -> tuple[VQConfig, VQConfig]:
    """Parse ``d4b8`` (shared) or ``K-d8b12/V-d8b8`` (mixed precision)."""
    text = text.strip()
    if "/" not in text:
        cfg = VQConfig.parse(text, head_dim)
        return cfg, cfg
    left, right = (part.strip() for part in text.split("/", 1))
    if not (left.upper().startswith("K-") and right.upper().startswith("V-")):
        raise ConfigError(f"mixed config must look like 'K-d8b12/V-d8b8', got {text!r}")
    return VQConfig.parse(left[2:], head_dim), VQConfig.parse(right[2:], head_dim)


def kv_config_name(key_cfg: VQConfig, value_cfg: VQConfig) -> str:
    if key_cfg == value_cfg:
        return key_cfg.name
    return f"K-{key_cfg.name}/V-{value_cfg.name}"


@dataclass(frozen=True, eq=False)
class Codebook:
    config: VQConfig
    centroids: np.ndarray = field(repr=False)
    provenance: str = ""
    # objective after each Lloyd iteration; last entry uses the final centroids
    history: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        expected = (self.config.n_centroids, self.config.d)
        if c.shape != expected:
            raise ShapeError(f"centroids have shape {c.shape}, expected {expected}")
        if not np.all(np.isfinite(c)):
            raise CorruptionError("centroids contain non-finite entries")
        c = np.ascontiguousarray(c)
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def final_objective(self) -> float:
        return self.history[-1] if self.history else float("nan")

    def with_head_dim(self, head_dim: int) -> "Codebook":
        cfg = VQConfig(self.config.d, self.config.b, head_dim)
        return Codebook(cfg, self.centroids, self.provenance, self.history)


# --- nearest centroid -------------------------------------------------------


def _exact_sqdist(x: np.ndarray, c64: np.ndarray) -> np.ndarray:
    diff = x.astype(np.float64)[:, None, :] - c64[None, :, :]
    return np.einsum("pkd,pkd->pk", diff, diff)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid for each row of ``x`` and its squared distance.

    The search runs in float32 via ``|c|^2 - 2 x.c``; rows whose best and
    runner-up are within the float32 error bound are re-resolved with exact
    float64 differences, so the lowest-index tie rule holds.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    p, d = x.shape
    k = c.shape[0]
    c64 = c.astype(np.float64)
    cn = np.einsum("kd,kd->k", c, c)
    cmax = float(cn.max()) if k else 0.0
    codes = np.empty(p, dtype=np.int64)
    rows = max(1, _CHUNK_ELEMS // max(k, 1))
    for start in range(0, p, rows):
        xc = x[start : start + rows]
        scores = cn[None, :] - 2.0 * (xc @ c.T)
        best = scores.argmin(axis=1)
        smin = scores[np.arange(len(xc)), best]
        xn = np.einsum("pd,pd->p", xc, xc)
        tol = 4.0 * (d + 2) * _EPS32 * (xn + cmax) + 1e-30
        close = (scores <= (smin + tol)[:, None]).sum(axis=1) > 1
        if close.any():
            idx = np.flatnonzero(close)
            best[idx] = _exact_sqdist(xc[idx], c64).argmin(axis=1)
        codes[start : start + len(xc)] = best
    diff = x.astype(np.float64) - c64[codes]
    return codes, np.einsum("pd,pd->p", diff, diff)


# --- training ---------------------------------------------------------------


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = len(x)
    x64 = x.astype(np.float64)
    chosen = [int(rng.integers(p))]
    closest = ((x64 - x64[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(p, p=closest / total))
        else:
            nxt = int(rng.integers(p))
        chosen.append(nxt)
        closest = np.minimum(closest, ((x64 - x64[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_train(
    subvectors,
    b: int,
    max_iters: int = 30,
    seed: int = 0,
    head_dim: int | None = None,
    provenance: str = "",
    init_sample: int | None = None,
) -> Codebook:
    """Train ``2**b`` centroids with k-means++ seeding and Lloyd iterations.

    Stops after ``max_iters`` updates or at an assignment fixpoint. An empty
    cluster is re-seeded at the point with the largest current distortion.
    ``init_sample`` caps how many points the k-means++ seeding looks at
    (default ``max(20 * 2**b, 4096)``); Lloyd steps always use every point.
    """
    x = np.asarray(subvectors, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"subvectors must be (P, d), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("subvectors contain non-finite entries")
    p, d = x.shape
    k = 1 << b
    if p < k:
        raise InsufficientDataError(f"{p} sub-vectors cannot seed {k} centroids")
    cfg = VQConfig(d, b, head_dim if head_dim is not None else d)

    rng = np.random.default_rng(seed)
    limit = init_sample if init_sample is not None else max(20 * k, 4096)
    pool = x
    if p > limit:
        pool = x[np.sort(rng.choice(p, size=limit, replace=False))]
    centroids = _kmeanspp_init(pool, k, rng)

    history = []
    prev = None
    for _ in range(max_iters):
        codes, dist = nearest_centroid(x, centroids)
        history.append(float(dist.sum()))
        if prev is not None and np.array_equal(codes, prev):
            break
        prev = codes
        counts = np.bincount(codes, minlength=k)
        sums = np.stack([np.bincount(codes, weights=x[:, j], minlength=k) for j in range(d)], axis=1)
        updated = centroids.astype(np.float64)
        live = counts > 0
        updated[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        if len(empty):
            worst = np.argsort(-dist, kind="stable")[: len(empty)]
            updated[empty] = x[worst]
        centroids = updated.astype(np.float32)

    _, dist = nearest_centroid(x, centroids)
    history.append(float(dist.sum()))
    return Codebook(cfg, centroids, provenance, tuple(history))


def lossless_codebook(x, cfg: VQConfig, provenance: str = "lossless") -> Codebook:
    """Codebook whose centroids are exactly the distinct sub-vectors of ``x``.

    Quantization with it is the identity on ``x``; unused slots repeat the
    last centroid.
    """
    x = as_head_matrix(x)
    if x.shape[1] != cfg.head_dim:
        raise ShapeError(f"tensor head_dim {x.shape[1]} != config {cfg.head_dim}")
    sub = np.unique(x.reshape(-1, cfg.d), axis=0)
    if len(sub) > cfg.n_centroids:
        raise InsufficientDataError(
            f"{len(sub)} distinct sub-vectors exceed {cfg.n_centroids} centroids"
        )
    pad = np.repeat(sub[-1:], cfg.n_centroids - len(sub), axis=0)
    return Codebook(cfg, np.concatenate([sub, pad]), provenance)


# --- encode / decode --------------------------------------------------------


def _check_rows(x: np.ndarray, cb: Codebook) -> None:
    if x.shape[1] != cb.config.head_dim:
        raise ShapeError(f"tensor head_dim {x.shape[1]} != codebook head_dim {cb.config.head_dim}")


def encode(x, cb: Codebook, workers: int = 1) -> np.ndarray:
    """Nearest-centroid code per sub-vector; returns an (N, M) uint16 array.

    With ``workers > 1`` token ranges are encoded on a thread pool; the
    result is identical to the serial path.
    """
    x = as_head_matrix(x)
    _check_rows(x, cb)
    n, m = x.shape[0], cb.config.m
    out = np.empty((n, m), dtype=np.uint16)

    def run(lo: int, hi: int) -> None:
        codes, _ = nearest_centroid(x[lo:hi].reshape(-1, cb.config.d), cb.centroids)
        out[lo:hi] = codes.reshape(hi - lo, m)

    if workers <= 1 or n < 2 * workers:
        run(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, bounds[:-1], bounds[1:]))
    return out


def validate_codes(codes: np.ndarray, cb: Codebook) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != cb.config.m:
        raise ShapeError(f"code matrix shape {codes.shape} does not match M={cb.config.m}")
    if codes.size and (codes.min() < 0 or codes.max() >= cb.config.n_centroids):
        raise CorruptionError(f"code out of range for {cb.config.n_centroids} centroids")
    return codes


def decode(codes, cb: Codebook) -> np.ndarray:
    """Concatenate looked-up centroids per token -> (N, D) float32."""
    codes = validate_codes(codes, cb)
    return cb.centroids[codes].reshape(codes.shape[0], cb.config.head_dim)


def quantization_mse(x, cb: Codebook) -> float:
    x = as_head_matrix(x)
    _check_rows(x, cb)
    err = x.astype(np.float64) - decode(encode(x, cb), cb)
    return float(np.mean(err**2)) if err.size else 0.0


# --- packing ----------------------------------------------------------------


def pack_codes(codes, b: int) -> np.ndarray:
    """Bit-pack codes LSB-first, contiguously per token row, padding each row to a byte."""
    codes = np.asarray(codes)
    n, m = codes.shape
    if b == 8:
        return codes.astype(np.uint8).copy()
    if b == 16:
        return codes.astype("<u2").view(np.uint8).reshape(n, 2 * m).copy()
    bits = ((codes.astype(np.uint32)[:, :, None] >> np.arange(b, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(n, m * b), axis=1, bitorder="little")


def unpack_codes(packed, b: int, m: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    n = packed.shape[0]
    if packed.shape[1] != (m * b + 7) // 8:
        raise CorruptionError("packed code row has the wrong byte length")
    if b == 8:
        return packed.astype(np.uint16)
    if b == 16:
        return packed.copy().view("<u2").reshape(n, m).astype(np.uint16)
    bits = np.unpackbits(packed, axis=1, count=m * b, bitorder="little").reshape(n, m, b)
    weights = (1 << np.arange(b, dtype=np.uint32)).astype(np.uint32)
    return (bits.astype(np.uint32) * weights).sum(axis=2).astype(np.uint16)


# --- accounting -------------------------------------------------------------


class Footprint(NamedTuple):
    codebook_bytes: int
    index_bytes: int

    @property
    def total(self) -> int:
        return self.codebook_bytes + self.index_bytes


def memory_footprint(cfg: VQConfig, n_tokens: int) -> Footprint:
    """fp16 codebook bytes and packed index bytes for ``n_tokens`` rows."""
    return Footprint(cfg.n_centroids * cfg.d * 2, n_tokens * cfg.row_bytes)


def avg_bits(cfg: VQConfig, value_cfg: VQConfig | None = None) -> float:
    """Storage bits per element, b/d; averaged over keys and values when both are given."""
    bits = cfg.b / cfg.d
    if value_cfg is None:
        return bits
    return (bits + value_cfg.b / value_cfg.d) / 2

