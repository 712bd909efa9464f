"""Fused dequantize-attention decode over a quantized KV cache.

The engine walks the quantized tokens in blocks of ``block_size``: key
scores come from gathering a per-query lookup table, value rows are decoded
per block, and an online softmax state ``(m, l, o)`` absorbs each block.
Full-precision residual tokens are folded into the same state last. The
quantized range can be cut into contiguous splits whose partial states are
merged with a logsumexp reduction.

Block loads go through a double-buffered loader that mirrors a GPU kernel's
async copy pipeline; on the host it only changes *when* a block is
fetched, which is what the byte counters and the event trace record.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .kvcache import CacheConfig, QuantizedKVCache, materialize
from .transform import as_head_matrix
from .vq import Codebook, memory_footprint, validate_codes


@dataclass(frozen=True)
class TileConfig:
    block_size: int = 128
    num_splits: int = 1
    prefetch: bool = True

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.num_splits < 1:
            raise ConfigError("num_splits must be >= 1")


@dataclass
class Traffic:
    """Bytes moved by one attention call, counted at fp16 for dense data."""

    code_bytes_read: int = 0
    codebook_bytes_read: int = 0
    residual_bytes_read: int = 0
    fp16_equiv_bytes: int = 0
    # only the non-fused baselines touch these
    dense_bytes_read: int = 0
    dense_bytes_written: int = 0

    @property
    def cache_bytes_read(self) -> int:
        return self.code_bytes_read + self.codebook_bytes_read + self.residual_bytes_read

    @property
    def total_bytes(self) -> int:
        return self.cache_bytes_read + self.dense_bytes_read + self.dense_bytes_written

    def as_dict(self) -> dict:
        return {
            "code_bytes_read": self.code_bytes_read,
            "codebook_bytes_read": self.codebook_bytes_read,
            "residual_bytes_read": self.residual_bytes_read,
            "dense_bytes_read": self.dense_bytes_read,
            "dense_bytes_written": self.dense_bytes_written,
            "fp16_equiv_bytes": self.fp16_equiv_bytes,
        }


@dataclass(frozen=True)
class AttentionOutput:
    o: np.ndarray
    lse: float
    traffic: Traffic = field(default_factory=Traffic)
    events: tuple = field(default=(), repr=False)


class Partial(NamedTuple):
    """Unnormalized split result: ``o`` is sum_j exp(s_j - m) v_j and ``l`` the matching sum."""

    o: np.ndarray
    l: float
    m: float


@dataclass(frozen=True)
class LookupTable:
    entries: np.ndarray  # (M, 2**b): dot of each query sub-vector with each key centroid
    scale: float

    def scores(self, codes: np.ndarray) -> np.ndarray:
        """Scaled scores for a (B, M) block of key codes."""
        m = self.entries.shape[0]
        gathered = self.entries[np.arange(m), codes]
        return gathered.sum(axis=1, dtype=np.float32) * np.float32(self.scale)


def build_lut(q, cb_k: Codebook) -> LookupTable:
    q = as_head_matrix(q, "q")
    if q.shape != (1, cb_k.config.head_dim):
        raise ShapeError(f"query must be 1 x {cb_k.config.head_dim}, got {q.shape}")
    sub = q.reshape(cb_k.config.m, cb_k.config.d)
    return LookupTable(sub @ cb_k.centroids.T, 1.0 / math.sqrt(cb_k.config.head_dim))


# --- online softmax ---------------------------------------------------------


class _SoftmaxState:
    def __init__(self, dim: int):
        self.m = np.float32(-np.inf)
        self.l = np.float32(0.0)
        self.o = np.zeros(dim, dtype=np.float32)

    def scores_step(self, s: np.ndarray) -> tuple:
        m_new = np.maximum(self.m, s.max())
        p = np.exp(s - m_new)
        alpha = np.exp(self.m - m_new)
        l_new = alpha * self.l + p.sum(dtype=np.float32)
        return m_new, p, alpha, l_new

    def values_step(self, m_new, p, alpha, l_new, values: np.ndarray) -> None:
        self.o = alpha * self.o + p @ values
        self.l = l_new
        self.m = m_new

    def partial(self) -> Partial:
        return Partial(self.o, float(self.l), float(self.m))


# --- block loader -----------------------------------------------------------


class _BlockLoader:
    """Double-buffered block source over one split's quantized range.

    With ``prefetch`` the key block for step i+1 is issued before the value
    product of step i and waited on at the end of step i; value blocks are
    issued before the score computation. Without it every load is issued and
    waited on at the point of use. Either way each block is read once.
    """

    def __init__(self, cache: QuantizedKVCache, blocks: list, traffic: Traffic, trace: list | None):
        self.cache = cache
        self.blocks = blocks
        self.traffic = traffic
        self.trace = trace
        self.key_row_bytes = cache.config.key_cfg.row_bytes
        self.value_row_bytes = cache.config.value_cfg.row_bytes
        self._inflight: dict = {}

    def _log(self, *event) -> None:
        if self.trace is not None:
            self.trace.append(event)

    def issue(self, kind: str, i: int) -> None:
        if i >= len(self.blocks) or (kind, i) in self._inflight:
            return
        lo, hi = self.blocks[i]
        if kind == "K":
            data = self.cache.key_codes[lo:hi]
            self.traffic.code_bytes_read += (hi - lo) * self.key_row_bytes
        else:
            data = self.cache.value_codes[lo:hi]
            self.traffic.code_bytes_read += (hi - lo) * self.value_row_bytes
        self._inflight[(kind, i)] = [data, False]
        self._log("issue", kind, i)

    def wait(self, kind: str, i: int) -> None:
        """Barrier: block until the issued load is resident."""
        if i >= len(self.blocks):
            return
        self.issue(kind, i)
        slot = self._inflight[(kind, i)]
        if not slot[1]:
            slot[1] = True
            self._log("wait", kind, i)

    def take(self, kind: str, i: int) -> np.ndarray:
        """Hand a resident block to the compute step, loading synchronously if needed."""
        self.wait(kind, i)
        return self._inflight.pop((kind, i))[0]


def _run_split(
    lut: LookupTable,
    cache: QuantizedKVCache,
    cb_v: Codebook,
    blocks: list,
    tiles: TileConfig,
    traffic: Traffic,
    trace: list | None,
) -> _SoftmaxState:
    dim = cache.config.head_dim
    state = _SoftmaxState(dim)
    loader = _BlockLoader(cache, blocks, traffic, trace)
    n_blocks = len(blocks)
    if tiles.prefetch:
        loader.wait("K", 0)
    for i in range(n_blocks):
        if tiles.prefetch:
            loader.issue("V", i)
        s = lut.scores(loader.take("K", i).astype(np.intp))
        step = state.scores_step(s)
        vc = loader.take("V", i)
        if tiles.prefetch:
            loader.issue("K", i + 1)
        values = cb_v.centroids[vc.astype(np.intp)].reshape(len(vc), dim)
        state.values_step(*step, values)
        if tiles.prefetch:
            loader.wait("K", i + 1)
    return state


def _run_residual(q: np.ndarray, cache: QuantizedKVCache, state: _SoftmaxState, block: int, traffic: Traffic) -> None:
    dim = cache.config.head_dim
    scale = np.float32(1.0 / math.sqrt(dim))
    for lo in range(0, cache.n_residual, block):
        k = cache.key_residual[lo : lo + block]
        v = cache.value_residual[lo : lo + block]
        traffic.residual_bytes_read += 2 * k.shape[0] * dim * 2
        s = (k @ q) * scale
        state.values_step(*state.scores_step(s), v)


def split_blocks(n_quantized: int, tiles: TileConfig) -> list:
    """Contiguous ``(lo, hi)`` block ranges per split."""
    b = tiles.block_size
    edges = [(lo, min(lo + b, n_quantized)) for lo in range(0, n_quantized, b)]
    cuts = np.linspace(0, len(edges), tiles.num_splits + 1).round().astype(int)
    return [edges[cuts[j] : cuts[j + 1]] for j in range(tiles.num_splits)]


def fused_decode_attention(
    q,
    cache: QuantizedKVCache,
    cb_k: Codebook,
    cb_v: Codebook,
    tiles: TileConfig = TileConfig(),
    trace: bool = False,
) -> AttentionOutput:
    """Attention of one already-transformed query row against a quantized cache."""
    cfg = cache.config
    q = as_head_matrix(q, "q")
    if q.shape != (1, cfg.head_dim):
        raise ShapeError(f"query must be 1 x {cfg.head_dim}, got {q.shape}")
    if cache.total_len == 0:
        raise EmptyInputError("attention over an empty cache")
    if cb_k.config != cfg.key_cfg or cb_v.config != cfg.value_cfg:
        raise ConfigError("codebooks do not match the cache config")
    validate_codes(cache.key_codes, cb_k)
    validate_codes(cache.value_codes, cb_v)

    traffic = Traffic(fp16_equiv_bytes=cache.fp16_nbytes())
    events: list | None = [] if trace else None
    lut = build_lut(q, cb_k)
    if cache.n_quantized:
        # one load of each codebook per call; the key codebook feeds the LUT
        traffic.codebook_bytes_read += memory_footprint(cfg.key_cfg, 0).codebook_bytes
        traffic.codebook_bytes_read += memory_footprint(cfg.value_cfg, 0).codebook_bytes

    partials = []
    split_ranges = split_blocks(cache.n_quantized, tiles)
    for j, blocks in enumerate(split_ranges):
        if events is not None:
            events.append(("split", j))
        state = _run_split(lut, cache, cb_v, blocks, tiles, traffic, events)
        if j == len(split_ranges) - 1:
            _run_residual(q[0], cache, state, tiles.block_size, traffic)
        partials.append(state.partial())
    out = split_reduce(partials)
    return AttentionOutput(out.o, out.lse, traffic, tuple(events or ()))


def split_reduce(partials) -> AttentionOutput:
    """Merge per-split online-softmax states in list order."""
    partials = list(partials)
    if not partials:
        raise EmptyInputError("no partial results to merge")
    live = [p for p in partials if p.l > 0]
    if not live:
        raise EmptyInputError("every partial is empty")
    m = np.float32(max(p.m for p in live))
    o = np.zeros_like(np.asarray(live[0].o, dtype=np.float32))
    l = np.float32(0.0)
    for p in live:
        w = np.exp(np.float32(p.m) - m)
        o = o + w * np.asarray(p.o, dtype=np.float32)
        l = l + w * np.float32(p.l)
    return AttentionOutput(o / l, float(m + np.log(l)))


def reference_attention(q, k, v) -> AttentionOutput:
    """Plain softmax attention in float64 with one global max: the oracle."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] == 0:
        raise EmptyInputError("reference attention needs at least one token")
    if k.shape != v.shape or k.shape[1] != q.shape[0]:
        raise ShapeError(f"shapes q{q.shape} K{k.shape} V{v.shape} disagree")
    n, dim = k.shape
    s = (k @ q) / math.sqrt(dim)
    m = s.max()
    p = np.exp(s - m)
    l = p.sum()
    nbytes = n * dim * 2 * 2
    return AttentionOutput(p @ v / l, float(m + math.log(l)), Traffic(fp16_equiv_bytes=nbytes, dense_bytes_read=nbytes))


def dequantize_then_attend(q, cache: QuantizedKVCache, cb_k: Codebook, cb_v: Codebook) -> AttentionOutput:
    """Non-fused baseline: decode the whole cache to fp16 tensors, then attend.

    Counts code and codebook reads, the materialized write, and the dense
    re-read of keys and values.
    """
    kd, vd = materialize(cache, cb_k, cb_v)
    q = as_head_matrix(q, "q")[0]
    n, dim = kd.shape
    if n == 0:
        raise EmptyInputError("attention over an empty cache")
    scale = np.float32(1.0 / math.sqrt(dim))
    s = (kd @ q) * scale
    m = s.max()
    p = np.exp(s - m)
    l = p.sum(dtype=np.float32)
    cfg = cache.config
    nq = cache.n_quantized
    t = Traffic(fp16_equiv_bytes=cache.fp16_nbytes())
    t.code_bytes_read = nq * (cfg.key_cfg.row_bytes + cfg.value_cfg.row_bytes)
    if nq:
        t.codebook_bytes_read = (
            memory_footprint(cfg.key_cfg, 0).codebook_bytes + memory_footprint(cfg.value_cfg, 0).codebook_bytes
        )
    t.residual_bytes_read = cache.n_residual * dim * 2 * 2
    t.dense_bytes_written = nq * dim * 2 * 2
    t.dense_bytes_read = n * dim * 2 * 2
    return AttentionOutput((p @ vd) / l, float(m + np.log(l)), t)


def predicted_traffic(cfg: CacheConfig, n_quantized: int, n_residual: int) -> Traffic:
    """Closed-form bytes the fused path should read for a cache of this shape."""
    kf = memory_footprint(cfg.key_cfg, n_quantized)
    vf = memory_footprint(cfg.value_cfg, n_quantized)
    return Traffic(
        code_bytes_read=kf.index_bytes + vf.index_bytes,
        codebook_bytes_read=(kf.codebook_bytes + vf.codebook_bytes) if n_quantized else 0,
        residual_bytes_read=n_residual * cfg.head_dim * 2 * 2,
        fp16_equiv_bytes=(n_quantized + n_residual) * cfg.head_dim * 2 * 2,
    )


def traffic_report(out: AttentionOutput, n_tokens: int, head_dim: int) -> dict:
    """Cache bytes read relative to reading the same tokens as fp16 keys and values."""
    fp16 = n_tokens * head_dim * 2 * 2
    read = out.traffic.cache_bytes_read
    return {
        "bytes_read": read,
        "fp16_equiv_bytes": fp16,
        "bytes_vs_fp16": read / fp16,
        "compression_ratio": fp16 / read if read else float("inf"),
    }


def relative_error(actual, expected) -> float:
    """max |actual - expected| scaled by max |expected|."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    denom = max(float(np.abs(e).max()) if e.size else 0.0, 1e-30)
    return float(np.abs(a - e).max()) / denom if e.size else 0.0
