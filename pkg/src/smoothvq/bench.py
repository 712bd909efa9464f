"""Verification and benchmark runs that produce schema-versioned JSON reports."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import jsonschema
import numpy as np

from .attention import (
    TileConfig,
    dequantize_then_attend,
    fused_decode_attention,
    reference_attention,
    relative_error,
    traffic_report,
)
from .kvcache import CacheConfig, QuantizedKVCache, materialize, prefill
from .synth import generate_kv, generate_queries
from .transform import SmoothingFactors, TransformConfig, calibrate_smoothing, transform_keys, transform_query
from .vq import Codebook, VQConfig, avg_bits, kmeans_train, kv_config_name, parse_kv_configs

SCHEMA_VERSION = 1
DEFAULT_TOLERANCE = 1e-4
SPLIT_TOLERANCE = 1e-5

_TRAFFIC = {
    "type": "object",
    "required": [
        "code_bytes_read",
        "codebook_bytes_read",
        "residual_bytes_read",
        "dense_bytes_read",
        "dense_bytes_written",
        "fp16_equiv_bytes",
    ],
    "additionalProperties": {"type": "integer", "minimum": 0},
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("code_bytes_read", "fp16_equiv_bytes")},
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "smoothvq report",
    "type": "object",
    "required": ["schema_version", "kind", "head_dim", "tolerance", "passed", "runs"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": ["bench", "verify"]},
        "head_dim": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "kv_heads": {"type": "integer", "minimum": 1},
        "group_size": {"type": "integer", "minimum": 1},
        "tolerance": {"type": "number"},
        "passed": {"type": "boolean"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["config", "n_tokens", "max_rel_error", "traffic"],
                "properties": {
                    "config": {"type": "string"},
                    "n_tokens": {"type": "integer", "minimum": 1},
                    "max_rel_error": {"type": "number", "minimum": 0},
                    "max_lse_error": {"type": "number", "minimum": 0},
                    "compression_ratio": {"type": "number"},
                    "bytes_vs_fp16": {"type": "number"},
                    "traffic": {
                        "type": "object",
                        "required": ["fused"],
                        "properties": {"fused": _TRAFFIC, "dequantize_then_attend": _TRAFFIC},
                    },
                    "wall_time": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                },
            },
        },
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def _sum_traffic(items) -> dict:
    total: dict = {}
    for t in items:
        for key, value in t.as_dict().items():
            total[key] = total.get(key, 0) + value
    return total


@dataclass(frozen=True)
class QueryCheck:
    rel_error: float
    lse_error: float
    split_error: float


def check_query(q_tilde, cache: QuantizedKVCache, cb_k: Codebook, cb_v: Codebook, tiles: TileConfig):
    """Fused vs oracle on the materialized cache for one transformed query row."""
    out = fused_decode_attention(q_tilde, cache, cb_k, cb_v, tiles)
    k_hat, v_hat = materialize(cache, cb_k, cb_v)
    ref = reference_attention(q_tilde, k_hat, v_hat)
    split_err = 0.0
    if tiles.num_splits != 1:
        single = fused_decode_attention(q_tilde, cache, cb_k, cb_v, TileConfig(tiles.block_size, 1, tiles.prefetch))
        split_err = relative_error(out.o, single.o)
    return out, QueryCheck(relative_error(out.o, ref.o), abs(out.lse - ref.lse), split_err)


def run_verify(
    cache: QuantizedKVCache,
    queries,
    cb_k: Codebook,
    cb_v: Codebook,
    smoothing: SmoothingFactors | None,
    tiles: TileConfig,
    tolerance: float = DEFAULT_TOLERANCE,
    workers: int = 1,
    timing: bool = True,
) -> dict:
    """Check every query row through the fused path against the oracle."""
    d = cache.config.head_dim
    s = smoothing or SmoothingFactors.identity(d)
    q_tilde = transform_query(np.asarray(queries, dtype=np.float32).reshape(-1, d), s)
    start = time.perf_counter()

    def one(i):
        return check_query(q_tilde[i : i + 1], cache, cb_k, cb_v, tiles)

    with ThreadPoolExecutor(max(workers, 1)) as pool:
        results = list(pool.map(one, range(len(q_tilde))))
    elapsed = time.perf_counter() - start
    outs = [r[0] for r in results]
    checks = [r[1] for r in results]
    rel = max(c.rel_error for c in checks)
    split = max(c.split_error for c in checks)
    rep = traffic_report(outs[0], cache.total_len, d)
    run = {
        "config": kv_config_name(cache.config.key_cfg, cache.config.value_cfg),
        "n_tokens": cache.total_len,
        "n_quantized": cache.n_quantized,
        "n_queries": len(q_tilde),
        "block_size": tiles.block_size,
        "num_splits": tiles.num_splits,
        "max_rel_error": rel,
        "max_lse_error": max(c.lse_error for c in checks),
        "max_split_error": split,
        "compression_ratio": rep["compression_ratio"],
        "bytes_vs_fp16": rep["bytes_vs_fp16"],
        "traffic": {"fused": _sum_traffic(o.traffic for o in outs)},
    }
    if timing:
        run["wall_time"] = {"fused_and_oracle_s": elapsed}
    passed = rel <= tolerance and split <= SPLIT_TOLERANCE
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "verify",
        "head_dim": d,
        "tolerance": tolerance,
        "split_tolerance": SPLIT_TOLERANCE,
        "passed": bool(passed),
        "runs": [run],
    }


# --- bench ------------------------------------------------------------------


def train_stream_codebooks(
    key_cfg: VQConfig,
    value_cfg: VQConfig,
    seed: int,
    calib_tokens: int = 2048,
    iters: int = 10,
) -> tuple[SmoothingFactors, Codebook, Codebook]:
    """Calibrate smoothing and train key/value codebooks on a held-out synthetic draw."""
    d = key_cfg.head_dim
    need = max(key_cfg.n_centroids // key_cfg.m, value_cfg.n_centroids // value_cfg.m) + 1
    k, v = generate_kv(max(calib_tokens, need), d, seed=seed + 1_000_003)
    s = calibrate_smoothing(k, TransformConfig(d))
    kt = transform_keys(k, s)
    prov = f"synthetic calib seed={seed} tokens={len(k)}"
    cb_k = kmeans_train(kt.reshape(-1, key_cfg.d), key_cfg.b, iters, seed, d, prov)
    cb_v = kmeans_train(v.reshape(-1, value_cfg.d), value_cfg.b, iters, seed + 1, d, prov)
    return s, cb_k, cb_v


def _timed(fn, repeats: int):
    best, result = float("inf"), None
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return result, best


def _bench_kv_head(n, h, seed, group, cfg, s, cb_k, cb_v, tiles, repeats):
    k, v = generate_kv(n, cfg.head_dim, seed=seed * 7919 + n * 31 + h)
    cache = prefill(k, v, s, cb_k, cb_v, cfg)
    qs = generate_queries(group, cfg.head_dim, seed * 104729 + n * 17 + h)
    fused, dequant, errs, lse_errs = [], [], [], []
    t_fused = t_dequant = 0.0
    k_hat, v_hat = materialize(cache, cb_k, cb_v)
    for g in range(group):
        q_t = transform_query(qs[g : g + 1], s)
        out, dt = _timed(lambda: fused_decode_attention(q_t, cache, cb_k, cb_v, tiles), repeats)
        t_fused += dt
        base, dt = _timed(lambda: dequantize_then_attend(q_t, cache, cb_k, cb_v), repeats)
        t_dequant += dt
        ref = reference_attention(q_t, k_hat, v_hat)
        fused.append(out)
        dequant.append(base)
        errs.append(relative_error(out.o, ref.o))
        lse_errs.append(abs(out.lse - ref.lse))
    return fused, dequant, max(errs), max(lse_errs), t_fused, t_dequant


def run_bench(
    n_list,
    config_list,
    head_dim: int = 128,
    heads: int = 32,
    kv_heads: int = 8,
    residual_len: int = 128,
    tiles: TileConfig = TileConfig(),
    seed: int = 0,
    iters: int = 10,
    repeats: int = 1,
    workers: int = 1,
    timing: bool = True,
    tolerance: float = DEFAULT_TOLERANCE,
) -> dict:
    """Fused vs dequantize-then-attend over GQA workloads; one cache per KV head."""
    if heads % kv_heads:
        raise ValueError(f"heads={heads} is not a multiple of kv_heads={kv_heads}")
    group = heads // kv_heads
    runs = []
    for config in config_list:
        key_cfg, value_cfg = parse_kv_configs(config, head_dim)
        s, cb_k, cb_v = train_stream_codebooks(key_cfg, value_cfg, seed, iters=iters)
        cfg = CacheConfig(key_cfg, value_cfg, residual_len)
        for n in n_list:
            def one(h, n=n):
                return _bench_kv_head(n, h, seed, group, cfg, s, cb_k, cb_v, tiles, repeats)

            with ThreadPoolExecutor(max(workers, 1)) as pool:
                per_head = list(pool.map(one, range(kv_heads)))
            fused = [o for r in per_head for o in r[0]]
            dequant = [o for r in per_head for o in r[1]]
            rep = traffic_report(fused[0], n, head_dim)
            run = {
                "config": kv_config_name(key_cfg, value_cfg),
                "n_tokens": n,
                "avg_bits": avg_bits(key_cfg, value_cfg),
                "max_rel_error": max(r[2] for r in per_head),
                "max_lse_error": max(r[3] for r in per_head),
                "compression_ratio": rep["compression_ratio"],
                "bytes_vs_fp16": rep["bytes_vs_fp16"],
                "traffic": {
                    "fused": _sum_traffic(o.traffic for o in fused),
                    "dequantize_then_attend": _sum_traffic(o.traffic for o in dequant),
                },
            }
            if timing:
                run["wall_time"] = {
                    "fused_s": sum(r[4] for r in per_head),
                    "dequantize_then_attend_s": sum(r[5] for r in per_head),
                }
            runs.append(run)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "bench",
        "comparison": "fused vs dequantize-then-attend (this library only)",
        "head_dim": head_dim,
        "heads": heads,
        "kv_heads": kv_heads,
        "group_size": group,
        "residual_len": residual_len,
        "block_size": tiles.block_size,
        "num_splits": tiles.num_splits,
        "seed": seed,
        "repeats": repeats,
        "tolerance": tolerance,
        "passed": bool(all(r["max_rel_error"] <= tolerance for r in runs)),
        "runs": runs,
    }
