"""Command-line entry point: ``smoothvq <command> [flags]``.

Exit codes: 0 success, 1 usage, 2 validation or tolerance failure,
3 I/O or corrupted input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import io as fio
from .analysis import distribution_report, lemma1_check
from .attention import TileConfig
from .bench import run_bench, run_verify, validate_report
from .errors import ConfigError, SmoothVQError
from .kvcache import CacheConfig, prefill
from .synth import TAILS, generate_keys
from .transform import (
    SmoothingFactors,
    TransformConfig,
    calibrate_smoothing,
    degenerate_channels,
    hadamard_apply,
)
from .vq import kmeans_train, memory_footprint

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _power_of_two(text: str) -> int:
    value = _positive(text)
    if value & (value - 1):
        raise argparse.ArgumentTypeError(f"expected a power of two, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected a comma list of positive integers, got {text!r}")
    return values


def _str_list(text: str) -> list[str]:
    values = [t.strip() for t in text.split(",") if t.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _load_smoothing(path, head_dim: int) -> SmoothingFactors:
    f = fio.read_codebook(path)
    if f.smoothing is None:
        return SmoothingFactors.identity(head_dim)
    if f.head_dim != head_dim:
        raise ConfigError(f"{path}: smoothing head_dim {f.head_dim} != {head_dim}")
    return f.smoothing


def _require_codebook(path):
    f = fio.read_codebook(path)
    if f.codebook is None:
        raise ConfigError(f"{path} holds smoothing factors only, no centroids")
    return f


def _write_json(report: dict, path) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)


# --- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    x = generate_keys(args.n, args.d, args.outlier_channels, args.outlier_scale, args.tail, args.seed)
    fio.write_tensor(args.out, x, args.dtype)
    print(f"wrote {args.out}: {args.n}x{args.d} {args.dtype} tail={args.tail} seed={args.seed}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    k = fio.read_tensor(args.keys)
    k = k.reshape(-1, k.shape[-1])
    cfg = TransformConfig(k.shape[1], args.epsilon, args.max_tokens)
    if len(k) > cfg.calibration_token_budget:
        rng = np.random.default_rng(args.seed)
        k = k[np.sort(rng.choice(len(k), cfg.calibration_token_budget, replace=False))]
    s = calibrate_smoothing(k, cfg)
    fio.write_codebook(args.out, cfg.head_dim, smoothing=s)
    cmax = s.lam.astype(np.float64) ** 2
    top = np.argsort(-cmax, kind="stable")[:4]
    print(f"calibrated {len(k)} tokens, D={cfg.head_dim}")
    print(f"channel max: min={cmax.min():.6g} median={np.median(cmax):.6g} max={cmax.max():.6g}")
    print("top channels: " + ", ".join(f"{i}:{cmax[i]:.6g}" for i in top))
    bad = degenerate_channels(s)
    if len(bad):
        print(
            f"warning: {len(bad)} channel(s) below epsilon {cfg.epsilon_floor:g}, floored: {bad.tolist()}",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_train_codebook(args) -> int:
    x = fio.read_tensor(args.data)
    x = x.reshape(-1, x.shape[-1])
    dim = x.shape[1]
    smoothing = None
    if "s" in args.transform:
        smoothing = _load_smoothing(args.lambda_path, dim) if args.lambda_path else calibrate_smoothing(x, TransformConfig(dim))
        x = x / smoothing.lam
    if "h" in args.transform:
        x = hadamard_apply(x)
    if dim % args.d:
        raise ConfigError(f"sub-vector length {args.d} does not divide head_dim {dim}")
    prov = f"transform={args.transform} data={os.path.basename(args.data)} tokens={len(x)} iters={args.iters} seed={args.seed}"
    cb = kmeans_train(x.reshape(-1, args.d), args.b, args.iters, args.seed, dim, prov)
    fio.write_codebook(args.out, dim, cb, smoothing)
    print(f"trained {cb.config.name} on {len(x) * cb.config.m} sub-vectors in {len(cb.history) - 1} iterations")
    print(f"final objective: {cb.final_objective:.9g}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    k = fio.read_tensor(args.keys)
    v = fio.read_tensor(args.values)
    kf = _require_codebook(args.key_codebook)
    vf = _require_codebook(args.value_codebook)
    cfg = CacheConfig(kf.codebook.config, vf.codebook.config, args.residual)
    s = kf.smoothing or SmoothingFactors.identity(cfg.head_dim)
    cache = prefill(k, v, s, kf.codebook, vf.codebook, cfg, workers=args.workers)
    fio.write_snapshot(args.out, cache)
    kfp = memory_footprint(cfg.key_cfg, cache.n_quantized)
    vfp = memory_footprint(cfg.value_cfg, cache.n_quantized)
    residual = cache.n_residual * cfg.head_dim * 2 * 2
    total = kfp.total + vfp.total + residual
    print(f"tokens: {cache.total_len} quantized={cache.n_quantized} residual={cache.n_residual}")
    print(
        f"bytes: key_codes={kfp.index_bytes} value_codes={vfp.index_bytes} "
        f"codebooks={kfp.codebook_bytes + vfp.codebook_bytes} residual={residual} total={total}"
    )
    print(f"fp16 bytes: {cache.fp16_nbytes()}")
    print(f"compression ratio: {cache.fp16_nbytes() / total:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cache = fio.read_snapshot(args.cache)
    q = fio.read_tensor(args.queries)
    kf = _require_codebook(args.key_codebook)
    vf = _require_codebook(args.value_codebook)
    s = kf.smoothing or SmoothingFactors.identity(cache.config.head_dim)
    tiles = TileConfig(args.tiles, args.splits, not args.no_prefetch)
    report = run_verify(cache, q, kf.codebook, vf.codebook, s, tiles, args.tol, args.workers, not args.no_timing)
    validate_report(report)
    run = report["runs"][0]
    print(
        f"{run['config']} N={run['n_tokens']} queries={run['n_queries']} B={tiles.block_size} "
        f"splits={tiles.num_splits}: max_rel_error={run['max_rel_error']:.3e} "
        f"split_error={run['max_split_error']:.3e} tol={args.tol:g}"
    )
    if args.json_out:
        _write_json(report, args.json_out)
    print("PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


def cmd_bench(args) -> int:
    tiles = TileConfig(args.tiles, args.splits)
    report = run_bench(
        args.n_list,
        args.config_list,
        head_dim=args.head_dim,
        heads=args.heads,
        kv_heads=args.kv_heads,
        residual_len=args.residual,
        tiles=tiles,
        seed=args.seed,
        iters=args.iters,
        repeats=args.repeats,
        workers=args.workers,
        timing=not args.no_timing,
    )
    validate_report(report)
    print(f"fused vs dequantize-then-attend, heads={args.heads} kv_heads={args.kv_heads} D={args.head_dim}")
    print(f"{'config':>18} {'N':>7} {'rel_err':>9} {'bytes/fp16':>10} {'fused_read':>12} {'deq_moved':>12}")
    for run in report["runs"]:
        fused = run["traffic"]["fused"]
        deq = run["traffic"]["dequantize_then_attend"]
        fused_read = fused["code_bytes_read"] + fused["codebook_bytes_read"] + fused["residual_bytes_read"]
        deq_moved = sum(deq[key] for key in deq if key != "fp16_equiv_bytes")
        print(
            f"{run['config']:>18} {run['n_tokens']:>7} {run['max_rel_error']:>9.2e} "
            f"{run['bytes_vs_fp16']:>10.4f} {fused_read:>12} {deq_moved:>12}"
        )
    if args.json_out:
        _write_json(report, args.json_out)
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


def cmd_analyze(args) -> int:
    k = fio.read_tensor(args.keys)
    k = k.reshape(-1, k.shape[-1])
    if args.lambda_path:
        k = k / _load_smoothing(args.lambda_path, k.shape[1]).lam
    before = distribution_report(k)
    rotated = hadamard_apply(k)
    after = distribution_report(rotated, original=k)
    if args.csv_out:
        with open(args.csv_out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["channel", "max_before", "p99_before", "max_after", "p99_after"])
            for i in range(k.shape[1]):
                w.writerow([
                    i,
                    f"{before.per_channel_max[i]:.9g}",
                    f"{before.per_channel_p99[i]:.9g}",
                    f"{after.per_channel_max[i]:.9g}",
                    f"{after.per_channel_p99[i]:.9g}",
                ])
    summary = {
        "lemma1": lemma1_check(k).as_dict(),
        "row_ms_error": after.row_ms_error,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smoothvq", description="Outlier-suppressed vector-quantized KV cache tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic key tensor")
    g.add_argument("--n", type=_positive, required=True)
    g.add_argument("--d", type=_power_of_two, required=True)
    g.add_argument("--outlier-channels", type=_non_negative, default=0)
    g.add_argument("--outlier-scale", type=float, default=1.0)
    g.add_argument("--tail", choices=TAILS, default="gauss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("calibrate", help="compute per-channel smoothing factors")
    c.add_argument("--keys", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--epsilon", type=float, default=1e-6)
    c.add_argument("--max-tokens", type=_positive, default=TransformConfig(1).calibration_token_budget)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("train-codebook", help="train a k-means codebook on (transformed) data")
    t.add_argument("--data", required=True)
    t.add_argument("--transform", choices=("none", "s", "h", "sh"), default="sh")
    t.add_argument("--lambda", dest="lambda_path")
    t.add_argument("--d", type=_positive, required=True)
    t.add_argument("--b", type=_positive, required=True)
    t.add_argument("--iters", type=_positive, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_codebook)

    q = sub.add_parser("quantize", help="prefill a cache snapshot from key/value tensors")
    q.add_argument("--keys", required=True)
    q.add_argument("--values", required=True)
    q.add_argument("--key-codebook", required=True)
    q.add_argument("--value-codebook", required=True)
    q.add_argument("--residual", type=_non_negative, default=128)
    q.add_argument("--workers", type=_positive, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    v = sub.add_parser("verify", help="fused attention vs oracle on a snapshot")
    v.add_argument("--cache", required=True)
    v.add_argument("--queries", required=True)
    v.add_argument("--key-codebook", required=True)
    v.add_argument("--value-codebook", required=True)
    v.add_argument("--tiles", type=_positive, default=128)
    v.add_argument("--splits", type=_positive, default=1)
    v.add_argument("--tol", type=float, default=1e-4)
    v.add_argument("--workers", type=_positive, default=1)
    v.add_argument("--no-prefetch", action="store_true")
    v.add_argument("--no-timing", action="store_true")
    v.add_argument("--json-out")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="fused vs dequantize-then-attend on synthetic GQA workloads")
    b.add_argument("--n-list", type=_int_list, default=[1024, 4096])
    b.add_argument("--config-list", type=_str_list, default=["d4b8"])
    b.add_argument("--heads", type=_positive, default=32)
    b.add_argument("--kv-heads", type=_positive, default=8)
    b.add_argument("--head-dim", type=_positive, default=128)
    b.add_argument("--residual", type=_non_negative, default=128)
    b.add_argument("--tiles", type=_positive, default=128)
    b.add_argument("--splits", type=_positive, default=1)
    b.add_argument("--iters", type=_positive, default=10)
    b.add_argument("--repeats", type=_positive, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=_positive, default=1)
    b.add_argument("--no-timing", action="store_true")
    b.add_argument("--json-out")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="channel statistics before/after rotation, as CSV")
    a.add_argument("--keys", required=True)
    a.add_argument("--lambda", dest="lambda_path")
    a.add_argument("--csv-out")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SmoothVQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # config constructors reject bad flag combinations with plain ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
