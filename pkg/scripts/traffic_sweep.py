"""Fused-path cache bytes over fp16 bytes as the context grows, for a few configs."""
import argparse

import numpy as np

from smoothvq.attention import TileConfig, fused_decode_attention, predicted_traffic, traffic_report
from smoothvq.kvcache import CacheConfig, QuantizedKVCache
from smoothvq.vq import Codebook, avg_bits, parse_kv_configs


def random_cache(cfg, n_quantized, n_residual, rng):
    kc, vc = cfg.key_cfg, cfg.value_cfg
    return QuantizedKVCache(
        cfg,
        rng.integers(0, kc.n_centroids, (n_quantized, kc.m)).astype(np.uint16),
        rng.integers(0, vc.n_centroids, (n_quantized, vc.m)).astype(np.uint16),
        rng.standard_normal((n_residual, cfg.head_dim)).astype(np.float32),
        rng.standard_normal((n_residual, cfg.head_dim)).astype(np.float32),
    )


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--configs", default="d4b8,d8b12,K-d8b12/V-d8b8")
    p.add_argument("--n-list", default="1024,4096,16384,65536")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--residual", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    print("config,avg_bits,n_tokens,bytes_read,fp16_bytes,bytes_vs_fp16,matches_formula")
    for name in args.configs.split(","):
        kc, vc = parse_kv_configs(name, args.dim)
        cfg = CacheConfig(kc, vc, args.residual)
        cb_k = Codebook(kc, rng.standard_normal((kc.n_centroids, kc.d)).astype(np.float32))
        cb_v = Codebook(vc, rng.standard_normal((vc.n_centroids, vc.d)).astype(np.float32))
        for n in (int(x) for x in args.n_list.split(",")):
            nr = min(n, args.residual)
            cache = random_cache(cfg, n - nr, nr, rng)
            q = rng.standard_normal((1, args.dim)).astype(np.float32)
            out = fused_decode_attention(q, cache, cb_k, cb_v, TileConfig(256))
            rep = traffic_report(out, n, args.dim)
            same = out.traffic == predicted_traffic(cfg, n - nr, nr)
            print(f"{name},{avg_bits(kc, vc)},{n},{rep['bytes_read']},{rep['fp16_equiv_bytes']},{rep['bytes_vs_fp16']:.5f},{same}")


if __name__ == "__main__":
    main()
