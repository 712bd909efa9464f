"""Score error of every transform composition on planted-outlier keys, as CSV."""
import argparse
import csv
import sys

from smoothvq.analysis import ABLATION_MODES, transform_ablation
from smoothvq.synth import TAILS, generate_keys, generate_queries
from smoothvq.vq import VQConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", default="7,11,13")
    p.add_argument("--config", default="d4b8")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--outlier-channels", type=int, default=4)
    p.add_argument("--outlier-scale", type=float, default=20.0)
    p.add_argument("--tail", choices=TAILS, default="gauss")
    p.add_argument("--queries", type=int, default=32)
    p.add_argument("--iters", type=int, default=30)
    args = p.parse_args()

    cfg = VQConfig.parse(args.config, args.dim)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["seed", "mode", "mse", "score_error"])
    for seed in (int(x) for x in args.seeds.split(",")):
        k = generate_keys(args.n, args.dim, args.outlier_channels, args.outlier_scale, args.tail, seed)
        q = generate_queries(args.queries, args.dim, seed)
        for mode in ABLATION_MODES:
            r = transform_ablation(k, q, cfg, mode, seed=0, max_iters=args.iters)
            w.writerow([seed, mode, f"{r['mse']:.6g}", f"{r['score_error']:.6g}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
