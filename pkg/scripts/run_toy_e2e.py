#!/usr/bin/env python3
"""Run the synthetic end-to-end experiment and print a summary table.

    python scripts/run_toy_e2e.py --seed 0 --out runs/toy
    python scripts/run_toy_e2e.py --profile quick --seeds 0 1 2
"""

import argparse
import logging
import time

import torch

from ganorcon.pipeline import toy_e2e


def summarize(seed, manifest, elapsed):
    m = manifest["metrics"]
    print(f"seed {seed}  ({elapsed / 60:.1f} min)")
    print(f"  {'model':<14}{'mIoU':>8}{'std':>8}{'weighted':>10}")
    for name in ("mlp", "conv", "conv_distill"):
        e = m[name]
        print(f"  {name:<14}{e['miou']:>8.4f}{e['miou_std']:>8.4f}{e['weighted']:>10.4f}")
    print(f"  student/teacher agreement (test): {m['conv_distill']['teacher_agreement_test']:.4f}")
    for name, v in m["shift_agreement"].items():
        print(f"  shift agreement {name:<8} aligned {v['aligned']:.4f}  unaligned {v['unaligned']:.4f}")
    print(f"  CONV >= MLP: {m['conv_ge_mlp']}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--seed", type=int, help="shorthand for a single seed")
    ap.add_argument("--profile", default="default", choices=["default", "quick"])
    ap.add_argument("--out", default="runs/toy_e2e")
    ap.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 = library default)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    seeds = [args.seed] if args.seed is not None else args.seeds
    for seed in seeds:
        t = time.perf_counter()
        manifest = toy_e2e(seed=seed, profile=args.profile, output_dir=f"{args.out}/seed{seed}")
        summarize(seed, manifest, time.perf_counter() - t)


if __name__ == "__main__":
    main()
