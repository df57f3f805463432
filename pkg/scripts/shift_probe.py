#!/usr/bin/env python3
"""Sweep translations and report how well a model's masks follow a shifted input.

    python scripts/shift_probe.py runs/toy_e2e/seed0/conv.pt runs/toy_e2e/seed0/mlp.pt \
        --images runs/toy_e2e/seed0/data/test/images --max-shift 12
"""

import argparse

import numpy as np

from ganorcon.data.io import list_images, read_image
from ganorcon.evaluation import ShiftProbe, shift_equivariance_check
from ganorcon.pipeline import load_predictor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("models", nargs="+")
    ap.add_argument("--images", required=True)
    ap.add_argument("--max-shift", type=int, default=8)
    ap.add_argument("--step", type=int, default=1)
    ap.add_argument("--limit", type=int, default=10, help="number of images to probe")
    ap.add_argument("--fill", default="edge", choices=["edge", "zero"])
    args = ap.parse_args()

    models = {m: load_predictor(m) for m in args.models}
    res = next(iter(models.values())).resolution
    images = [read_image(p, res) for p in list_images(args.images)[:args.limit]]
    shifts = range(0, args.max_shift + 1, args.step)
    print("shift " + "".join(f"{m[-24:]:>26}" for m in models))
    for s in shifts:
        probe = ShiftProbe(s, s, args.fill)
        row = [np.mean([shift_equivariance_check(model, img, probe) for img in images]) for model in models.values()]
        print(f"{s:>5} " + "".join(f"{v:>26.4f}" for v in row))


if __name__ == "__main__":
    main()
