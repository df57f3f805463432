"""``ganorcon <stage> [--config FILE] [flags]``.

Flags override values from the config file. ``--config`` also accepts a run
manifest, which re-runs that stage with its recorded effective config. On
failure a JSON error object is printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ganorcon.config import STAGES, RunConfig, load_config_file
from ganorcon.errors import ConfigError, GanOrConError

# (flag, dest field, type, extra argparse kwargs)
FLAGS = {
    "pretrain": [
        ("--method", "method", str, {"choices": ["moco", "simsiam"]}),
        ("--data", "data", str, {}),
        ("--resolution", "resolution", int, {}),
        ("--epochs", "epochs", int, {}),
        ("--batch", "batch", int, {}),
        ("--lr", "lr", float, {}),
        ("--arch", "architecture", str, {}),
        ("--queue-size", "queue_size", int, {}),
        ("--max-steps", "max_steps", int, {}),
        ("--out", "out", str, {}),
    ],
    "train-projector": [
        ("--backbone", "backbone", str, {}),
        ("--head", "head", str, {"choices": ["mlp", "conv", "conv-a", "conv-b"]}),
        ("--fewshot", "fewshot", str, {}),
        ("--classes", "classes", int, {}),
        ("--schema", "schema", str, {}),
        ("--resolution", "resolution", int, {}),
        ("--epochs", "epochs", int, {}),
        ("--lr", "lr", float, {}),
        ("--width", "width", float, {}),
        ("--snapshot-every", "snapshot_every", int, {}),
        ("--out", "out", str, {}),
    ],
    "infer": [
        ("--model", "model", str, {}),
        ("--images", "images", str, {}),
        ("--out", "out", str, {}),
    ],
    "distill": [
        ("--teacher", "teacher", str, {}),
        ("--pool", "pool", str, {}),
        ("--student", "student", str, {"choices": ["full", "small"]}),
        ("--epochs", "epochs", int, {}),
        ("--lr", "lr", float, {}),
        ("--batch", "batch", int, {}),
        ("--out", "out", str, {}),
    ],
    "eval": [
        ("--model", "model", str, {"action": "append"}),
        ("--test", "test", str, {}),
        ("--metric", "metric", str, {"choices": ["miou", "weighted"]}),
        ("--folds", "folds", int, {}),
        ("--schema", "schema", str, {}),
        ("--report", "report", str, {}),
    ],
    "robustness": [
        ("--model", "model", str, {}),
        ("--images", "images", str, {}),
        ("--shift", "shift", str, {}),
        ("--fill", "fill", str, {"choices": ["edge", "zero"]}),
        ("--report", "report", str, {}),
    ],
    "remap": [
        ("--remap", "remap", str, {}),
        ("--masks", "masks", str, {}),
        ("--out", "out", str, {}),
    ],
    "toy-e2e": [
        ("--profile", "profile", str, {"choices": ["default", "quick"]}),
        ("--pretrain-epochs", "pretrain_epochs", int, {}),
        ("--conv-epochs", "conv_epochs", int, {}),
        ("--mlp-epochs", "mlp_epochs", int, {}),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganorcon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage)
        sp.add_argument("--config", help="run config JSON or a previous run's manifest.json")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", help="overrides $GANORCON_OUTPUT_ROOT/<stage>")
        for flag, dest, typ, extra in FLAGS[stage]:
            sp.add_argument(flag, dest=f"p_{dest}", type=typ, default=None, **extra)
    return parser


def config_from_args(args) -> RunConfig:
    d = load_config_file(args.config) if args.config else {"stage": args.stage}
    if d.get("stage") != args.stage:
        raise ConfigError(f"config is for stage {d.get('stage')!r}, not {args.stage!r}")
    block = dict(d.get(args.stage, {}))
    for key, value in vars(args).items():
        if key.startswith("p_") and value is not None:
            block[key[2:]] = value
    d[args.stage] = block
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output_dir is not None:
        d["output_dir"] = args.output_dir
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from ganorcon.pipeline import dispatch
    try:
        config = config_from_args(args)
        manifest = dispatch(config)
    except ConfigError as exc:
        print(json.dumps({"error": "validation", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (GanOrConError, OSError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": "stage_failed", "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"status": manifest["status"], "manifest": str(config.resolved_output_dir() / "manifest.json"),
                      "metrics": manifest["metrics"]}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
