"""Stage dispatch, run manifests and the desk-scale end-to-end experiment."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import tempfile
import time
import traceback
from pathlib import Path

import numpy as np
import torch

import ganorcon
from ganorcon.backbone import BackboneSpec, STAGES as BACKBONE_STAGES
from ganorcon.checkpoint import Checkpoint
from ganorcon.config import RunConfig, ToyParams
from ganorcon.data.io import list_images, load_dataset, read_image, read_mask, save_dataset, write_mask
from ganorcon.data.schemas import LabelMask, LabelSchema, load_remap, load_schema, remap_labels
from ganorcon.errors import ConfigError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum(path) -> str | None:
    """sha256 of a file, or of the sorted (relative path, file hash) list of a directory."""
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    if path.is_dir():
        h = hashlib.sha256()
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode())
            h.update(_sha256_file(p).encode())
        return h.hexdigest()
    return None


def write_json_atomic(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(payload, f, indent=2, default=_json_default)
    os.replace(tmp, path)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Run:
    """Collects what a stage read, wrote and measured."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = config.resolved_output_dir()
        self.inputs: dict[str, str | None] = {}
        self.artifacts: dict[str, str] = {}
        self.metrics: dict = {}
        self.timings: dict[str, float] = {}

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.out / p

    def input(self, p) -> Path:
        p = Path(p)
        self.inputs[str(p)] = checksum(p)
        return p

    def artifact(self, name: str, p) -> Path:
        self.artifacts[name] = str(p)
        return Path(p)

    def timed(self, name):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 3)

        return _T()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def dispatch(config: RunConfig) -> dict:
    """Run one stage and write ``manifest.json`` into its output directory.

    The effective config is serialized before the stage starts. Stage
    failures are recorded in the manifest and re-raised.
    """
    run = Run(config)
    run.out.mkdir(parents=True, exist_ok=True)
    manifest_path = run.out / "manifest.json"
    config_snapshot = config.to_dict()
    write_json_atomic(run.out / "config.json", config_snapshot)
    started = time.time()
    status, failure = "ok", None
    seed_everything(config.seed)
    try:
        with run.timed("total"):
            STAGE_RUNNERS[config.stage](run, config.params, config.seed)
    except Exception as exc:
        status = "failed"
        failure = {"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        ckpt = getattr(exc, "checkpoint", None)
        if isinstance(ckpt, Checkpoint):
            run.artifact("last_good_checkpoint", ckpt.save(run.out / "last_good.pt"))
        raise
    finally:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "package_version": ganorcon.__version__,
            "stage": config.stage,
            "status": status,
            "config": config_snapshot,
            "inputs": run.inputs,
            "artifacts": run.artifacts,
            "timings": run.timings,
            "metrics": run.metrics,
            "failure": failure,
            "started": started,
            "environment": {"python": platform.python_version(), "torch": torch.__version__},
        }
        write_json_atomic(manifest_path, manifest)
    return manifest


def _run_pretrain(run: Run, p, seed: int):
    from ganorcon.contrastive import pretrain
    data = run.input(p.data)
    log_path = run.path("loss_log.jsonl")
    with run.timed("pretrain"):
        ckpt, history = pretrain(data, p.contrastive(), seed=seed, loss_log=log_path, max_steps=p.max_steps)
    run.artifact("checkpoint", ckpt.save(run.path(p.out)))
    run.artifact("loss_log", log_path)
    run.metrics = {"steps": len(history), "final_loss": history[-1]["loss"] if history else None}


def _schema_for(p) -> LabelSchema:
    if p.schema:
        return load_schema(p.schema)
    return LabelSchema.generic(p.classes)


def _run_train_projector(run: Run, p, seed: int):
    from ganorcon.projector import ProjectorSpec, train_projector
    backbone = Checkpoint.load(run.input(p.backbone)).expect("backbone")
    schema = _schema_for(p)
    if p.classes is not None and p.classes != schema.num_classes:
        raise ConfigError(f"classes={p.classes} but schema {schema.name!r} has {schema.num_classes}")
    data = load_dataset(run.input(p.fewshot), schema, p.resolution)
    bspec = BackboneSpec(backbone.meta["architecture"], tuple(backbone.meta.get("tap_points", BACKBONE_STAGES)),
                         p.stride_mode)
    spec = ProjectorSpec(p.head, schema.num_classes, in_channels=bspec.channels,
                         mlp_hidden=tuple(p.mlp_hidden), width=p.width)
    with run.timed("train"):
        ckpt, history = train_projector(data, backbone, spec, p.train_config(), seed, bspec)
    run.artifact("checkpoint", ckpt.save(run.path(p.out)))
    write_json_atomic(run.path("history.json"), history)
    run.artifact("history", run.path("history.json"))
    run.metrics = {"epochs": len(history), "final_loss": history[-1]["loss"] if history else None}


def load_predictor(path, snapshot: str | None = None):
    """Segmenter or student from a checkpoint file, ready to label images."""
    from ganorcon.distill import Student
    from ganorcon.projector import Segmenter
    ckpt = Checkpoint.load(path)
    if ckpt.kind == "segmenter":
        return Segmenter.from_checkpoint(ckpt, snapshot)
    if ckpt.kind == "student":
        return Student.from_checkpoint(ckpt)
    raise ConfigError(f"{path}: a {ckpt.kind!r} checkpoint cannot label images")


def candidates(paths, include_snapshots: bool = True):
    """(name, predictor) for each checkpoint, expanding training snapshots."""
    out = []
    for path in paths:
        ckpt = Checkpoint.load(path)
        if include_snapshots and ckpt.kind == "segmenter":
            from ganorcon.projector import Segmenter
            for key in sorted((k.split("/", 1)[1] for k in ckpt.children if k.startswith("snapshot/")), key=int):
                out.append((f"{path}@{key}", Segmenter.from_checkpoint(ckpt, key)))
        out.append((str(path), load_predictor(path)))
    return out


def _run_infer(run: Run, p, seed: int):
    model = load_predictor(run.input(p.model))
    out = run.path(p.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    with run.timed("infer"):
        for path in list_images(run.input(p.images)):
            img = read_image(path, model.resolution)
            write_mask(out / f"{path.stem}.png", model(img))
            n += 1
    run.artifact("masks", out)
    run.metrics = {"images": n}


def _run_distill(run: Run, p, seed: int):
    from ganorcon.distill import DistillConfig, StudentSpec, distill_train, generate_pseudo_labels
    teacher = load_predictor(run.input(p.teacher))
    schema = LabelSchema.from_dict(teacher.schema) if teacher.schema else LabelSchema.generic(teacher.num_classes)
    with run.timed("pseudo_labels"):
        pseudo = generate_pseudo_labels(teacher, run.input(p.pool), schema, teacher.resolution,
                                        out_dir=run.path(p.pseudo_dir))
    run.artifact("pseudo_labels", run.path(p.pseudo_dir))
    with run.timed("train"):
        ckpt, history = distill_train(pseudo, StudentSpec(schema.num_classes, p.student, p.width),
                                      DistillConfig(p.epochs, p.lr, p.batch), seed)
    run.artifact("checkpoint", ckpt.save(run.path(p.out)))
    run.metrics = {"pool_size": len(pseudo), "history": history}


def _run_eval(run: Run, p, seed: int):
    from ganorcon.evaluation import evaluate_models
    named = candidates([run.input(m) for m in p.model], p.include_snapshots)
    first = named[0][1]
    schema = load_schema(p.schema) if p.schema else (
        LabelSchema.from_dict(first.schema) if first.schema else LabelSchema.generic(first.num_classes))
    test = load_dataset(run.input(p.test), schema, first.resolution)
    with run.timed("eval"):
        plan, report = evaluate_models([m for _, m in named], test, p.metric, p.folds, seed,
                                       [n for n, _ in named], p.empty)
    payload = {"protocol": plan.protocol, "metric": p.metric, "folds": p.folds, "seed": seed,
               "empty_union": p.empty, "score": plan.score, "std": plan.std,
               "per_fold": [r.test_score for r in plan.results],
               "chosen": [plan.checkpoint_names[r.chosen] for r in plan.results],
               "fold_plan": plan.to_dict(), "iou_report": report.to_dict()}
    run.artifact("report", write_json_atomic(run.path(p.report), payload))
    run.metrics = {"score": plan.score, "std": plan.std, "per_fold": payload["per_fold"],
                   "iou_report": report.to_dict()}


def _run_robustness(run: Run, p, seed: int):
    from ganorcon.evaluation import ShiftProbe, shift_equivariance_check
    model = load_predictor(run.input(p.model))
    probe = ShiftProbe(int(p.shift[0]), int(p.shift[1]), p.fill)
    per_image = {}
    with run.timed("probe"):
        for path in list_images(run.input(p.images)):
            per_image[path.stem] = shift_equivariance_check(model, read_image(path, model.resolution), probe)
    vals = list(per_image.values())
    payload = {"shift": [probe.dx, probe.dy], "fill": probe.fill, "per_image": per_image,
               "mean_agreement": float(np.mean(vals)) if vals else None}
    run.artifact("report", write_json_atomic(run.path(p.report), payload))
    run.metrics = {"mean_agreement": payload["mean_agreement"], "images": len(vals)}


def _run_remap(run: Run, p, seed: int):
    remap = load_remap(p.remap)
    out = run.path(p.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in sorted(run.input(p.masks).glob("*.png")):
        m = remap_labels(LabelMask(read_mask(path), remap.source), remap)
        write_mask(out / path.name, m.values)
        n += 1
    run.artifact("masks", out)
    run.metrics = {"masks": n, "source": remap.source, "target": remap.target}


def _run_toy(run: Run, p: ToyParams, seed: int):
    run.metrics = toy_experiment(p, seed, run)


def toy_experiment(p: ToyParams, seed: int, run: Run | None = None) -> dict:
    """Synthetic shapes: pretrain -> MLP and CONV projectors -> distill -> cross-validate."""
    from ganorcon.contrastive import ContrastiveConfig, pretrain
    from ganorcon.distill import (DistillConfig, Student, StudentSpec, distill_train, generate_pseudo_labels,
                                  pixel_agreement)
    from ganorcon.evaluation import ShiftProbe, evaluate_models, shift_equivariance_check
    from ganorcon.projector import ProjectorSpec, ProjectorTrainConfig, Segmenter, train_projector
    from ganorcon.toy import make_toy_splits

    timer = run.timed if run else (lambda name: _NullTimer())
    out = run.out if run else None
    with timer("data"):
        splits = make_toy_splits(seed, p.n_unlabeled, p.n_fewshot, p.n_test, p.size)
    if out is not None:
        for name in ("fewshot", "test"):
            run.artifact(f"{name}_data", save_dataset(splits[name], out / "data" / name))

    ccfg = ContrastiveConfig(method="moco", resolution=p.size, epochs=p.pretrain_epochs, batch_size=32,
                             lr=0.06, architecture="resnet_tiny", queue_size=512, embed_dim=64)
    with timer("pretrain"):
        backbone, phist = pretrain(splits["unlabeled"], ccfg, seed=seed)
    if out is not None:
        run.artifact("backbone", backbone.save(out / "backbone.pt"))
    bspec = BackboneSpec("resnet_tiny", stride_mode="stride1-first-conv")

    heads = {
        "mlp": (ProjectorSpec("mlp", 4, bspec.channels, mlp_hidden=(256, 64)), p.mlp_epochs),
        "conv": (ProjectorSpec("conv-a", 4, bspec.channels, width=p.conv_width), p.conv_epochs),
    }
    metrics: dict = {"pretrain_final_loss": phist[-1]["loss"] if phist else None}
    segmenters = {}
    test = splits["test"]
    for name, (spec, epochs) in heads.items():
        tcfg = ProjectorTrainConfig(head=spec.head, epochs=epochs, snapshot_every=max(1, epochs // 4),
                                    augmentation={"crop_scale": [0.5, 1.0]})
        with timer(f"train_{name}"):
            ckpt, hist = train_projector(splits["fewshot"], backbone, spec, tcfg, seed, bspec)
        if out is not None:
            run.artifact(f"{name}_projector", ckpt.save(out / f"{name}.pt"))
        keys = sorted((k.split("/", 1)[1] for k in ckpt.children if k.startswith("snapshot/")), key=int)
        models = [Segmenter.from_checkpoint(ckpt, k) for k in keys] + [Segmenter.from_checkpoint(ckpt)]
        segmenters[name] = models[-1]
        with timer(f"eval_{name}"):
            entry = {"final_train_loss": hist[-1]["loss"] if hist else None}
            for metric in ("miou", "weighted"):
                plan, report = evaluate_models(models, test, metric, 5, seed, keys + ["final"])
                entry[metric] = plan.score
                entry[f"{metric}_std"] = plan.std
                entry[f"{metric}_per_fold"] = [r.test_score for r in plan.results]
                entry[f"{metric}_chosen"] = [plan.checkpoint_names[r.chosen] for r in plan.results]
            entry["per_class_iou"] = report.per_class
        metrics[name] = entry

    teacher = segmenters["conv"]
    with timer("distill"):
        pseudo = generate_pseudo_labels(teacher, splits["unlabeled"], test.schema)
        student_ckpt, dhist = distill_train(pseudo, StudentSpec(4, "small", 32),
                                            DistillConfig(epochs=p.distill_epochs), seed)
    if out is not None:
        run.artifact("student", student_ckpt.save(out / "student.pt"))
    student = Student.from_checkpoint(student_ckpt)
    entry = {"final_train_loss": dhist[-1]["loss"] if dhist else None,
             "teacher_agreement_test": pixel_agreement(student.predict(test.images), teacher.predict(test.images))}
    for metric in ("miou", "weighted"):
        plan, _ = evaluate_models([student], test, metric, 5, seed)
        entry[metric] = plan.score
        entry[f"{metric}_std"] = plan.std
        entry[f"{metric}_per_fold"] = [r.test_score for r in plan.results]
    metrics["conv_distill"] = entry

    with timer("shift_probe"):
        stride = 2 ** 3  # total stride of conv_5x in stride-1 mode for the tiny backbone
        probes = {"aligned": ShiftProbe(stride, stride), "unaligned": ShiftProbe(3, -5)}
        robust = {}
        for name, model in (("mlp", segmenters["mlp"]), ("conv", segmenters["conv"]), ("student", student)):
            robust[name] = {k: float(np.mean([shift_equivariance_check(model, img, pr) for img in test.images[:10]]))
                            for k, pr in probes.items()}
        metrics["shift_agreement"] = robust

    metrics["conv_ge_mlp"] = bool(metrics["conv"]["miou"] >= metrics["mlp"]["miou"])
    if not metrics["conv_ge_mlp"]:
        log.warning("CONV head scored below MLP on this run (%.4f < %.4f)",
                    metrics["conv"]["miou"], metrics["mlp"]["miou"])
    return metrics


class _NullTimer:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def toy_e2e(seed: int = 0, profile: str = "default", output_dir=None, **overrides) -> dict:
    params = ToyParams(profile=profile, **overrides)
    cfg = RunConfig("toy-e2e", params, seed, str(output_dir) if output_dir else None)
    return dispatch(cfg)


STAGE_RUNNERS = {
    "pretrain": _run_pretrain,
    "train-projector": _run_train_projector,
    "infer": _run_infer,
    "distill": _run_distill,
    "eval": _run_eval,
    "robustness": _run_robustness,
    "remap": _run_remap,
    "toy-e2e": _run_toy,
}
