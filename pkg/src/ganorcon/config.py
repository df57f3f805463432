"""Run configuration: one stage block per run, validated with a JSON schema.

Every params dataclass resolves its own defaults in ``__post_init__``, so
``asdict`` of a constructed block is the effective configuration, and
re-parsing it gives the same block back.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from ganorcon.contrastive import canonical_method
from ganorcon.errors import ConfigError
from ganorcon.projector import conv_head_for

OUTPUT_ROOT_ENV = "GANORCON_OUTPUT_ROOT"


@dataclass
class PretrainParams:
    data: str
    out: str = "backbone.pt"
    method: str = "moco"
    resolution: int = 512
    epochs: int | None = None
    batch: int | None = None
    lr: float | None = None
    architecture: str = "resnet50"
    temperature: float = 0.2
    weight_decay: float = 1e-4
    momentum: float = 0.999
    queue_size: int = 65536
    embed_dim: int = 128
    proj_dim: int = 2048
    pred_hidden: int = 512
    max_steps: int | None = None
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = "moco" if canonical_method(self.method) == "infonce-queue" else "simsiam"
        self.epochs, self.batch, self.lr = _resolve_contrastive(self)

    def contrastive(self):
        from ganorcon.contrastive import ContrastiveConfig
        return ContrastiveConfig(method=self.method, resolution=self.resolution, temperature=self.temperature,
                                 epochs=self.epochs, batch_size=self.batch, lr=self.lr,
                                 weight_decay=self.weight_decay, momentum=self.momentum,
                                 queue_size=self.queue_size, embed_dim=self.embed_dim, proj_dim=self.proj_dim,
                                 pred_hidden=self.pred_hidden, architecture=self.architecture,
                                 augmentation=self.augmentation)


def _resolve_contrastive(p):
    from ganorcon.contrastive import ContrastiveConfig
    c = ContrastiveConfig(method=p.method, resolution=p.resolution, epochs=p.epochs, batch_size=p.batch, lr=p.lr)
    return c.epochs, c.batch_size, c.lr


@dataclass
class TrainProjectorParams:
    backbone: str
    fewshot: str
    head: str = "mlp"
    classes: int | None = None
    schema: str | None = None
    resolution: int = 512
    epochs: int | None = None
    lr: float | None = None
    weight_decay: float = 5e-4
    batch: int = 2
    schedule: str | None = None
    width: float = 1.0
    mlp_hidden: list = field(default_factory=lambda: [1024, 256])
    stride_mode: str = "stride1-first-conv"
    snapshot_every: int | None = None
    augmentation: dict = field(default_factory=dict)
    out: str = "projector.pt"

    def __post_init__(self):
        if self.head == "conv":
            self.head = conv_head_for(self.resolution)
        if self.classes is None and self.schema is None:
            raise ConfigError("train-projector needs 'classes' or 'schema'")
        t = self.train_config()
        self.epochs, self.lr, self.schedule = t.epochs, t.lr, t.schedule

    def train_config(self):
        from ganorcon.projector import ProjectorTrainConfig
        return ProjectorTrainConfig(head=self.head, epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                                    batch_size=self.batch, schedule=self.schedule, stride_mode=self.stride_mode,
                                    snapshot_every=self.snapshot_every, augmentation=self.augmentation)


@dataclass
class InferParams:
    model: str
    images: str
    out: str = "masks"


@dataclass
class DistillParams:
    teacher: str
    pool: str
    student: str = "small"
    width: int = 32
    epochs: int = 2
    lr: float = 1e-3
    batch: int = 8
    out: str = "student.pt"
    pseudo_dir: str = "pseudo"


@dataclass
class EvalParams:
    model: list
    test: str
    metric: str = "miou"
    folds: int = 5
    schema: str | None = None
    empty: str = "exclude"
    include_snapshots: bool = True
    report: str = "report.json"

    def __post_init__(self):
        if isinstance(self.model, str):
            self.model = [self.model]


@dataclass
class RobustnessParams:
    model: str
    images: str
    shift: list = field(default_factory=lambda: [0, 0])
    fill: str = "edge"
    report: str = "robustness.json"

    def __post_init__(self):
        if isinstance(self.shift, str):
            self.shift = [int(v) for v in self.shift.split(",")]
        if len(self.shift) != 2:
            raise ConfigError("shift must be 'DX,DY'")


@dataclass
class RemapParams:
    remap: str
    masks: str
    out: str = "remapped"


@dataclass
class ToyParams:
    profile: str = "default"
    n_unlabeled: int | None = None
    n_fewshot: int | None = None
    n_test: int | None = None
    size: int = 64
    pretrain_epochs: int | None = None
    mlp_epochs: int | None = None
    conv_epochs: int | None = None
    distill_epochs: int | None = None
    conv_width: float | None = None

    def __post_init__(self):
        if self.profile not in TOY_PROFILES:
            raise ConfigError(f"unknown toy profile {self.profile!r}")
        for k, v in TOY_PROFILES[self.profile].items():
            if getattr(self, k) is None:
                setattr(self, k, v)


TOY_PROFILES = {
    "default": dict(n_unlabeled=200, n_fewshot=8, n_test=40, pretrain_epochs=60, mlp_epochs=100,
                    conv_epochs=300, distill_epochs=20, conv_width=0.125),
    "quick": dict(n_unlabeled=16, n_fewshot=4, n_test=10, pretrain_epochs=1, mlp_epochs=2,
                  conv_epochs=2, distill_epochs=1, conv_width=0.0625),
}

STAGES = {
    "pretrain": PretrainParams,
    "train-projector": TrainProjectorParams,
    "infer": InferParams,
    "distill": DistillParams,
    "eval": EvalParams,
    "robustness": RobustnessParams,
    "remap": RemapParams,
    "toy-e2e": ToyParams,
}

_JSON_TYPES = {str: "string", int: "integer", float: "number", bool: "boolean", dict: "object", list: "array"}


def _field_schema(tp) -> dict:
    args = typing.get_args(tp) if typing.get_origin(tp) in (typing.Union, types.UnionType) else (tp,)
    return {"type": ["null" if a is type(None) else _JSON_TYPES[typing.get_origin(a) or a] for a in args]}


def stage_schema(stage: str) -> dict:
    cls = STAGES[stage]
    hints = typing.get_type_hints(cls)
    props, required = {}, []
    for f in dataclasses.fields(cls):
        props[f.name] = _field_schema(hints[f.name])
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            required.append(f.name)
    if stage == "eval":
        props["model"] = {"type": ["array", "string"]}
    if stage == "robustness":
        props["shift"] = {"type": ["array", "string"]}
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


def run_schema(stage: str | None = None) -> dict:
    props = {"stage": {"enum": list(STAGES)}, "seed": {"type": "integer"},
             "output_dir": {"type": ["string", "null"]}}
    schema = {"type": "object", "properties": props, "required": ["stage"]}
    if stage in STAGES:
        props[stage] = stage_schema(stage)
        schema["required"].append(stage)
        schema["additionalProperties"] = False
    return schema


@dataclass
class RunConfig:
    stage: str
    params: object
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "seed": self.seed, "output_dir": self.output_dir,
                self.stage: dataclasses.asdict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        stage = d.get("stage")
        errors = sorted(jsonschema.Draft202012Validator(run_schema(stage)).iter_errors(d), key=str)
        if errors:
            raise ConfigError("invalid run config:\n" + "\n".join(
                f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors))
        try:
            params = STAGES[stage](**d[stage])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {stage} block: {exc}") from exc
        return cls(stage, params, d.get("seed", 0), d.get("output_dir"))

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.stage


def load_config_file(path) -> dict:
    """Read a run config, or the config snapshot embedded in a run manifest."""
    d = json.loads(Path(path).read_text())
    if "manifest_version" in d:
        d = d["config"]
    return d
