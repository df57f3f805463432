"""Few-shot heads mapping frozen hypercolumns to per-pixel class scores.

``mlp`` is a per-pixel two-hidden-layer network. ``conv-a`` / ``conv-b`` are
UNet-style encoder-decoders described by row tables: each row is
``(name, op, input_channels, skip)`` and a convolution's output width is the
next row's input width. Upsampling rows list the width before the skip is
concatenated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ganorcon.backbone import BackboneSpec, HypercolumnExtractor
from ganorcon.checkpoint import Checkpoint, load_state_strict, state_snapshot
from ganorcon.data.augment import AugmentationPolicy, augment_pair
from ganorcon.data.io import FewShotDataset
from ganorcon.errors import ConfigError, DivergenceError, ShapeError, SpecError

log = logging.getLogger(__name__)

HEADS = ("mlp", "conv-a", "conv-b")

# Model-A, for 512 x 512 inputs. "classes" marks the output row.
MODEL_A = (
    ("Conv1", "conv", 3840, None),
    ("MP1", "pool", 1024, None),
    ("Conv2", "conv", 1024, None),
    ("MP2", "pool", 256, None),
    ("Conv3", "conv", 256, None),
    ("MP3", "pool", 256, None),
    ("Conv4", "conv", 256, None),
    ("MP4", "pool", 256, None),
    ("Conv5", "conv", 256, None),
    ("MP5", "pool", 512, None),
    ("Conv6", "conv", 512, None),
    # Up1 repeats Conv6's 512: that is Conv6's output, upsampled then joined with Conv5 (512 + 512)
    ("Up1", "up", 512, "Conv5"),
    ("Conv7", "conv", 1024, None),
    ("Up2", "up", 256, "Conv4"),
    ("Conv8", "conv", 512, None),
    ("Up3", "up", 256, "Conv3"),
    ("Conv9", "conv", 512, None),
    ("Up4", "up", 128, "Conv2"),
    ("Conv10", "conv", 384, None),
    ("Up5", "up", 256, "Conv1"),
    ("Conv11", "conv", 1280, None),
    ("FC", "linear", 256, None),
)

# Model-B, for 256 x 256 inputs: one pooling level fewer.
MODEL_B = (
    ("Conv1", "conv", 3840, None),
    ("MP1", "pool", 1024, None),
    ("Conv2", "conv", 1024, None),
    ("MP2", "pool", 256, None),
    ("Conv3", "conv", 256, None),
    ("MP3", "pool", 256, None),
    ("Conv4", "conv", 256, None),
    ("MP4", "pool", 256, None),
    ("Conv5", "conv", 256, None),
    ("Up1", "up", 512, "Conv4"),
    ("Conv6", "conv", 768, None),
    ("Up2", "up", 256, "Conv3"),
    ("Conv7", "conv", 512, None),
    ("Up3", "up", 128, "Conv2"),
    ("Conv8", "conv", 384, None),
    ("Up4", "up", 256, "Conv1"),
    ("Conv9", "conv", 1280, None),
    ("FC", "linear", 256, None),
)

TABLES = {"conv-a": MODEL_A, "conv-b": MODEL_B}


@dataclass(frozen=True)
class LayerPlan:
    name: str
    op: str
    in_channels: int
    out_channels: int
    skip: str | None = None


def plan_layers(table, in_channels: int, num_classes: int, width: float = 1.0) -> list[LayerPlan]:
    """Check a row table's channel arithmetic and resolve output widths.

    An ``up`` row lists the width of the upsampled tensor before the skip
    concatenation. ``width`` scales every hidden convolution; the input and
    class counts stay fixed. Raises SpecError naming the first inconsistent row.
    """
    rows = list(table)
    if not rows or rows[-1][1] != "linear":
        raise SpecError("table must end with a linear row")
    # pass 1: nominal arithmetic as written
    out_of: dict[str, int] = {}
    current = rows[0][2]
    for i, (name, op, cin, skip) in enumerate(rows):
        if cin != current:
            raise SpecError(f"layer {name}: table says {cin} input channels but the previous row produces {current}")
        if op == "conv":
            if i + 1 >= len(rows):
                raise SpecError(f"layer {name}: convolution has no following row")
            cout = rows[i + 1][2]
            if cout <= 0:
                raise SpecError(f"layer {name}: derived output width {cout} is not positive")
            out_of[name] = cout
            current = cout
        elif op == "pool":
            pass
        elif op == "up":
            if skip not in out_of:
                raise SpecError(f"layer {name}: unknown skip source {skip!r}")
            current = cin + out_of[skip]
        elif op == "linear":
            current = num_classes
        else:
            raise SpecError(f"layer {name}: unknown op {op!r}")
    # pass 2: apply width scaling and the actual input width
    plans, scaled, current = [], {}, in_channels
    for name, op, _, skip in rows:
        if op == "conv":
            cout = max(1, int(round(out_of[name] * width)))
            plans.append(LayerPlan(name, op, current, cout))
            scaled[name] = cout
            current = cout
        elif op == "pool":
            plans.append(LayerPlan(name, op, current, current))
        elif op == "up":
            cout = current + scaled[skip]
            plans.append(LayerPlan(name, op, current, cout, skip))
            current = cout
        else:
            plans.append(LayerPlan(name, op, current, num_classes))
    return plans


@dataclass(frozen=True)
class ProjectorSpec:
    head: str
    num_classes: int
    in_channels: int = 3840
    mlp_hidden: tuple[int, ...] = (1024, 256)
    width: float = 1.0
    layers: tuple | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise SpecError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise SpecError("num_classes and in_channels must be positive")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(tuple(r) for r in self.layers))

    @property
    def table(self):
        return self.layers if self.layers is not None else TABLES.get(self.head)

    @property
    def pool_levels(self) -> int:
        return 0 if self.head == "mlp" else sum(1 for r in self.table if r[1] == "pool")

    def plan(self) -> list[LayerPlan]:
        return plan_layers(self.table, self.in_channels, self.num_classes, self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["layers"] = [list(r) for r in self.layers] if self.layers is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectorSpec":
        d = dict(d)
        d["mlp_hidden"] = tuple(d.get("mlp_hidden", (1024, 256)))
        return cls(**d)


def conv_head_for(resolution: int) -> str:
    return "conv-b" if resolution <= 256 else "conv-a"


class MLPHead(nn.Module):
    def __init__(self, in_channels, hidden, num_classes):
        super().__init__()
        dims = [in_channels, *hidden]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU(inplace=True)]
        layers.append(nn.Linear(dims[-1], num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        n, c, h, w = x.shape
        y = self.net(x.permute(0, 2, 3, 1).reshape(-1, c))
        return y.reshape(n, h, w, -1).permute(0, 3, 1, 2)


class ConvHead(nn.Module):
    """Encoder-decoder with 3x3 ConvBNReLU, 2x2 max-pooling and 2x bilinear upsampling."""

    def __init__(self, plans: list[LayerPlan]):
        super().__init__()
        self.plans = plans
        self.layers = nn.ModuleDict()
        for p in plans:
            if p.op == "conv":
                self.layers[p.name] = nn.Sequential(
                    nn.Conv2d(p.in_channels, p.out_channels, 3, padding=1, bias=False),
                    nn.BatchNorm2d(p.out_channels),
                    nn.ReLU(inplace=True),
                )
            elif p.op == "linear":
                self.layers[p.name] = nn.Conv2d(p.in_channels, p.out_channels, 1)

    def forward(self, x, trace: list | None = None):
        saved = {}
        for p in self.plans:
            if trace is not None:
                trace.append((p.name, tuple(x.shape[1:])))
            if p.op == "conv":
                x = self.layers[p.name](x)
                saved[p.name] = x
            elif p.op == "pool":
                x = F.max_pool2d(x, 2)
            elif p.op == "up":
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
                x = torch.cat([x, saved[p.skip]], dim=1)
            else:
                x = self.layers[p.name](x)
        if trace is not None:
            trace.append(("out", tuple(x.shape[1:])))
        return x


def build_projector(spec: ProjectorSpec, seed: int | None = 0) -> nn.Module:
    """Initialize a head; PyTorch default init (Kaiming-uniform) under ``seed``."""
    if seed is not None:
        torch.manual_seed(seed)
    if spec.head == "mlp":
        return MLPHead(spec.in_channels, spec.mlp_hidden, spec.num_classes)
    return ConvHead(spec.plan())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def project(stack: torch.Tensor, weights: nn.Module, spec: ProjectorSpec) -> torch.Tensor:
    """Per-pixel class scores ``(N, C, H, W)`` for a ``(N, K, H, W)`` hypercolumn stack."""
    if stack.dim() == 3:
        stack = stack[None]
    if stack.shape[1] != spec.in_channels:
        raise ShapeError(f"stack has {stack.shape[1]} channels, projector expects {spec.in_channels}")
    if spec.head != "mlp":
        k = 2 ** spec.pool_levels
        h, w = stack.shape[-2:]
        if h % k or w % k:
            raise ShapeError(f"{spec.head} needs spatial size divisible by {k}, got {h}x{w}")
    return weights(stack)


@dataclass
class ProjectorTrainConfig:
    head: str = "mlp"
    epochs: int | None = None
    lr: float | None = None
    weight_decay: float = 5e-4
    batch_size: int = 2
    schedule: str | None = None
    stride_mode: str = "stride1-first-conv"
    snapshot_every: int | None = None
    augmentation: dict = field(default_factory=dict)

    def __post_init__(self):
        mlp = self.head == "mlp"
        if self.epochs is None:
            self.epochs = 800 if mlp else 200
        if self.lr is None:
            self.lr = 1e-3 if mlp else 5e-4
        if self.schedule is None:
            self.schedule = "cosine" if mlp else "constant"
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def policy(self, seed: int = 0) -> AugmentationPolicy:
        return AugmentationPolicy.fewshot(seed=seed, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in self.augmentation.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def projector_checkpoint(model: nn.Module, spec: ProjectorSpec, backbone: Checkpoint,
                         backbone_spec: BackboneSpec, resolution: int, schema: dict | None = None,
                         snapshots: dict | None = None, **meta) -> Checkpoint:
    children = {"backbone": backbone}
    for key, state in (snapshots or {}).items():
        children[f"snapshot/{key}"] = Checkpoint("projector-snapshot", {"epoch": key}, state)
    return Checkpoint("segmenter", {"projector": spec.to_dict(), "backbone_spec": backbone_spec.to_dict(),
                                    "resolution": resolution, "schema": schema, **meta},
                      state_snapshot(model), children)


class Segmenter:
    """Backbone + projector: image -> class scores -> argmax mask."""

    def __init__(self, extractor: HypercolumnExtractor, head: nn.Module, spec: ProjectorSpec,
                 resolution: int, schema: dict | None = None):
        self.extractor = extractor
        self.head = head.eval()
        self.spec = spec
        self.resolution = resolution
        self.schema = schema

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, snapshot: str | None = None) -> "Segmenter":
        ckpt.expect("segmenter")
        spec = ProjectorSpec.from_dict(ckpt.meta["projector"])
        bspec = BackboneSpec.from_dict(ckpt.meta["backbone_spec"])
        head = build_projector(spec, seed=None)
        state = ckpt.state if snapshot is None else ckpt.children[f"snapshot/{snapshot}"].state
        load_state_strict(head, state, "projector")
        return cls(HypercolumnExtractor(ckpt.children["backbone"], bspec), head, spec,
                   ckpt.meta["resolution"], ckpt.meta.get("schema"))

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @torch.no_grad()
    def scores(self, images: torch.Tensor) -> torch.Tensor:
        size = images.shape[-2:]
        if tuple(size) != (self.resolution, self.resolution):
            images = F.interpolate(images, size=(self.resolution,) * 2, mode="bilinear", align_corners=False)
        logits = project(self.extractor(images), self.head, self.spec)
        if tuple(size) != (self.resolution, self.resolution):
            logits = F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
        return logits

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.predict([image])[0]

    def predict(self, images, batch_size: int = 8) -> list[np.ndarray]:
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack(images[i:i + batch_size]).astype(np.float32)).permute(0, 3, 1, 2)
            # torch.argmax returns the first maximal index: ties go to the lowest class
            out.extend(self.scores(x).argmax(1).numpy())
        return out


def infer_mask(image: np.ndarray, backbone: Checkpoint, projector: nn.Module, spec: ProjectorSpec,
               backbone_spec: BackboneSpec | None = None) -> np.ndarray:
    bspec = backbone_spec or BackboneSpec(backbone.meta["architecture"],
                                          tuple(backbone.meta["tap_points"]), "stride1-first-conv")
    seg = Segmenter(HypercolumnExtractor(backbone, bspec), projector, spec, image.shape[0])
    return seg(image)


def _batch(arrs) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


def train_projector(data: FewShotDataset, backbone: Checkpoint, spec: ProjectorSpec,
                    cfg: ProjectorTrainConfig, seed: int = 0, backbone_spec: BackboneSpec | None = None):
    """Fit a head on frozen hypercolumns; returns ``(segmenter_checkpoint, history)``."""
    if data.schema.num_classes != spec.num_classes:
        raise ConfigError(f"dataset has {data.schema.num_classes} classes, projector expects {spec.num_classes}")
    bspec = backbone_spec or BackboneSpec(backbone.meta["architecture"],
                                          tuple(backbone.meta.get("tap_points", ())) or BackboneSpec().tap_points,
                                          cfg.stride_mode)
    if spec.head != "mlp" and data.resolution // 2 ** spec.pool_levels < 2:
        # batch-norm at the bottleneck needs more than one value per channel
        raise ConfigError(f"{spec.head} needs resolution >= {2 ** (spec.pool_levels + 1)}, got {data.resolution}")
    extractor = HypercolumnExtractor(backbone, bspec)
    if extractor.channels != spec.in_channels:
        raise ShapeError(f"backbone yields {extractor.channels} hypercolumn channels, projector expects {spec.in_channels}")
    ss = np.random.SeedSequence(seed)
    s_init, s_order, s_aug = ss.spawn(3)
    model = build_projector(spec, int(s_init.generate_state(1)[0]))
    order_rng = np.random.default_rng(s_order)
    aug_seed = int(s_aug.generate_state(1)[0])
    policy = cfg.policy(aug_seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / total)))
    else:
        sched = None
    schema = data.schema.to_dict()

    def ckpt(snaps=None, **meta):
        return projector_checkpoint(model, spec, backbone, bspec, data.resolution, schema, snaps,
                                    train=cfg.to_dict(), seed=seed, **meta)

    history, snapshots = [], {}
    last_good = ckpt(epoch=0)
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = order_rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rng = np.random.default_rng([aug_seed, step])
            imgs, masks = [], []
            for i in idx:
                a, m = augment_pair(data.images[i], data.masks[i], policy, rng)
                imgs.append(a)
                masks.append(m)
            x = _batch(imgs)
            y = torch.from_numpy(np.stack(masks)).long()
            feats = extractor(x)
            loss = F.cross_entropy(project(feats, model, spec), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite projector loss at epoch {epoch}", checkpoint=last_good, step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(float(loss.detach()))
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.param_groups[0]["lr"]})
        log.debug("projector epoch %d loss %.4f", epoch, history[-1]["loss"])
        if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0 and epoch + 1 < cfg.epochs:
            snapshots[str(epoch + 1)] = state_snapshot(model)
        last_good = ckpt(epoch=epoch + 1)
    model.eval()
    return ckpt(snapshots, epoch=cfg.epochs), history
