"""Distilling a teacher labeller into a standalone feed-forward student.

Any callable mapping an H x W x 3 image to an H x W mask can act as teacher.
A ``GeneratorTeacher`` instead produces (image, mask) pairs from latent codes,
which covers the generator-side form of the same objective: the student is
trained by the same ``distill_train`` either way.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import BasicBlock

from ganorcon.checkpoint import Checkpoint, load_state_strict, state_snapshot
from ganorcon.data.io import FewShotDataset, list_images, read_image, save_dataset
from ganorcon.data.schemas import LabelSchema
from ganorcon.errors import ConfigError, DivergenceError, EmptyPoolError, SpecError

log = logging.getLogger(__name__)

_MEAN = torch.tensor((0.485, 0.456, 0.406)).view(1, 3, 1, 1)
_STD = torch.tensor((0.229, 0.224, 0.225)).view(1, 3, 1, 1)


class Teacher(Protocol):
    num_classes: int

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


@dataclass
class FunctionTeacher:
    fn: Callable[[np.ndarray], np.ndarray]
    num_classes: int

    def __call__(self, image):
        return np.asarray(self.fn(image))


@dataclass
class GeneratorTeacher:
    """Samples images from latent codes and labels them; no real pool is needed."""

    generate: Callable[[object], tuple[np.ndarray, np.ndarray]]
    num_classes: int

    def sample(self, z):
        image, mask = self.generate(z)
        return image, np.asarray(mask)


def generate_pseudo_labels(teacher, pool, schema: LabelSchema | None = None, resolution: int | None = None,
                           out_dir=None) -> FewShotDataset:
    """Label every pool item with the teacher.

    ``pool`` is a directory, a list of images, a dataset (its masks are
    ignored), or (for a GeneratorTeacher) an
    iterable of latent codes. Unreadable files are skipped with a warning.
    The result is also written to ``out_dir`` in the standard layout if given.
    """
    schema = schema or LabelSchema.generic(teacher.num_classes)
    images, masks, stems = [], [], []
    if isinstance(teacher, GeneratorTeacher):
        for i, z in enumerate(pool):
            img, m = teacher.sample(z)
            images.append(img.astype(np.float32))
            masks.append(m.astype(np.int64))
            stems.append(f"gen{i:05d}")
    else:
        if isinstance(pool, (str, Path)):
            root = Path(pool)
            if (root / "images").is_dir():
                root = root / "images"
            items = list_images(root)
        elif isinstance(pool, FewShotDataset):
            items = pool.images
        else:
            items = list(pool)
        for i, item in enumerate(items):
            if isinstance(item, (str, Path)):
                try:
                    img = read_image(Path(item), resolution)
                except (OSError, ValueError) as exc:
                    log.warning("skipping unreadable image %s: %s", item, exc)
                    continue
                stem = Path(item).stem
            else:
                img, stem = np.asarray(item, dtype=np.float32), f"{i:05d}"
            images.append(img)
            masks.append(np.asarray(teacher(img)).astype(np.int64))
            stems.append(stem)
    if not images:
        raise EmptyPoolError("no usable images in the distillation pool")
    ds = FewShotDataset(images, masks, schema, images[0].shape[0], stems)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


@dataclass(frozen=True)
class StudentSpec:
    num_classes: int
    architecture: str = "small"
    width: int = 32

    def __post_init__(self):
        if self.architecture not in ("small", "full"):
            raise SpecError(f"student architecture must be 'small' or 'full', got {self.architecture!r}")

    def to_dict(self):
        return asdict(self)


class _ASPP(nn.Module):
    def __init__(self, cin, cout, rates=(1, 2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 1 if r == 1 else 3, padding=0 if r == 1 else r,
                                    dilation=r, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))
            for r in rates)
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.fuse = nn.Sequential(nn.Conv2d(cout * (len(rates) + 1), cout, 1, bias=False),
                                  nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        g = self.pool(x).expand(-1, -1, *x.shape[-2:])
        return self.fuse(torch.cat([b(x) for b in self.branches] + [g], dim=1))


class SmallDeepLab(nn.Module):
    """Residual encoder with dilated blocks, atrous pyramid pooling and a skip decoder.

    A desk-scale stand-in for DeepLab-v3; ``_FullDeepLab`` is the ResNet-101 original.
    """

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, stride=2, padding=1, bias=False),
                                  nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        down = nn.Sequential(nn.Conv2d(w, 2 * w, 1, stride=2, bias=False), nn.BatchNorm2d(2 * w))
        self.body = nn.Sequential(
            BasicBlock(w, 2 * w, 2, down),
            BasicBlock(2 * w, 2 * w),
            BasicBlock(2 * w, 2 * w),
        )
        # torchvision's BasicBlock refuses dilation > 1; dilate its convs after construction
        for blk, d in zip(list(self.body)[1:], (2, 4)):
            for conv in (blk.conv1, blk.conv2):
                conv.dilation, conv.padding = (d, d), (d, d)
        self.aspp = _ASPP(2 * w, w)
        self.decode = nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1, bias=False),
                                    nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        # full-resolution branch so boundaries are not limited by the stride-2 stem
        f = max(1, w // 2)
        self.fine = nn.Sequential(nn.Conv2d(3, f, 3, padding=1, bias=False), nn.BatchNorm2d(f), nn.ReLU(inplace=True))
        self.refine = nn.Sequential(nn.Conv2d(w + f, w, 3, padding=1, bias=False),
                                    nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        size = x.shape[-2:]
        x = (x - _MEAN) / _STD
        low = self.stem(x)
        y = self.aspp(self.body(low))
        y = F.interpolate(y, size=low.shape[-2:], mode="bilinear", align_corners=False)
        y = self.decode(torch.cat([y, low], dim=1))
        y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        return self.classifier(self.refine(torch.cat([y, self.fine(x)], dim=1)))


class _FullDeepLab(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        from torchvision.models.segmentation import deeplabv3_resnet101
        self.net = deeplabv3_resnet101(weights=None, weights_backbone=None, num_classes=num_classes,
                                       aux_loss=False)

    def forward(self, x):
        return self.net((x - _MEAN) / _STD)["out"]


def build_student(spec: StudentSpec, seed: int | None = 0) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    if spec.architecture == "full":
        return _FullDeepLab(spec.num_classes)
    return SmallDeepLab(spec.num_classes, spec.width)


@dataclass
class DistillConfig:
    epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


class Student:
    def __init__(self, net: nn.Module, spec: StudentSpec, resolution: int, schema: dict | None = None):
        self.net = net.eval()
        self.spec = spec
        self.resolution = resolution
        self.schema = schema
        self.num_classes = spec.num_classes

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Student":
        ckpt.expect("student")
        spec = StudentSpec(**ckpt.meta["student"])
        net = build_student(spec, seed=None)
        load_state_strict(net, ckpt.state, "student")
        return cls(net, spec, ckpt.meta["resolution"], ckpt.meta.get("schema"))

    @torch.no_grad()
    def predict(self, images, batch_size: int = 8) -> list[np.ndarray]:
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack(images[i:i + batch_size]).astype(np.float32)).permute(0, 3, 1, 2)
            out.extend(self.net(x).argmax(1).numpy())
        return out

    def __call__(self, image):
        return self.predict([image])[0]


def student_infer(image: np.ndarray, student: Checkpoint | Student) -> np.ndarray:
    if isinstance(student, Checkpoint):
        student = Student.from_checkpoint(student)
    return student(image)


def pixel_agreement(a_masks, b_masks) -> float:
    same = sum(int(np.sum(np.asarray(a) == np.asarray(b))) for a, b in zip(a_masks, b_masks))
    total = sum(np.asarray(a).size for a in a_masks)
    return same / total


def distill_train(pseudo: FewShotDataset, spec: StudentSpec, cfg: DistillConfig, seed: int = 0,
                  track: FewShotDataset | None = None):
    """Cross-entropy fit of a student to teacher labels; returns ``(checkpoint, history)``.

    If ``track`` is given, per-epoch student/label pixel agreement on it is logged.
    """
    if pseudo.schema.num_classes != spec.num_classes:
        raise ConfigError(f"pseudo labels have {pseudo.schema.num_classes} classes, student expects {spec.num_classes}")
    ss = np.random.SeedSequence(seed)
    s_init, s_order = ss.spawn(2)
    net = build_student(spec, int(s_init.generate_state(1)[0]))
    order_rng = np.random.default_rng(s_order)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    meta = {"student": spec.to_dict(), "resolution": pseudo.resolution, "schema": pseudo.schema.to_dict(),
            "train": cfg.to_dict(), "seed": seed}

    def ckpt(epoch):
        return Checkpoint("student", {**meta, "epoch": epoch}, state_snapshot(net))

    history, last_good = [], ckpt(0)
    images = torch.from_numpy(np.stack(pseudo.images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    labels = torch.from_numpy(np.stack(pseudo.masks)).long()
    for epoch in range(cfg.epochs):
        net.train()
        order = order_rng.permutation(len(pseudo))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            if len(idx) < 2 and len(order) >= 2:
                continue  # batch-norm needs two samples; the remainder rolls into next epoch's shuffle
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite distillation loss at epoch {epoch}", checkpoint=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else math.nan}
        if track is not None:
            rec["agreement"] = pixel_agreement(Student(net, spec, pseudo.resolution).predict(track.images),
                                               track.masks)
        history.append(rec)
        log.debug("distill epoch %d %s", epoch, rec)
        last_good = ckpt(epoch + 1)
    net.eval()
    return last_good, history
