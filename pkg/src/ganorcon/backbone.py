"""Residual backbones exposing their stages, and hypercolumn extraction.

A hypercolumn stack is stored channel-first, ``(N, C, H, W)``; stage maps are
bilinearly interpolated (corner-aligned) to a common size and concatenated
shallow to deep. Batch-norm statistics are frozen (inference mode) whenever
features are extracted.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet
from torchvision.models.resnet import BasicBlock

from ganorcon.checkpoint import Checkpoint, load_state_strict
from ganorcon.errors import CheckpointError, ShapeError, SpecError

STAGES = ("conv_2x", "conv_3x", "conv_4x", "conv_5x")
STRIDE_MODES = ("standard", "stride1-first-conv")

# channels per stage for each supported architecture
ARCH_CHANNELS = {
    "resnet50": (256, 512, 1024, 2048),
    "resnet18": (64, 128, 256, 512),
    "resnet_tiny": (16, 32, 64, 128),
}

_MEAN = (0.485, 0.456, 0.406)
_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    architecture: str = "resnet50"
    tap_points: tuple[str, ...] = STAGES
    stride_mode: str = "standard"

    def __post_init__(self):
        if self.architecture not in ARCH_CHANNELS:
            raise SpecError(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCH_CHANNELS)}")
        bad = [t for t in self.tap_points if t not in STAGES]
        if bad or not self.tap_points:
            raise SpecError(f"tap points {bad or '()'} not in {STAGES}")
        if self.stride_mode not in STRIDE_MODES:
            raise SpecError(f"stride_mode must be one of {STRIDE_MODES}")
        object.__setattr__(self, "tap_points", tuple(sorted(self.tap_points, key=STAGES.index)))

    @property
    def stage_channels(self) -> dict[str, int]:
        ch = dict(zip(STAGES, ARCH_CHANNELS[self.architecture]))
        return {t: ch[t] for t in self.tap_points}

    @property
    def channels(self) -> int:
        return sum(self.stage_channels.values())

    def with_stride(self, stride_mode: str) -> "BackboneSpec":
        return BackboneSpec(self.architecture, self.tap_points, stride_mode)

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "tap_points": list(self.tap_points),
                "stride_mode": self.stride_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(d.get("architecture", "resnet50"), tuple(d.get("tap_points", STAGES)),
                   d.get("stride_mode", "standard"))


class StagedResNet(nn.Module):
    """A residual network split into a stem and four named stages."""

    def __init__(self, architecture: str = "resnet50"):
        super().__init__()
        self.architecture = architecture
        if architecture == "resnet_tiny":
            widths = ARCH_CHANNELS[architecture]
            # no max-pool: the stem is the only stride before conv_2x
            self.stem = nn.Sequential(
                nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(widths[0]),
                nn.ReLU(inplace=True),
            )
            stages, inplanes = [], widths[0]
            for i, planes in enumerate(widths):
                stride = 1 if i == 0 else 2
                down = None
                if stride != 1 or inplanes != planes:
                    down = nn.Sequential(nn.Conv2d(inplanes, planes, 1, stride=stride, bias=False),
                                         nn.BatchNorm2d(planes))
                stages.append(BasicBlock(inplanes, planes, stride, down))
                inplanes = planes
        else:
            net = getattr(resnet, architecture)(weights=None)
            self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            stages = [net.layer1, net.layer2, net.layer3, net.layer4]
        self.stages = nn.ModuleDict(OrderedDict(zip(STAGES, stages)))
        self.register_buffer("mean", torch.tensor(_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(_STD).view(1, 3, 1, 1), persistent=False)
        self.out_channels = ARCH_CHANNELS[architecture][-1]

    @property
    def first_conv(self) -> nn.Conv2d:
        return self.stem[0]

    def set_stride_mode(self, mode: str) -> None:
        if mode not in STRIDE_MODES:
            raise SpecError(f"stride_mode must be one of {STRIDE_MODES}")
        s = 1 if mode == "stride1-first-conv" else 2
        self.first_conv.stride = (s, s)

    def forward_stages(self, x: torch.Tensor, taps=STAGES) -> "OrderedDict[str, torch.Tensor]":
        x = (x - self.mean) / self.std
        x = self.stem(x)
        out = OrderedDict()
        last = max(STAGES.index(t) for t in taps)
        for name in STAGES[:last + 1]:
            x = self.stages[name](x)
            if name in taps:
                out[name] = x
        return out

    def forward(self, x):
        """Globally pooled conv_5x features, used as the encoder during pretraining."""
        feats = self.forward_stages(x, ("conv_5x",))["conv_5x"]
        return torch.flatten(F.adaptive_avg_pool2d(feats, 1), 1)


def build_backbone(spec: BackboneSpec, seed: int | None = None) -> StagedResNet:
    if seed is not None:
        torch.manual_seed(seed)
    net = StagedResNet(spec.architecture)
    net.set_stride_mode(spec.stride_mode)
    return net


def backbone_checkpoint(net: StagedResNet, spec: BackboneSpec, **meta) -> Checkpoint:
    return Checkpoint("backbone", {"architecture": spec.architecture,
                                   "tap_points": list(spec.tap_points), **meta},
                      {k: v.detach().clone() for k, v in net.state_dict().items()})


def load_backbone(weights: Checkpoint, spec: BackboneSpec | None = None) -> StagedResNet:
    """Instantiate a frozen, inference-mode backbone from a checkpoint."""
    weights.expect("backbone")
    arch = weights.meta.get("architecture")
    if spec is None:
        spec = BackboneSpec(arch, tuple(weights.meta.get("tap_points", STAGES)))
    if arch != spec.architecture:
        raise CheckpointError(f"checkpoint holds {arch!r} weights, spec asks for {spec.architecture!r}")
    net = StagedResNet(spec.architecture)
    load_state_strict(net, weights.state, "backbone")
    net.set_stride_mode(spec.stride_mode)
    net.eval()
    net.requires_grad_(False)
    return net


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        if image.ndim == 3:
            image = image[None]
        return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(0, 3, 1, 2)
    if image.dim() == 3:
        image = image[None]
    return image


@torch.no_grad()
def forward_stages(image, spec: BackboneSpec, weights: Checkpoint | StagedResNet):
    """Stage feature maps (shallow to deep) for an H x W x 3 image or an N x 3 x H x W batch."""
    net = weights if isinstance(weights, StagedResNet) else load_backbone(weights, spec)
    net.set_stride_mode(spec.stride_mode)
    was_training = net.training
    net.eval()
    try:
        return net.forward_stages(_as_batch(image), spec.tap_points)
    finally:
        net.train(was_training)


def extract_hypercolumns(stages, out_size) -> torch.Tensor:
    """Interpolate every stage map to ``out_size`` and concatenate along channels."""
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    out_size = tuple(out_size)
    parts = []
    for name, feat in stages.items():
        h, w = feat.shape[-2:]
        if h > out_size[0] or w > out_size[1]:
            raise ShapeError(f"stage {name} is {h}x{w}, larger than the requested {out_size}")
        if (h, w) == out_size:
            parts.append(feat)
        else:
            parts.append(F.interpolate(feat, size=out_size, mode="bilinear", align_corners=True))
    return torch.cat(parts, dim=1)


def hypercolumn_at(stack: torch.Tensor, row: int, col: int) -> torch.Tensor:
    """Feature vector at one pixel of a ``(C, H, W)`` or ``(1, C, H, W)`` stack."""
    if stack.dim() == 4:
        if stack.shape[0] != 1:
            raise ShapeError("hypercolumn_at takes a single stack, not a batch")
        stack = stack[0]
    h, w = stack.shape[-2:]
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} stack")
    return stack[:, row, col]


class HypercolumnExtractor:
    """Frozen backbone producing hypercolumns at the input resolution.

    Stage features are computed once per batch and interpolated on demand,
    so the full stack is only materialized for the crop being processed.
    """

    def __init__(self, weights: Checkpoint, spec: BackboneSpec | None = None):
        self.net = load_backbone(weights, spec)
        self.spec = spec or BackboneSpec(self.net.architecture, tuple(weights.meta.get("tap_points", STAGES)))
        self.net.set_stride_mode(self.spec.stride_mode)

    @property
    def channels(self) -> int:
        return self.spec.channels

    @torch.no_grad()
    def __call__(self, images: torch.Tensor, out_size=None) -> torch.Tensor:
        images = _as_batch(images)
        stages = forward_stages(images, self.spec, self.net)
        return extract_hypercolumns(stages, out_size or tuple(images.shape[-2:]))
