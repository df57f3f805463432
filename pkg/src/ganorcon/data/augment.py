"""Augmentation for the contrastive and few-shot stages.

Geometric ops (crop, flip) are applied with one set of parameters to both
the image and its mask; masks are resampled nearest-neighbour. Photometric
ops touch the image only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

CONTRASTIVE_OPS = ("random_resized_crop", "horizontal_flip", "gaussian_blur", "grayscale", "color_jitter")
FEWSHOT_OPS = ("random_resized_crop", "horizontal_flip", "color_jitter")


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str
    crop_p: float = 1.0
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    # brightness, contrast, saturation, hue
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    gray_p: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("contrastive", "fewshot"):
            raise ValueError(f"unknown augmentation kind {self.kind!r}")

    @property
    def ops(self) -> tuple[str, ...]:
        return CONTRASTIVE_OPS if self.kind == "contrastive" else FEWSHOT_OPS

    @classmethod
    def contrastive(cls, **kw) -> "AugmentationPolicy":
        return cls(kind="contrastive", **kw)

    @classmethod
    def fewshot(cls, **kw) -> "AugmentationPolicy":
        kw.setdefault("blur_p", 0.0)
        kw.setdefault("gray_p", 0.0)
        return cls(kind="fewshot", **kw)

    @classmethod
    def disabled(cls, kind: str) -> "AugmentationPolicy":
        return cls(kind=kind, crop_p=0.0, flip_p=0.0, jitter_p=0.0, blur_p=0.0, gray_p=0.0)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample random state derived from (seed, index)."""
    return np.random.default_rng([seed, index])


def _crop_box(rng, h, w, scale, ratio):
    # same rejection scheme as torchvision's RandomResizedCrop, driven by ``rng``
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < min(ratio):
        cw, ch = w, int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        ch, cw = h, int(round(h * max(ratio)))
    else:
        cw, ch = w, h
    ch, cw = max(1, min(ch, h)), max(1, min(cw, w))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def sample_geometry(policy: AugmentationPolicy, h: int, w: int, rng: np.random.Generator) -> dict:
    box = None
    if rng.random() < policy.crop_p:
        box = _crop_box(rng, h, w, policy.crop_scale, policy.crop_ratio)
    flip = bool(rng.random() < policy.flip_p)
    return {"box": box, "flip": flip}


def apply_geometry(t: torch.Tensor, geom: dict, nearest: bool = False) -> torch.Tensor:
    """Apply crop-resize and flip to a C x H x W tensor, keeping H x W."""
    h, w = t.shape[-2:]
    if geom["box"] is not None:
        top, left, ch, cw = geom["box"]
        crop = t[..., top:top + ch, left:left + cw]
        if (ch, cw) != (h, w):
            if nearest:
                t = F.interpolate(crop[None].float(), size=(h, w), mode="nearest-exact")[0].to(t.dtype)
            else:
                t = F.interpolate(crop[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        else:
            t = crop
    if geom["flip"]:
        t = torch.flip(t, dims=(-1,))
    return t


def _photometric(img: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    if rng.random() < policy.jitter_p:
        b, c, s, hue = policy.jitter
        img = TF.adjust_brightness(img, float(rng.uniform(max(0.0, 1 - b), 1 + b)))
        img = TF.adjust_contrast(img, float(rng.uniform(max(0.0, 1 - c), 1 + c)))
        img = TF.adjust_saturation(img, float(rng.uniform(max(0.0, 1 - s), 1 + s)))
        img = TF.adjust_hue(img, float(rng.uniform(-hue, hue)))
    if policy.kind == "contrastive":
        if rng.random() < policy.gray_p:
            img = TF.rgb_to_grayscale(img, num_output_channels=3)
        if rng.random() < policy.blur_p:
            sigma = float(rng.uniform(*policy.blur_sigma))
            k = max(3, int(0.1 * min(img.shape[-2:])) | 1)
            img = TF.gaussian_blur(img, kernel_size=[k, k], sigma=[sigma, sigma])
    return img.clamp(0.0, 1.0)


def augment_pair(image: np.ndarray, mask: np.ndarray | None, policy: AugmentationPolicy,
                 rng: np.random.Generator | None = None):
    """Augment an H x W x 3 image (and its H x W mask for the few-shot kind)."""
    if policy.kind == "fewshot" and mask is None:
        raise ValueError("few-shot augmentation needs a mask")
    if policy.kind == "contrastive" and mask is not None:
        raise ValueError("contrastive augmentation takes no mask")
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    h, w = image.shape[:2]
    geom = sample_geometry(policy, h, w, rng)
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    img = apply_geometry(img, geom)
    img = _photometric(img, policy, rng)
    out_img = img.permute(1, 2, 0).contiguous().numpy()
    out_mask = None
    if mask is not None:
        m = torch.from_numpy(np.ascontiguousarray(mask))[None]
        out_mask = apply_geometry(m, geom, nearest=True)[0].numpy()
    return out_img, out_mask


def two_views(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator | None = None):
    if policy.kind != "contrastive":
        raise ValueError("two_views needs a contrastive policy")
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    a, _ = augment_pair(image, None, policy, rng)
    b, _ = augment_pair(image, None, policy, rng)
    return a, b
