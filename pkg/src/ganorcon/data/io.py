"""Dataset layout on disk: ``<root>/images/*.{png,jpg}`` and ``<root>/masks/*.png``.

Masks are single-channel 8-bit images whose pixel value is the class index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ganorcon.data.schemas import LabelMask, LabelSchema, validate_mask
from ganorcon.errors import PairingError, SchemaViolationError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def as_image(x) -> np.ndarray:
    """Validate an H x W x 3 float image with values in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"image values must lie in [0, 1], got [{x.min()}, {x.max()}]")
    return x.astype(np.float32, copy=False)


@dataclass
class FewShotDataset:
    images: list[np.ndarray]
    masks: list[np.ndarray]
    schema: LabelSchema
    resolution: int
    stems: list[str] | None = None

    def __post_init__(self):
        if not self.images:
            raise PairingError("dataset is empty")
        if len(self.images) != len(self.masks):
            raise PairingError(f"{len(self.images)} images but {len(self.masks)} masks")
        if self.stems is None:
            self.stems = [f"{i:05d}" for i in range(len(self.images))]
        for img, m, stem in zip(self.images, self.masks, self.stems):
            if img.shape[:2] != (self.resolution, self.resolution) or m.shape != img.shape[:2]:
                raise PairingError(f"{stem}: expected {self.resolution}x{self.resolution}, "
                                   f"got image {img.shape[:2]} and mask {m.shape}")
            validate_mask(m, self.schema, where=stem)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.masks[i]

    def label_mask(self, i) -> LabelMask:
        return LabelMask(self.masks[i], self.schema.name)

    def subset(self, indices) -> "FewShotDataset":
        indices = list(indices)
        return FewShotDataset([self.images[i] for i in indices], [self.masks[i] for i in indices],
                              self.schema, self.resolution, [self.stems[i] for i in indices])


def read_image(path: Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def read_mask(path: Path, resolution: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise SchemaViolationError(f"{path.name}: mask must be single-channel 8-bit, got mode {im.mode}")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.NEAREST)
        return np.asarray(im, dtype=np.int64)


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise SchemaViolationError("mask values must fit in 8 bits")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def list_images(directory: Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, schema: LabelSchema, resolution: int) -> FewShotDataset:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise PairingError(f"{root} has no images/ directory")
    images = list_images(img_dir)
    if not images:
        raise PairingError(f"{img_dir} contains no images")
    masks = {p.stem: p for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else {}
    imgs, msks, stems = [], [], []
    for path in images:
        if path.stem not in masks:
            raise PairingError(f"no mask for image stem {path.stem!r} in {mask_dir}")
        m = read_mask(masks[path.stem], resolution)
        validate_mask(m, schema, where=masks[path.stem].name)
        imgs.append(read_image(path, resolution))
        msks.append(m)
        stems.append(path.stem)
    return FewShotDataset(imgs, msks, schema, resolution, stems)


def save_dataset(dataset: FewShotDataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for stem, img, m in zip(dataset.stems, dataset.images, dataset.masks):
        write_image(root / "images" / f"{stem}.png", img)
        write_mask(root / "masks" / f"{stem}.png", m)
    return root


def load_pool(directory, resolution: int | None = None) -> tuple[list[np.ndarray], list[str]]:
    """Load an unlabeled image pool. Unreadable files are skipped with a warning."""
    directory = Path(directory)
    if (directory / "images").is_dir():
        directory = directory / "images"
    images, stems = [], []
    for path in list_images(directory):
        try:
            images.append(read_image(path, resolution))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        stems.append(path.stem)
    return images, stems
