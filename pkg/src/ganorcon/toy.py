"""Procedural "faces" with exact part masks, a desk-scale stand-in for real part datasets.

Each image holds one elliptical head (class 1) with two eyes (class 2) and a
mouth (class 3) over a noisy gradient background (class 0).
"""

from __future__ import annotations

import colorsys

import numpy as np

from ganorcon.data.io import FewShotDataset
from ganorcon.data.schemas import LabelSchema

TOY_SCHEMA = LabelSchema("toy4", ("background", "head", "eye", "mouth"))


def _color(rng, hue, sat, val):
    h = (rng.uniform(*hue)) % 1.0
    return np.array(colorsys.hsv_to_rgb(h, rng.uniform(*sat), rng.uniform(*val)), dtype=np.float32)


def render_shape(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    s = size / 64.0

    c0, c1 = _color(rng, (0, 1), (0.1, 0.6), (0.2, 0.9)), _color(rng, (0, 1), (0.1, 0.6), (0.2, 0.9))
    t = (xx * np.cos(a := rng.uniform(0, 2 * np.pi)) + yy * np.sin(a)) / (size * 1.5) + 0.5
    image = c0 * (1 - t[..., None]) + c1 * t[..., None]
    mask = np.zeros((size, size), dtype=np.int64)

    cy, cx = rng.uniform(26, 38) * s, rng.uniform(26, 38) * s
    ry, rx = rng.uniform(17, 23) * s, rng.uniform(14, 19) * s
    head = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    image[head] = _color(rng, (0.02, 0.12), (0.3, 0.7), (0.6, 1.0))
    mask[head] = 1

    eye_col = _color(rng, (0.5, 0.75), (0.4, 0.9), (0.05, 0.35))
    er = rng.uniform(3.5, 5.0) * s
    ey = cy - ry * rng.uniform(0.25, 0.4)
    dx = rx * rng.uniform(0.35, 0.5)
    for ex in (cx - dx, cx + dx):
        eye = (yy - ey) ** 2 + (xx - ex) ** 2 <= er ** 2
        image[eye] = eye_col
        mask[eye] = 2

    my = cy + ry * rng.uniform(0.35, 0.5)
    mh, mw = rng.uniform(2.5, 4.0) * s, rx * rng.uniform(0.4, 0.6)
    mouth = (((yy - my) / mh) ** 2 + ((xx - cx) / mw) ** 2 <= 1)
    image[mouth] = _color(rng, (0.95, 1.02), (0.5, 0.9), (0.4, 0.8))
    mask[mouth] = 3

    image = image + rng.normal(0, 0.03, image.shape).astype(np.float32)
    return np.clip(image, 0, 1).astype(np.float32), mask


def render_latent(z: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image/mask pair for an integer latent code."""
    return render_shape(np.random.default_rng([0x70E, int(z)]), size)


def make_toy_splits(seed: int = 0, n_unlabeled: int = 200, n_fewshot: int = 8, n_test: int = 40,
                    size: int = 64) -> dict:
    rng = np.random.default_rng(seed)

    def draw(n, prefix):
        pairs = [render_shape(rng, size) for _ in range(n)]
        return FewShotDataset([p[0] for p in pairs], [p[1] for p in pairs], TOY_SCHEMA, size,
                              [f"{prefix}{i:04d}" for i in range(n)])

    unlabeled = [render_shape(rng, size)[0] for _ in range(n_unlabeled)]
    return {"unlabeled": unlabeled, "fewshot": draw(n_fewshot, "train"), "test": draw(n_test, "test")}
