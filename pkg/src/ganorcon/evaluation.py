"""Segmentation metrics, five-fold checkpoint selection and the shift probe.

Scores over a set of images are computed from the summed confusion matrix of
that set. Classes whose union is empty are left undefined (NaN) and excluded
from the mean by default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ganorcon.errors import MetricError, ProtocolError

METRICS = ("miou", "weighted")


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m))


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """``conf[g, p]`` counts pixels with ground truth ``g`` predicted as ``p``."""
    sp, sg = getattr(pred, "schema_id", None), getattr(gt, "schema_id", None)
    pred, gt = _values(pred), _values(gt)
    if sp is not None and sg is not None and sp != sg:
        raise MetricError(f"schema mismatch: {sp!r} vs {sg!r}")
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"{name} has labels outside 0..{num_classes - 1}")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class IoUReport:
    per_class: list[float | None]
    miou: float
    weighted_miou: float
    class_weights: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def scores_from_confusion(conf: np.ndarray, empty: str = "exclude") -> IoUReport:
    """``empty``: how to treat classes with an empty union -- "exclude", "zero" or "one"."""
    conf = np.asarray(conf, dtype=np.float64)
    inter = np.diag(conf)
    gt_count = conf.sum(1)
    union = gt_count + conf.sum(0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        per = inter / union
    if empty == "zero":
        per = np.where(union == 0, 0.0, per)
    elif empty == "one":
        per = np.where(union == 0, 1.0, per)
    elif empty != "exclude":
        raise MetricError(f"unknown empty-union policy {empty!r}")
    defined = ~np.isnan(per)
    miou = float(per[defined].mean()) if defined.any() else float("nan")
    total = gt_count.sum()
    weights = gt_count / total if total else np.zeros_like(gt_count)
    # absent-from-gt classes carry zero weight, so NaN entries never contribute
    weighted = float(np.sum(weights * np.nan_to_num(per)))
    return IoUReport([None if np.isnan(v) else float(v) for v in per], miou, weighted, weights.tolist())


def iou(pred, gt, num_classes: int, empty: str = "exclude") -> IoUReport:
    return scores_from_confusion(confusion(pred, gt, num_classes), empty)


def weighted_miou(pred, gt, num_classes: int) -> float:
    return iou(pred, gt, num_classes).weighted_miou


def metric_value(conf: np.ndarray, metric: str, empty: str = "exclude") -> float:
    if metric not in METRICS:
        raise MetricError(f"unknown metric {metric!r}")
    r = scores_from_confusion(conf, empty)
    return r.miou if metric == "miou" else r.weighted_miou


@dataclass
class FoldResult:
    fold: int
    validation: list[int]
    chosen: int
    validation_score: float
    test_score: float


@dataclass
class FoldPlan:
    folds: list[list[int]]
    results: list[FoldResult]
    score: float
    std: float
    metric: str
    seed: int
    protocol: str = "select on one fold, test on the other four"
    checkpoint_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def make_folds(n: int, k: int = 5, seed: int = 0) -> list[list[int]]:
    """Seeded shuffle of 0..n-1 split into ``k`` contiguous blocks."""
    if n < k:
        raise ProtocolError(f"{k}-fold protocol needs at least {k} test items, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in block) for block in np.array_split(perm, k)]


def cross_validate(confusions: np.ndarray, metric: str = "miou", folds: int = 5, seed: int = 0,
                   checkpoint_names=None, empty: str = "exclude") -> FoldPlan:
    """Checkpoint selection by k-fold cross validation.

    ``confusions`` has shape ``(n_checkpoints, n_items, C, C)``: the per-image
    confusion matrix of every candidate. For each fold, the candidate with the
    best score on that fold is scored on the remaining folds; the final score
    is the mean over folds. Ties go to the earliest candidate.
    """
    confusions = np.asarray(confusions)
    if confusions.ndim != 4 or confusions.shape[0] < 1:
        raise ProtocolError("need at least one checkpoint")
    n_ckpt, n = confusions.shape[:2]
    plan = make_folds(n, folds, seed)
    results = []
    for f, val in enumerate(plan):
        rest = sorted(set(range(n)) - set(val))
        val_scores = [metric_value(confusions[c, val].sum(0), metric, empty) for c in range(n_ckpt)]
        best = int(np.nanargmax(val_scores)) if not np.all(np.isnan(val_scores)) else 0
        test = metric_value(confusions[best, rest].sum(0), metric, empty)
        results.append(FoldResult(f, val, best, float(val_scores[best]), float(test)))
    tests = np.array([r.test_score for r in results])
    names = list(checkpoint_names) if checkpoint_names is not None else [str(i) for i in range(n_ckpt)]
    return FoldPlan(plan, results, float(tests.mean()), float(tests.std()), metric, seed,
                    checkpoint_names=names)


def confusion_stack(models, images, gts, num_classes: int) -> np.ndarray:
    """Per-model, per-image confusion matrices. ``models`` are callables or objects with ``predict``."""
    out = np.zeros((len(models), len(images), num_classes, num_classes), dtype=np.int64)
    for m, model in enumerate(models):
        preds = model.predict(images) if hasattr(model, "predict") else [model(x) for x in images]
        for i, (p, g) in enumerate(zip(preds, gts)):
            out[m, i] = confusion(p, g, num_classes)
    return out


def evaluate_models(models, dataset, metric: str = "miou", folds: int = 5, seed: int = 0,
                    names=None, empty: str = "exclude") -> tuple[FoldPlan, IoUReport]:
    """Cross-validated score plus a whole-set report for the most-often chosen model."""
    confs = confusion_stack(models, dataset.images, dataset.masks, dataset.schema.num_classes)
    plan = cross_validate(confs, metric, folds, seed, names, empty)
    chosen = np.bincount([r.chosen for r in plan.results], minlength=len(models)).argmax()
    return plan, scores_from_confusion(confs[chosen].sum(0), empty)


@dataclass(frozen=True)
class ShiftProbe:
    dx: int
    dy: int
    fill: str = "edge"

    def validate(self, height: int, width: int) -> None:
        if abs(self.dx) >= width or abs(self.dy) >= height:
            raise ValueError(f"shift ({self.dx}, {self.dy}) too large for {height}x{width}")
        if self.fill not in ("edge", "zero"):
            raise ValueError(f"unknown fill policy {self.fill!r}")


def shift(arr: np.ndarray, dx: int, dy: int, fill: str = "edge") -> np.ndarray:
    """Translate content by (dx, dy): ``out[y, x] = arr[y - dy, x - dx]``; vacated border filled."""
    h, w = arr.shape[:2]
    ys = np.arange(h) - dy
    xs = np.arange(w) - dx
    out = arr[np.clip(ys, 0, h - 1)][:, np.clip(xs, 0, w - 1)]
    if fill == "zero":
        out = out.copy()
        out[(ys < 0) | (ys >= h)] = 0
        out[:, (xs < 0) | (xs >= w)] = 0
    return out


def overlap_region(h: int, w: int, dx: int, dy: int) -> tuple[slice, slice]:
    """Pixels of the shifted frame whose source lies inside the original image."""
    return slice(max(0, dy), min(h, h + dy)), slice(max(0, dx), min(w, w + dx))


def shift_equivariance_check(model, image: np.ndarray, probe: ShiftProbe) -> float:
    """Fraction of overlap pixels where model(shift(image)) == shift(model(image))."""
    h, w = image.shape[:2]
    probe.validate(h, w)
    base = np.asarray(model(image))
    moved = np.asarray(model(shift(image, probe.dx, probe.dy, probe.fill)))
    expect = shift(base, probe.dx, probe.dy, "edge")
    rs, cs = overlap_region(h, w, probe.dx, probe.dy)
    return float(np.mean(moved[rs, cs] == expect[rs, cs]))
