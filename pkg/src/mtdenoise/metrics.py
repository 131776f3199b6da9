"""Per-task evaluation metrics and the signed multi-task performance aggregate.

All functions are pure and operate on numpy arrays. Spatially structured
metrics expect ``(H, W)`` maps (normals ``(H, W, 3)``, channel last). For
dataset-level evaluation the aggregator classes reduce per-image counts, so
partial results can be merged in any order.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .tasks import IGNORE_INDEX

# fixed threshold grid shared by maxF and odsF: 51 uniform levels in [0, 1].
# A pixel counts as positive when its probability is strictly greater than
# the threshold, so an all-wrong prediction scores 0 even at threshold 0.
F_THRESHOLDS = np.linspace(0.0, 1.0, 51)


@dataclass
class MetricReport:
    """Per-task scalar metrics, optionally with the aggregate delta_m (percent)."""

    per_task: dict[str, float] = field(default_factory=dict)
    delta_m: float | None = None


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


class ConfusionAccumulator:
    """Running confusion matrix for IoU-style metrics."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> None:
        pred = np.asarray(pred_labels)
        gt = np.asarray(gt_labels)
        _check_same_shape(pred, gt, "miou")
        valid = gt != self.ignore_index
        if not valid.any():
            raise ValueError("no valid pixels: ground truth is entirely ignore_index")
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.min() < 0 or p.max() >= self.num_classes:
            raise ValueError(f"prediction labels outside [0, {self.num_classes})")
        if g.min() < 0 or g.max() >= self.num_classes:
            raise ValueError(f"ground-truth labels outside [0, {self.num_classes}) and not ignore_index")
        idx = g * self.num_classes + p
        self.matrix += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def result(self) -> float:
        gt_counts = self.matrix.sum(axis=1)
        present = gt_counts > 0
        if not present.any():
            raise ValueError("no valid pixels accumulated")
        inter = np.diag(self.matrix).astype(np.float64)
        union = gt_counts + self.matrix.sum(axis=0) - np.diag(self.matrix)
        iou = inter[present] / union[present].astype(np.float64)
        return float(iou.mean())


def compute_miou(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> float:
    """Mean IoU over classes present in the ground truth.

    Pixels whose ground truth equals ``ignore_index`` are excluded from both
    intersection and union.
    """
    acc = ConfusionAccumulator(num_classes, ignore_index)
    acc.update(pred_labels, gt_labels)
    return acc.result()


class MaskedMeanAccumulator:
    """Sum / count reduction of per-pixel values under a validity mask."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, values: np.ndarray, mask: np.ndarray) -> None:
        m = np.asarray(mask, dtype=bool)
        self.total += float(np.asarray(values)[m].sum())
        self.count += int(m.sum())

    def result(self) -> float:
        if self.count == 0:
            raise ValueError("empty validity mask: no pixels to average")
        return self.total / self.count


def compute_abs_err(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean absolute difference over the valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt, "absErr")
    _check_same_shape(pred, np.asarray(valid_mask), "absErr mask")
    acc = MaskedMeanAccumulator()
    acc.add(np.abs(pred - gt), valid_mask)
    return acc.result()


def angle_error_map(pred_normals: np.ndarray, gt_normals: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Per-pixel angle between normal fields, in degrees. Inputs are
    re-normalized per pixel; a zero-norm vector under the mask is an error."""
    p = np.asarray(pred_normals, dtype=np.float64)
    g = np.asarray(gt_normals, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValueError(f"normal maps must share an (H, W, 3) shape, got {p.shape} vs {g.shape}")
    mask = np.asarray(valid_mask, dtype=bool)
    _check_same_shape(mask, p[..., 0], "mErr mask")
    pn = np.linalg.norm(p, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    if (pn[mask] == 0).any() or (gn[mask] == 0).any():
        raise ValueError("zero-norm normal vector inside the validity mask")
    dot = (p * g).sum(axis=-1) / np.where(pn * gn == 0, 1.0, pn * gn)
    return np.degrees(np.arccos(np.clip(dot, -1.0, 1.0)))


def compute_mean_angle_err(
    pred_normals: np.ndarray, gt_normals: np.ndarray, valid_mask: np.ndarray
) -> float:
    """Mean angular error in degrees between predicted and true normals."""
    err = angle_error_map(pred_normals, gt_normals, valid_mask)
    acc = MaskedMeanAccumulator()
    acc.add(err, valid_mask)
    return acc.result()


class BinaryFAccumulator:
    """TP/FP/FN counts per threshold, reduced over images; yields maximal F."""

    def __init__(self, thresholds: np.ndarray = F_THRESHOLDS):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.tp = np.zeros(len(self.thresholds), dtype=np.int64)
        self.fp = np.zeros_like(self.tp)
        self.fn = np.zeros_like(self.tp)
        self.gt_seen = False

    def update(self, pred_prob: np.ndarray, gt_binary: np.ndarray) -> None:
        prob = np.asarray(pred_prob, dtype=np.float64)
        gt = np.asarray(gt_binary).astype(bool)
        _check_same_shape(prob, gt, "maxF")
        if prob.min() < 0 or prob.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        self.gt_seen = self.gt_seen or gt.any()
        # positive := prob strictly above threshold
        pos = prob[None, ...] > self.thresholds.reshape((-1,) + (1,) * prob.ndim)
        g = gt[None, ...]
        axes = tuple(range(1, pos.ndim))
        self.tp += (pos & g).sum(axis=axes)
        self.fp += (pos & ~g).sum(axis=axes)
        self.fn += (~pos & g).sum(axis=axes)

    def f_curve(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            precision = np.where(self.tp + self.fp > 0, self.tp / (self.tp + self.fp), 0.0)
            recall = np.where(self.tp + self.fn > 0, self.tp / (self.tp + self.fn), 0.0)
            f = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        return f

    def result(self) -> float:
        if not self.gt_seen:
            warnings.warn("maxF: ground truth contains no positives, returning 0", RuntimeWarning)
            return 0.0
        return float(self.f_curve().max())


def compute_max_f(pred_prob: np.ndarray, gt_binary: np.ndarray) -> float:
    """Maximal F1 over the fixed threshold grid for one probability map."""
    acc = BinaryFAccumulator()
    acc.update(pred_prob, gt_binary)
    return acc.result()


class OdsFAccumulator:
    """Distance-tolerant boundary counts at each threshold over a dataset.

    A predicted positive counts as matched when a ground-truth positive lies
    within Chebyshev distance ``tolerance_px`` (square dilation), and
    symmetrically for recall. A single threshold is chosen for the whole
    dataset from the summed counts.
    """

    def __init__(self, tolerance_px: int = 1, thresholds: np.ndarray = F_THRESHOLDS):
        if tolerance_px < 0:
            raise ValueError("tolerance_px must be >= 0")
        self.tolerance_px = tolerance_px
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        n = len(self.thresholds)
        self.matched_pred = np.zeros(n, dtype=np.int64)
        self.n_pred = np.zeros(n, dtype=np.int64)
        self.matched_gt = np.zeros(n, dtype=np.int64)
        self.n_gt = 0
        self.images = 0

    def _dilate(self, mask: np.ndarray) -> np.ndarray:
        if self.tolerance_px == 0:
            return mask
        size = 2 * self.tolerance_px + 1
        return maximum_filter(mask.astype(np.uint8), size=size).astype(bool)

    def update(self, pred_prob: np.ndarray, gt_binary: np.ndarray) -> None:
        prob = np.asarray(pred_prob, dtype=np.float64)
        gt = np.asarray(gt_binary).astype(bool)
        _check_same_shape(prob, gt, "odsF")
        gt_dil = self._dilate(gt)
        self.n_gt += int(gt.sum())
        self.images += 1
        for i, tau in enumerate(self.thresholds):
            pos = prob > tau
            self.n_pred[i] += int(pos.sum())
            self.matched_pred[i] += int((pos & gt_dil).sum())
            self.matched_gt[i] += int((gt & self._dilate(pos)).sum())

    def result(self) -> float:
        if self.images == 0:
            raise ValueError("odsF: empty dataset")
        with np.errstate(invalid="ignore", divide="ignore"):
            precision = np.where(self.n_pred > 0, self.matched_pred / self.n_pred, 0.0)
            recall = self.matched_gt / self.n_gt if self.n_gt > 0 else np.zeros_like(precision)
            f = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        return float(f.max())


def compute_ods_f(
    pred_boundary_prob: list[np.ndarray],
    gt_boundary: list[np.ndarray],
    tolerance_px: int = 1,
) -> float:
    """Dataset-level optimal-threshold boundary F with dilation matching."""
    if len(pred_boundary_prob) == 0:
        raise ValueError("odsF: empty dataset")
    if len(pred_boundary_prob) != len(gt_boundary):
        raise ValueError("odsF: prediction / ground-truth count mismatch")
    acc = OdsFAccumulator(tolerance_px)
    for prob, gt in zip(pred_boundary_prob, gt_boundary):
        acc.update(prob, gt)
    return acc.result()


def compute_delta_m(
    mtl_metrics: dict[str, float],
    stl_metrics: dict[str, float],
    lower_is_better: dict[str, bool],
) -> float:
    """Mean signed relative difference (percent) of multi-task metrics against
    single-task references, with the sign flipped for lower-is-better tasks."""
    if set(mtl_metrics) != set(stl_metrics) or set(mtl_metrics) != set(lower_is_better):
        raise ValueError(
            f"task key mismatch: mtl={sorted(mtl_metrics)} stl={sorted(stl_metrics)} "
            f"directions={sorted(lower_is_better)}"
        )
    if not mtl_metrics:
        raise ValueError("delta_m: empty task set")
    total = 0.0
    for name, m in mtl_metrics.items():
        s = stl_metrics[name]
        if s == 0:
            raise ValueError(f"delta_m: single-task value for {name!r} is zero")
        sign = -1.0 if lower_is_better[name] else 1.0
        total += sign * (m - s) / s
    return 100.0 * total / len(mtl_metrics)
