"""Evaluation metrics: detection AP, segmentation IoU/accuracy, confusions.

Detection metrics match each prediction greedily in confidence order;
segmentation metrics are per-pixel counts. A synthetic background index K
closes the books on unmatched items, so the confusion matrix is
(K+1) x (K+1) with background last.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .detection import BoundingBox, Detection, GroundTruthBox, iou

BACKGROUND_LABEL = 255


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes disagree: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mean_iou(pred_labels: np.ndarray, gt_labels: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Per-class IoU of label maps and its mean.

    Classes absent from both maps get NaN and are excluded from the
    mean; the background sentinel never counts as a class of its own.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label map shapes disagree: {pred_labels.shape} vs {gt_labels.shape}")
    per_class = np.full(k, np.nan)
    for c in range(k):
        p = pred_labels == c
        g = gt_labels == c
        union = np.logical_or(p, g).sum()
        if union > 0:
            per_class[c] = np.logical_and(p, g).sum() / union
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def mean_accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Per-class recall (correct fraction of each class's gt pixels).

    The mean runs over classes present in the ground truth; others get
    NaN.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label map shapes disagree: {pred_labels.shape} vs {gt_labels.shape}")
    per_class = np.full(k, np.nan)
    for c in range(k):
        g = gt_labels == c
        if g.any():
            per_class[c] = (pred_labels[g] == c).mean()
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def pixel_accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray) -> float:
    """Global fraction of pixels labeled identically (background included)."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label map shapes disagree: {pred_labels.shape} vs {gt_labels.shape}")
    return float((pred_labels == gt_labels).mean())


def _match_greedy(dets: Sequence[Detection], gts: Sequence[BoundingBox],
                  iou_thr: float) -> list[Optional[int]]:
    """Per detection (confidence desc), the matched gt index or None.

    Each gt matches at most once; a detection takes the unmatched gt of
    highest IoU >= threshold (ties: lower gt index). Result is indexed
    like ``dets``.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    matched: list[Optional[int]] = [None] * len(dets)
    for i in order:
        best_j = None
        best_iou = -1.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            u = iou(dets[i].box, gt)
            if u >= iou_thr and u > best_iou:
                best_iou = u
                best_j = j
        if best_j is not None:
            taken[best_j] = True
            matched[i] = best_j
    return matched


def average_precision(dets: Sequence[Detection], gts: Sequence[BoundingBox],
                      iou_thr: float = 0.5) -> float:
    """All-point interpolated AP for a single class.

    Detections sort by confidence; each greedily claims the unmatched gt
    with highest IoU at or above the threshold. The PR curve is
    integrated under its precision envelope. No gts: 1.0 when there are
    also no detections, else 0.0.
    """
    if not gts:
        return 1.0 if not dets else 0.0
    if not dets:
        return 0.0
    matched = _match_greedy(dets, gts, iou_thr)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    tp = np.array([matched[i] is not None for i in order], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)
    # envelope: best precision at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map50(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], k: int,
          iou_thr: float = 0.5) -> tuple[np.ndarray, float]:
    """Per-class AP and its mean over classes with ground truth.

    Classes without gt instances are NaN and excluded; with no class
    represented at all the mean itself is NaN.
    """
    per_class = np.full(k, np.nan)
    for c in range(k):
        class_gts = [g.box for g in gts if g.class_id == c]
        class_dets = [d for d in dets if d.class_id == c]
        if class_gts:
            per_class[c] = average_precision(class_dets, class_gts, iou_thr)
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def detection_confusion_matrix(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], k: int,
                               iou_thr: float = 0.5, conf_floor: float = 0.25,
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Raw and row-normalized (K+1) x (K+1) confusion counts.

    Rows are true classes, columns predictions, background last.
    Matching is class-agnostic by IoU so cross-class confusion shows up
    off-diagonal; unmatched gts land in the background column and
    unmatched detections in the background row. Detections below the
    confidence floor are dropped up front.
    """
    if not 0.0 < iou_thr < 1.0 or not 0.0 < conf_floor < 1.0:
        raise ValueError("thresholds must lie in (0, 1)")
    kept = [d for d in dets if d.confidence >= conf_floor]
    matched = _match_greedy(kept, [g.box for g in gts], iou_thr)
    raw = np.zeros((k + 1, k + 1), dtype=np.int64)
    for i, d in enumerate(kept):
        j = matched[i]
        if j is None:
            raw[k, d.class_id] += 1
        else:
            raw[gts[j].class_id, d.class_id] += 1
    unmatched_gt = set(range(len(gts))) - {j for j in matched if j is not None}
    for j in unmatched_gt:
        raw[gts[j].class_id, k] += 1
    sums = raw.sum(axis=1, keepdims=True)
    normalized = np.divide(raw, sums, out=np.zeros_like(raw, dtype=np.float64),
                           where=sums > 0)
    return raw, normalized


@dataclass
class EvalReport:
    """Bundle of evaluation results; either half may be absent.

    Detection half: per-class AP, mAP50, confusion matrices. Mask half:
    per-class IoU and recall with their means, plus global pixel
    accuracy.
    """

    class_names: list[str] = field(default_factory=list)
    per_class_ap: Optional[np.ndarray] = None
    map50: Optional[float] = None
    confusion: Optional[np.ndarray] = None
    confusion_normalized: Optional[np.ndarray] = None
    per_class_iou: Optional[np.ndarray] = None
    mean_iou: Optional[float] = None
    per_class_accuracy: Optional[np.ndarray] = None
    mean_accuracy: Optional[float] = None
    pixel_accuracy: Optional[float] = None

    @staticmethod
    def _clean(value):
        if value is None:
            return None
        if isinstance(value, np.ndarray):
            return [EvalReport._clean(v) for v in value.tolist()]
        if isinstance(value, float) and not np.isfinite(value):
            return None
        if isinstance(value, (np.floating, np.integer)):
            return EvalReport._clean(value.item())
        return value

    def to_json(self, path: Union[str, Path]) -> None:
        payload = {
            "class_names": self.class_names,
            "per_class_ap": self._clean(self.per_class_ap),
            "map50": self._clean(self.map50),
            "confusion": self._clean(self.confusion),
            "confusion_normalized": self._clean(self.confusion_normalized),
            "per_class_iou": self._clean(self.per_class_iou),
            "mean_iou": self._clean(self.mean_iou),
            "per_class_accuracy": self._clean(self.per_class_accuracy),
            "mean_accuracy": self._clean(self.mean_accuracy),
            "pixel_accuracy": self._clean(self.pixel_accuracy),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, allow_nan=False)
            fh.write("\n")

    def to_csv(self, path: Union[str, Path]) -> None:
        """Flat per-class rows; empty cells for values not computed."""
        def cell(arr, c):
            if arr is None:
                return ""
            v = arr[c]
            return "" if (isinstance(v, float) and not np.isfinite(v)) else repr(float(v))

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "ap50", "iou", "accuracy"])
            for c, name in enumerate(self.class_names):
                writer.writerow([name, cell(self.per_class_ap, c),
                                 cell(self.per_class_iou, c),
                                 cell(self.per_class_accuracy, c)])
            writer.writerow(["mean",
                             "" if self.map50 is None or not np.isfinite(self.map50) else repr(float(self.map50)),
                             "" if self.mean_iou is None or not np.isfinite(self.mean_iou) else repr(float(self.mean_iou)),
                             "" if self.mean_accuracy is None or not np.isfinite(self.mean_accuracy) else repr(float(self.mean_accuracy))])

    def confusion_to_csv(self, path: Union[str, Path]) -> None:
        if self.confusion is None:
            raise ValueError("report holds no confusion matrix")
        names = list(self.class_names) + ["background"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + names)
            for r, name in enumerate(names):
                writer.writerow([name] + [int(v) for v in self.confusion[r]])
