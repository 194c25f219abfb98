"""Anchor-free detection head mathematics.

Covers distribution-based box decoding, CIoU and distribution focal
regression losses, BCE classification with task-aligned positive-sample
assignment, and greedy per-class NMS. Boxes use the corner convention
(x1, y1, x2, y2) everywhere; the center form appears only inside
decoding.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor

# De-facto defaults of the anchor-free model family; the sources name the
# loss terms but not their weights.
ASSIGN_ALPHA = 0.5
ASSIGN_BETA = 6.0
ASSIGN_TOPK = 10
REG_MAX = 16
LAMBDA_CLS = 0.5
LAMBDA_BOX = 7.5
LAMBDA_DFL = 1.5
NMS_IOU_THRESHOLD = 0.45
CONFIDENCE_FLOOR = 0.25


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box corners: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: BoundingBox


@dataclass
class DistPrediction:
    """Per-cell box-offset distributions plus class logits.

    ``dist_logits``: [H, W, 4, reg_max + 1] (left, top, right, bottom in
    stride units), ``cls_logits``: [H, W, K]. Arrays or tensors.
    """

    dist_logits: Union[np.ndarray, Tensor]
    cls_logits: Union[np.ndarray, Tensor]
    reg_max: int = REG_MAX


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _ciou_terms(px1, py1, px2, py2, tx1, ty1, tx2, ty2):
    """Elementwise CIoU loss of predicted corner tensors against targets.

    Targets are floats or same-shaped arrays, treated as constants.
    """
    eps = 1e-9

    iw = ag.maximum(ag.minimum(px2, tx2) - ag.maximum(px1, tx1), 0.0)
    ih = ag.maximum(ag.minimum(py2, ty2) - ag.maximum(py1, ty1), 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    iou_t = inter / ag.maximum(union, eps)

    c2 = (ag.maximum(px2, tx2) - ag.minimum(px1, tx1)) ** 2 \
        + (ag.maximum(py2, ty2) - ag.minimum(py1, ty1)) ** 2
    rho2 = ((px1 + px2) * 0.5 - 0.5 * (tx1 + tx2)) ** 2 \
        + ((py1 + py2) * 0.5 - 0.5 * (ty1 + ty2)) ** 2

    v = ag.arctan((tx2 - tx1) / (ty2 - ty1 + eps)) - ag.arctan((px2 - px1) / (py2 - py1 + eps))
    v = v * v * (4.0 / math.pi ** 2)
    alpha = v / ((1.0 - iou_t) + v + eps)
    return (1.0 - iou_t) + rho2 / ag.maximum(c2, eps) + alpha * v


def ciou_loss(pred, target: BoundingBox):
    """Complete-IoU loss; differentiable when ``pred`` is a Tensor[4].

    Identical degenerate boxes (zero-area enclosing box) give loss 0.
    Accepts a BoundingBox, an array of corners, or a Tensor[4]; returns
    a scalar Tensor for Tensor input and a float otherwise.
    """
    if isinstance(pred, BoundingBox):
        pred = pred.as_array()
    is_tensor = isinstance(pred, Tensor)
    pred_arr = pred.data if is_tensor else np.asarray(pred, dtype=np.float64)
    if pred_arr.shape != (4,):
        raise ValueError(f"pred must have shape (4,), got {pred_arr.shape}")

    enclose_w = max(pred_arr[2], target.x2) - min(pred_arr[0], target.x1)
    enclose_h = max(pred_arr[3], target.y2) - min(pred_arr[1], target.y1)
    if enclose_w * enclose_h == 0.0 and enclose_w + enclose_h == 0.0:
        return ag.Tensor(0.0) if is_tensor else 0.0

    p = pred if is_tensor else Tensor(pred_arr)
    cols = ag.transpose(ag.reshape(p, (1, 4)))
    px1, py1, px2, py2 = (ag.take_rows(cols, [i]) for i in range(4))
    out = ag.tsum(_ciou_terms(px1, py1, px2, py2,
                              target.x1, target.y1, target.x2, target.y2))
    return out if is_tensor else out.item()


def dfl_loss(dist: Sequence[float], target: float) -> float:
    """Distribution focal loss against a continuous offset target.

    The target is split between its two nearest integer bins; an integer
    target reduces to plain negative log-likelihood of its bin.
    """
    p = np.asarray(dist, dtype=np.float64)
    reg_max = p.shape[-1] - 1
    if not 0.0 <= target <= reg_max:
        raise ValueError(f"target {target} outside [0, {reg_max}]")
    lo = math.floor(target)
    hi = math.ceil(target)
    if lo == hi:
        return float(-np.log(p[lo]))
    return float(-((hi - target) * np.log(p[lo]) + (target - lo) * np.log(p[hi])))


def _grid_centers(h: int, w: int, stride: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _decode_arrays(preds: DistPrediction, stride: int):
    """Flattened (boxes [N,4], class scores [N,K], centers [N,2])."""
    dist = preds.dist_logits.data if isinstance(preds.dist_logits, Tensor) else np.asarray(preds.dist_logits)
    cls = preds.cls_logits.data if isinstance(preds.cls_logits, Tensor) else np.asarray(preds.cls_logits)
    h, w = dist.shape[:2]
    bins = np.arange(preds.reg_max + 1, dtype=np.float64)
    offsets = (_softmax_np(dist.reshape(h * w, 4, -1)) * bins).sum(axis=-1)
    centers = _grid_centers(h, w, stride)
    boxes = np.stack([
        centers[:, 0] - offsets[:, 0] * stride,
        centers[:, 1] - offsets[:, 1] * stride,
        centers[:, 0] + offsets[:, 2] * stride,
        centers[:, 1] + offsets[:, 3] * stride,
    ], axis=1)
    scores = _sigmoid_np(cls.reshape(h * w, -1))
    return boxes, scores, centers


def decode_boxes(preds: DistPrediction, stride: int) -> list[tuple[BoundingBox, np.ndarray]]:
    """Decode a prediction grid to per-cell (box, class-score) pairs.

    Offsets are the expectation over softmaxed bins; corners are the cell
    center plus/minus offsets in stride units; scores are sigmoids.
    """
    boxes, scores, _ = _decode_arrays(preds, stride)
    return [(BoundingBox(*map(float, row)), scores[i]) for i, row in enumerate(boxes)]


def task_aligned_assign(boxes: np.ndarray, class_probs: np.ndarray, centers: np.ndarray,
                        gts: Sequence[GroundTruthBox], alpha: float = ASSIGN_ALPHA,
                        beta: float = ASSIGN_BETA, topk: int = ASSIGN_TOPK) -> dict[int, list[int]]:
    """Select positive cells per ground truth by alignment s^alpha * u^beta.

    Candidates are cells whose centers fall strictly inside the gt box;
    each gt keeps its top-k by alignment, and a cell wanted by several
    gts goes to the one where its alignment is highest (ties: lower cell
    index within a gt, lower gt index across gts).
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if topk < 1:
        raise ValueError("topk must be >= 1")
    metric, _ = _alignment_tables(boxes, class_probs, centers, gts, alpha, beta)
    claims: dict[int, tuple[float, int]] = {}
    for j in range(len(gts)):
        order = sorted(np.flatnonzero(metric[j] > 0.0), key=lambda i: (-metric[j, i], i))
        for i in order[:topk]:
            best = claims.get(i)
            if best is None or metric[j, i] > best[0]:
                claims[i] = (metric[j, i], j)
    out: dict[int, list[int]] = {j: [] for j in range(len(gts))}
    for cell, (_, j) in claims.items():
        out[j].append(cell)
    return {j: sorted(cells) for j, cells in out.items()}


def _alignment_tables(boxes, class_probs, centers, gts, alpha, beta):
    """Alignment metric and IoU per (gt, cell); zero outside the gt box."""
    n = boxes.shape[0]
    metric = np.zeros((len(gts), n))
    ious = np.zeros((len(gts), n))
    for j, gt in enumerate(gts):
        inside = ((centers[:, 0] > gt.box.x1) & (centers[:, 0] < gt.box.x2)
                  & (centers[:, 1] > gt.box.y1) & (centers[:, 1] < gt.box.y2))
        for i in np.flatnonzero(inside):
            u = iou(BoundingBox(*boxes[i]), gt.box)
            s = class_probs[i, gt.class_id]
            ious[j, i] = u
            metric[j, i] = s ** alpha * u ** beta
    return metric, ious


@dataclass
class DetectionTargets:
    """Frozen training targets for one prediction grid.

    Built from detached decoded predictions; the loss treats every field
    as a constant so its gradient flows only through the logits.
    """

    cls_target: np.ndarray        # [H*W, K] alignment-normalized scores
    positives: list[int]          # flattened cell indices, grouped by gt
    pos_gt: list[int]             # gt index per positive
    gt_corners: np.ndarray        # [P, 4] target corners per positive
    dfl_weights: np.ndarray       # [P, 4, reg_max+1] two-bin target weights


def build_targets(preds: DistPrediction, gts: Sequence[GroundTruthBox], stride: int,
                  alpha: float = ASSIGN_ALPHA, beta: float = ASSIGN_BETA,
                  topk: int = ASSIGN_TOPK) -> DetectionTargets:
    """Assign positives and derive per-cell targets (all detached).

    Classification targets are the alignment metric rescaled per gt so
    its maximum equals the best IoU; box and bin targets come from the
    gt corners relative to each positive cell center.
    """
    dist = preds.dist_logits.data if isinstance(preds.dist_logits, Tensor) else np.asarray(preds.dist_logits)
    cls = preds.cls_logits.data if isinstance(preds.cls_logits, Tensor) else np.asarray(preds.cls_logits)
    h, w, _, nbins = dist.shape
    k = cls.shape[-1]
    reg_max = nbins - 1

    boxes, scores, centers = _decode_arrays(preds, stride)
    metric, ious = _alignment_tables(boxes, scores, centers, gts, alpha, beta)
    assignment = task_aligned_assign(boxes, scores, centers, gts, alpha, beta, topk)

    cls_target = np.zeros((h * w, k))
    positives: list[int] = []
    pos_gt: list[int] = []
    for j in sorted(assignment):
        cells = assignment[j]
        if not cells:
            continue
        t_max = metric[j].max()
        u_max = ious[j].max()
        for i in cells:
            norm = metric[j, i] * u_max / t_max if t_max > 0 else 0.0
            cls_target[i, gts[j].class_id] = norm
            positives.append(i)
            pos_gt.append(j)

    gt_corners = (np.stack([gts[j].box.as_array() for j in pos_gt])
                  if positives else np.zeros((0, 4)))
    dfl_weights = np.zeros((len(positives), 4, nbins))
    for p, (i, j) in enumerate(zip(positives, pos_gt)):
        gt_box = gts[j].box
        cx, cy = centers[i]
        sides = np.clip(np.array([
            (cx - gt_box.x1) / stride,
            (cy - gt_box.y1) / stride,
            (gt_box.x2 - cx) / stride,
            (gt_box.y2 - cy) / stride,
        ]), 0.0, reg_max)
        for side, t in enumerate(sides):
            lo, hi = math.floor(t), math.ceil(t)
            if lo == hi:
                dfl_weights[p, side, lo] = 1.0
            else:
                dfl_weights[p, side, lo] = hi - t
                dfl_weights[p, side, hi] = t - lo
    return DetectionTargets(cls_target, positives, pos_gt, gt_corners, dfl_weights)


def detection_loss_from_targets(preds: DistPrediction, targets: DetectionTargets, stride: int,
                                weights: tuple[float, float, float] = (LAMBDA_CLS, LAMBDA_BOX, LAMBDA_DFL),
                                ) -> tuple[Tensor, dict[str, float]]:
    """Weighted BCE + CIoU + DFL given frozen targets.

    Smooth in the logits, so it admits a finite-difference gradient
    check. Regression terms average over positives and vanish when
    nothing matched; classification covers every cell regardless.
    """
    lam_cls, lam_box, lam_dfl = weights
    dist_t = preds.dist_logits if isinstance(preds.dist_logits, Tensor) else Tensor(preds.dist_logits)
    cls_t = preds.cls_logits if isinstance(preds.cls_logits, Tensor) else Tensor(preds.cls_logits)
    h, w, _, nbins = dist_t.shape
    k = cls_t.shape[-1]
    n_cells = h * w
    positives = targets.positives

    cls_probs = ag.sigmoid(ag.reshape(cls_t, (n_cells, k)))
    cls_loss = ag.bce_loss(cls_probs, targets.cls_target)

    if positives:
        centers = _grid_centers(h, w, stride)
        rows = ag.take_rows(ag.reshape(dist_t, (n_cells, 4, nbins)), positives)
        bins = np.arange(nbins, dtype=np.float64)
        offsets = ag.tsum(ag.softmax(rows, axis=-1) * bins, axis=-1)  # [P, 4]
        cols = ag.transpose(offsets)
        off_l, off_t, off_r, off_b = (ag.take_rows(cols, [i]) for i in range(4))
        cx = centers[positives, 0]
        cy = centers[positives, 1]
        gt = targets.gt_corners
        box_loss = ag.tsum(_ciou_terms(
            cx - off_l * stride, cy - off_t * stride,
            cx + off_r * stride, cy + off_b * stride,
            gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3],
        )) / len(positives)

        logp = ag.log_softmax(rows, axis=-1)
        dfl = ag.neg(ag.tsum(logp * targets.dfl_weights)) / (len(positives) * 4)
    else:
        box_loss = Tensor(0.0)
        dfl = Tensor(0.0)

    total = cls_loss * lam_cls + box_loss * lam_box + dfl * lam_dfl
    components = {
        "cls": float(cls_loss.data),
        "box": float(box_loss.data),
        "dfl": float(dfl.data),
        "total": float(total.data),
    }
    return total, components


def detection_loss(preds: DistPrediction, gts: Sequence[GroundTruthBox], stride: int,
                   weights: tuple[float, float, float] = (LAMBDA_CLS, LAMBDA_BOX, LAMBDA_DFL),
                   alpha: float = ASSIGN_ALPHA, beta: float = ASSIGN_BETA,
                   topk: int = ASSIGN_TOPK) -> tuple[Tensor, dict[str, float]]:
    """Weighted BCE + CIoU + DFL over a prediction grid.

    Targets are rebuilt from the current (detached) predictions each
    call; gradients flow only through the logits.
    """
    targets = build_targets(preds, gts, stride, alpha, beta, topk)
    return detection_loss_from_targets(preds, targets, stride, weights)


def predictions_to_detections(preds: DistPrediction, stride: int,
                              confidence_floor: float = CONFIDENCE_FLOOR,
                              iou_threshold: float = NMS_IOU_THRESHOLD) -> list[Detection]:
    """Decode a grid, keep each cell's best class above the floor, run NMS."""
    candidates: list[Detection] = []
    for box, scores in decode_boxes(preds, stride):
        class_id = int(np.argmax(scores))
        conf = float(scores[class_id])
        if conf >= confidence_floor:
            candidates.append(Detection(box, class_id, conf))
    return nms(candidates, iou_threshold)


def nms(dets: Sequence[Detection], iou_threshold: float = NMS_IOU_THRESHOLD) -> list[Detection]:
    """Greedy per-class suppression, stable by (confidence desc, input index)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        suppressed = any(
            dets[j].class_id == dets[i].class_id and iou(dets[j].box, dets[i].box) > iou_threshold
            for j in kept
        )
        if not suppressed:
            kept.append(i)
    return [dets[i] for i in kept]


DETECTION_CSV_FIELDS = ["image_id", "class_id", "x1", "y1", "x2", "y2", "confidence"]


def write_detections_csv(path: Union[str, Path], rows: Sequence[tuple[str, Detection]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_CSV_FIELDS)
        for image_id, det in rows:
            writer.writerow([image_id, det.class_id, det.box.x1, det.box.y1,
                             det.box.x2, det.box.y2, det.confidence])


def read_detections_csv(path: Union[str, Path]) -> list[tuple[str, Detection]]:
    out: list[tuple[str, Detection]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTION_CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            box = BoundingBox(float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
            out.append((row["image_id"], Detection(box, int(row["class_id"]), float(row["confidence"]))))
    return out
