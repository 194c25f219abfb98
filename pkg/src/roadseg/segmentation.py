"""Mask-classification segmentation: losses, matching, toy model, inference.

Two loss families: a per-pixel cross-entropy baseline over dense label
maps, and a set-based loss that matches N predicted (class, soft mask)
segments to ground-truth segments with a Hungarian assignment. The toy
model is three stages: a small conv encoder/decoder for per-pixel
embeddings, one cross-attention block where learnable queries read the
coarse feature map, and MLP heads producing class distributions and mask
embeddings whose dot with pixel embeddings yields sigmoid masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Model, Tape, Tensor, adam_step, backward
from .errors import ConfigError
from .metrics import BACKGROUND_LABEL, mean_accuracy, mean_iou

NO_OBJECT_WEIGHT = 0.1
BACKGROUND_THRESHOLD = 0.5
DEFAULT_QUERIES = 20
DEFAULT_EMBED_DIM = 64
DEFAULT_STRIDE = 4


@dataclass
class SegmentationPrediction:
    """N predicted segments: class distributions and soft masks.

    ``class_probs``: [N, K+1] rows summing to 1, the last column being
    the no-object class. ``masks``: [N, H, W] in [0, 1]. Arrays or
    tensors; arrays are validated on construction.
    """

    class_probs: Union[np.ndarray, Tensor]
    masks: Union[np.ndarray, Tensor]

    def __post_init__(self):
        if isinstance(self.class_probs, Tensor) or isinstance(self.masks, Tensor):
            return
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        sums = self.class_probs.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("class distributions must sum to 1")
        if self.masks.min() < 0.0 or self.masks.max() > 1.0:
            raise ValueError("masks must lie in [0, 1]")

    @property
    def n_segments(self) -> int:
        return self.class_probs.shape[0]


@dataclass
class GroundTruthSegments:
    """Ground truth as (class id, binary mask) pairs; may be empty."""

    classes: list[int]
    masks: np.ndarray  # [G, H, W] binary

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if len(self.classes) != self.masks.shape[0]:
            raise ValueError(f"{len(self.classes)} classes for {self.masks.shape[0]} masks")
        if self.masks.size and not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("ground-truth masks must be binary")

    def __len__(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class Assignment:
    """Injective map from ground-truth index j to prediction index sigma[j]."""

    sigma: tuple[int, ...]
    total_cost: float

    def __post_init__(self):
        if len(set(self.sigma)) != len(self.sigma):
            raise ValueError(f"assignment not injective: {self.sigma}")


def per_pixel_ce(probs, gt: np.ndarray):
    """Sum over pixels of -ln(probability of the true class).

    ``probs`` is [K, H, W] of per-pixel distributions; ``gt`` is [H, W]
    integer ids. No clamping: a zero probability at the true class
    yields inf, and exact one-hot correct predictions yield exactly 0.
    """
    is_tensor = isinstance(probs, Tensor)
    arr = probs.data if is_tensor else np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt)
    k, h, w = arr.shape
    if gt.shape != (h, w):
        raise ValueError(f"gt shape {gt.shape} does not match probs {arr.shape}")
    if gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"gt ids must lie in [0, {k}), got range [{gt.min()}, {gt.max()}]")
    onehot = np.zeros((h * w, k))
    onehot[np.arange(h * w), gt.ravel()] = 1.0
    if not is_tensor:
        with np.errstate(divide="ignore"):
            logs = np.log(arr.reshape(k, h * w).T[onehot.astype(bool)])
        return float(-logs.sum())
    flat = ag.transpose(ag.reshape(probs, (k, h * w)))  # [HW, K]
    picked = ag.tsum(flat * onehot, axis=1)  # gather before log: zeros elsewhere stay inert
    return ag.neg(ag.tsum(ag.log(picked)))


def per_pixel_ce_mean(probs, gt: np.ndarray):
    """Per-pixel cross-entropy averaged over pixels (trainer scaling)."""
    n = np.asarray(gt).size
    total = per_pixel_ce(probs, gt)
    return total / n if isinstance(total, Tensor) else total / n


def binary_mask_loss(pred, gt: np.ndarray, lambda_bce: float = 1.0, lambda_dice: float = 1.0):
    """BCE plus soft-dice distance between a soft mask and a binary one.

    Dice uses the elementwise product as soft intersection; when both
    masks are entirely empty the dice term is 0 by convention.
    """
    is_tensor = isinstance(pred, Tensor)
    pred_arr = pred.data if is_tensor else np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_arr.shape != gt.shape:
        raise ValueError(f"mask shapes disagree: {pred_arr.shape} vs {gt.shape}")

    p = pred if is_tensor else Tensor(pred_arr)
    bce = ag.bce_loss(p, gt)
    denom = pred_arr.sum() + gt.sum()
    if denom == 0.0:
        dice = Tensor(0.0)
    else:
        dice = 1.0 - 2.0 * ag.tsum(p * gt) / (ag.tsum(p) + gt.sum())
    out = bce * lambda_bce + dice * lambda_dice
    return out if is_tensor else float(out.data)


def _square_assign(cost: np.ndarray) -> list[int]:
    """Optimal column per row of a square cost matrix (potentials method)."""
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[col] = row occupying col; 0 = free
    for row in range(1, n + 1):
        match[0] = row
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        way = [0] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = [0] * n
    for j in range(1, n + 1):
        if match[j] > 0:
            out[match[j] - 1] = j - 1
    return out


def _optimal_cost(cost: np.ndarray) -> float:
    """Minimal total over injective row-to-column maps (rows <= columns)."""
    g, n = cost.shape
    if g == 0:
        return 0.0
    padded = np.zeros((n, n))
    padded[:g] = cost
    cols = _square_assign(padded)
    return float(sum(cost[j, cols[j]] for j in range(g)))


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimal-cost injective assignment of rows to columns.

    Among equally cheap assignments the lexicographically smallest
    sigma wins, fixed row by row against the optimal completion cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    g, n = cost.shape
    if g > n:
        raise ValueError(f"more rows than columns: {g} > {n}")
    if cost.size and not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if g == 0:
        return Assignment((), 0.0)

    total = _optimal_cost(cost)
    eps = 1e-9 * max(1.0, abs(total))
    chosen: list[int] = []
    free = list(range(n))
    prefix = 0.0
    for j in range(g):
        for idx, cand in enumerate(free):
            rest = _optimal_cost(cost[np.ix_(range(j + 1, g), [c for c in free if c != cand])]) \
                if j + 1 < g else 0.0
            if prefix + cost[j, cand] + rest <= total + eps:
                prefix += cost[j, cand]
                chosen.append(cand)
                free.pop(idx)
                break
        else:
            raise AssertionError("no consistent completion found")
    return Assignment(tuple(chosen), total)


def mask_cls_loss(z: SegmentationPrediction, z_gt: GroundTruthSegments,
                  no_object_weight: float = NO_OBJECT_WEIGHT,
                  lambda_bce: float = 1.0, lambda_dice: float = 1.0,
                  ) -> tuple[Union[Tensor, float], Assignment]:
    """Set loss over matched (class, mask) pairs plus a no-object term.

    The match minimizes -p_i(c_j) + mask loss (probabilities, not logs,
    keep the costs bounded); the loss then charges -ln p at the matched
    entries, the mask loss where a real class is present, and a
    down-weighted -ln p(no-object) at every unmatched prediction.
    """
    is_tensor = isinstance(z.class_probs, Tensor)
    probs_t = z.class_probs if is_tensor else Tensor(np.asarray(z.class_probs, dtype=np.float64))
    masks_t = z.masks if isinstance(z.masks, Tensor) else Tensor(np.asarray(z.masks, dtype=np.float64))
    probs = probs_t.data
    n, k_plus = probs.shape
    g = len(z_gt)
    if g > n:
        raise ValueError(f"{g} ground-truth segments exceed {n} predictions")

    mask_losses = np.zeros((g, n))
    cost = np.zeros((g, n))
    for j in range(g):
        for i in range(n):
            mask_losses[j, i] = binary_mask_loss(masks_t.data[i], z_gt.masks[j],
                                                 lambda_bce, lambda_dice)
            cost[j, i] = -probs[i, z_gt.classes[j]] + mask_losses[j, i]
    assign = hungarian_match(cost)

    terms = []
    for j, i in enumerate(assign.sigma):
        p_row = ag.take_rows(probs_t, [i])
        onehot = np.zeros((1, k_plus))
        onehot[0, z_gt.classes[j]] = 1.0
        picked = ag.tsum(p_row * onehot)  # gather before log
        terms.append(ag.neg(ag.log(picked)))
        terms.append(binary_mask_loss(ag.take_rows(masks_t, [i]),
                                      z_gt.masks[j][None], lambda_bce, lambda_dice))
    unmatched = sorted(set(range(n)) - set(assign.sigma))
    if unmatched:
        rows = ag.take_rows(probs_t, unmatched)
        no_obj = np.zeros((len(unmatched), k_plus))
        no_obj[:, -1] = 1.0
        picked = ag.tsum(rows * no_obj, axis=1)
        terms.append(no_object_weight * ag.neg(ag.tsum(ag.log(picked))))
    loss = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        loss = loss + t
    return (loss if is_tensor else float(loss.data)), assign


@dataclass
class MaskFormerConfig:
    num_classes: int
    image_size: tuple[int, int] = (32, 32)
    num_queries: int = DEFAULT_QUERIES
    embed_dim: int = DEFAULT_EMBED_DIM
    stride: int = DEFAULT_STRIDE
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h % self.stride or w % self.stride:
            raise ConfigError(f"image size {self.image_size} not divisible by stride {self.stride}")
        if self.stride != 4:
            raise ConfigError("the two-level conv encoder fixes the stride at 4")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even")


class ToyMaskFormer(Model):
    """Minimal query-based mask predictor over one image at a time."""

    def __init__(self, cfg: MaskFormerConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        half = d // 2
        h, w = cfg.image_size
        hl, wl = h // cfg.stride, w // cfg.stride

        def init(name, shape, fan_in):
            self.add_param(name, rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape))

        init("enc1.k", (half, 3, 3, 3), 3 * 9)
        init("enc2.k", (d, half, 3, 3), half * 9)
        init("dec1.k", (d, d, 3, 3), d * 9)
        init("dec2.k", (d, d, 3, 3), d * 9)
        init("queries", (cfg.num_queries, d), d)
        init("pos_embed", (hl * wl, d), d)
        init("attn.wq", (d, d), d)
        init("attn.wk", (d, d), d)
        init("attn.wv", (d, d), d)
        init("mlp.w1", (d, d), d)
        init("mlp.w2", (d, d), d)
        init("mlp.w3", (d, d), d)
        for name in ("mlp.b1", "mlp.b2", "mlp.b3"):
            self.add_param(name, np.zeros(d))
        init("cls.w", (d, cfg.num_classes + 1), d)
        self.add_param("cls.b", np.zeros(cfg.num_classes + 1))

    def forward(self, image: np.ndarray) -> SegmentationPrediction:
        """image [3, H, W] in [0, 1] -> (class probs [N, K+1], masks [N, H, W])."""
        cfg = self.cfg
        h, w = cfg.image_size
        if image.shape != (3, h, w):
            raise ag.ShapeError(f"expected image shape {(3, h, w)}, got {image.shape}")
        p = self.params
        x = Tensor(np.asarray(image, dtype=np.float64)[None])  # [1, 3, H, W]

        # pixel-level module: two stride-2 convs down, two up
        f = ag.relu(ag.conv2d(x, p["enc1.k"], stride=2, padding=1))
        f = ag.relu(ag.conv2d(f, p["enc2.k"], stride=2, padding=1))  # [1, D, H/4, W/4]
        e = ag.relu(ag.conv2d(ag.upsample2d_nearest(f, 2), p["dec1.k"], padding=1))
        e = ag.conv2d(ag.upsample2d_nearest(e, 2), p["dec2.k"], padding=1)  # [1, D, H, W]

        # transformer module: queries cross-attend the coarse features
        d = cfg.embed_dim
        hl, wl = h // cfg.stride, w // cfg.stride
        feats = ag.transpose(ag.reshape(f, (d, hl * wl)))  # [L, D]
        feats = feats + p["pos_embed"]
        q = ag.matmul(p["queries"], p["attn.wq"])
        keys = ag.matmul(feats, p["attn.wk"])
        values = ag.matmul(feats, p["attn.wv"])
        attn = ag.softmax(ag.matmul(q, ag.transpose(keys)) * (1.0 / math.sqrt(d)), axis=-1)
        segs = ag.matmul(attn, values) + p["queries"]  # [N, D]

        # segmentation module: class head and mask-embedding MLP
        cls = ag.softmax(ag.dense(segs, p["cls.w"], p["cls.b"]), axis=-1)
        m = ag.relu(ag.dense(segs, p["mlp.w1"], p["mlp.b1"]))
        m = ag.relu(ag.dense(m, p["mlp.w2"], p["mlp.b2"]))
        mask_embed = ag.dense(m, p["mlp.w3"], p["mlp.b3"])  # [N, D]
        pixel = ag.reshape(e, (d, h * w))
        masks = ag.sigmoid(ag.matmul(mask_embed, pixel))
        return SegmentationPrediction(cls, ag.reshape(masks, (cfg.num_queries, h, w)))


def build_toy_maskformer(cfg: MaskFormerConfig) -> ToyMaskFormer:
    return ToyMaskFormer(cfg)


def semantic_inference(z: SegmentationPrediction,
                       threshold: float = BACKGROUND_THRESHOLD) -> np.ndarray:
    """Per-pixel class ids; pixels whose best score is weak go background.

    score(k)[h, w] = sum_i p_i(k) * m_i[h, w] over the K real classes;
    the no-object column only competes by leaving scores low.
    """
    probs = z.class_probs.data if isinstance(z.class_probs, Tensor) else np.asarray(z.class_probs)
    masks = z.masks.data if isinstance(z.masks, Tensor) else np.asarray(z.masks)
    k = probs.shape[1] - 1
    scores = np.einsum("nk,nhw->khw", probs[:, :k], masks)
    labels = scores.argmax(axis=0).astype(np.int64)
    labels[scores.max(axis=0) < threshold] = BACKGROUND_LABEL
    return labels


def segments_to_labels(gt: GroundTruthSegments, shape: tuple[int, int]) -> np.ndarray:
    """Paint segments into a label map; later segments overwrite earlier."""
    labels = np.full(shape, BACKGROUND_LABEL, dtype=np.int64)
    for class_id, mask in zip(gt.classes, gt.masks):
        labels[mask.astype(bool)] = class_id
    return labels


@dataclass
class SegTrainConfig:
    num_classes: int
    image_size: tuple[int, int] = (32, 32)
    epochs: int = 35
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    num_queries: int = DEFAULT_QUERIES
    embed_dim: int = DEFAULT_EMBED_DIM
    stride: int = DEFAULT_STRIDE
    seed: int = 0
    no_object_weight: float = NO_OBJECT_WEIGHT


@dataclass
class SegEpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    miou: float
    mean_acc: float


SEG_LOG_FIELDS = ["epoch", "train_loss", "val_loss", "mIoU", "mean_acc"]


def write_seg_log(path: Union[str, Path], rows: Sequence[SegEpochStats]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEG_LOG_FIELDS)
        for r in rows:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             repr(r.miou), repr(r.mean_acc)])


def evaluate_seg(model: ToyMaskFormer, dataset: Sequence[tuple[np.ndarray, GroundTruthSegments]],
                 no_object_weight: float = NO_OBJECT_WEIGHT) -> tuple[float, float, float]:
    """Mean loss, mIoU, and mean accuracy over a dataset (no gradients)."""
    losses = []
    ious = []
    accs = []
    k = model.cfg.num_classes
    for image, gt in dataset:
        pred = model.forward(image)
        loss, _ = mask_cls_loss(pred, gt, no_object_weight)
        losses.append(float(loss.data))
        labels = semantic_inference(pred)
        gt_labels = segments_to_labels(gt, model.cfg.image_size)
        _, miou = mean_iou(labels, gt_labels, k)
        _, macc = mean_accuracy(labels, gt_labels, k)
        ious.append(miou)
        accs.append(macc)
    return (float(np.mean(losses)),
            float(np.nanmean(ious)) if ious else float("nan"),
            float(np.nanmean(accs)) if accs else float("nan"))


def train_seg(train_set: Sequence[tuple[np.ndarray, GroundTruthSegments]],
              cfg: SegTrainConfig,
              val_set: Optional[Sequence[tuple[np.ndarray, GroundTruthSegments]]] = None,
              checkpoint_dir: Optional[Union[str, Path]] = None,
              ) -> tuple[ToyMaskFormer, list[SegEpochStats], int]:
    """Adam training of the toy model on (image, segments) pairs.

    One epoch is one pass in a seeded shuffled order. The model with the
    lowest validation loss is kept (training loss when no validation set
    is given) and restored before returning; the best epoch index comes
    back with the log. With ``checkpoint_dir`` set, the best epoch's
    parameters are saved to ``best.ckpt`` as they occur.
    """
    if not train_set:
        raise ValueError("training set is empty")
    model = build_toy_maskformer(MaskFormerConfig(
        cfg.num_classes, cfg.image_size, cfg.num_queries, cfg.embed_dim,
        cfg.stride, cfg.seed))
    state = AdamState(lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed + 1)
    eval_set = val_set if val_set else train_set

    log: list[SegEpochStats] = []
    best_epoch = -1
    best_loss = float("inf")
    best_params: Optional[dict[str, np.ndarray]] = None
    ckpt_path = Path(checkpoint_dir) / "best.ckpt" if checkpoint_dir else None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for idx in order:
            image, gt = train_set[idx]
            with Tape():
                pred = model.forward(image)
                loss, _ = mask_cls_loss(pred, gt, cfg.no_object_weight)
                backward(loss)
            epoch_losses.append(float(loss.data))
            new_params, state = adam_step(model.params, model.grads(), state)
            model.replace_params(new_params)
        train_loss = float(np.mean(epoch_losses))
        val_loss, miou, macc = evaluate_seg(model, eval_set, cfg.no_object_weight)
        log.append(SegEpochStats(epoch, train_loss, val_loss, miou, macc))
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = {k: v.data.copy() for k, v in model.params.items()}
            if ckpt_path:
                model.save(ckpt_path)

    if best_params is not None:
        model.replace_params({k: Tensor(v, requires_grad=True) for k, v in best_params.items()})
    return model, log, best_epoch


_SYNTH_COLORS = np.array([
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
])


def synthetic_seg_dataset(n: int, image_size: tuple[int, int] = (32, 32),
                          num_classes: int = 4, seed: int = 0,
                          ) -> list[tuple[np.ndarray, GroundTruthSegments]]:
    """Toy scenes for overfit runs: colored rectangles on a gray field.

    Each image holds one or two axis-aligned rectangles, each confined
    to its own quadrant so segments never overlap, painted in a fixed
    per-class color. The pixels alone determine the labels, which is
    what makes a small model able to reach high IoU quickly.
    """
    if not 1 <= num_classes <= len(_SYNTH_COLORS):
        raise ConfigError(f"num_classes must lie in 1..{len(_SYNTH_COLORS)}")
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    h, w = image_size
    rng = np.random.default_rng(seed)
    out = []
    quads = [(0, 0), (0, w // 2), (h // 2, 0), (h // 2, w // 2)]
    qh, qw = h // 2, w // 2
    for _ in range(n):
        img = np.full((3, h, w), 0.5) + rng.normal(0, 0.02, (3, h, w))
        order = rng.permutation(4)
        count = int(rng.integers(1, 3))
        classes, masks = [], []
        for q in order[:count]:
            qy, qx = quads[q]
            bh = int(rng.integers(qh // 2, qh - 1))
            bw = int(rng.integers(qw // 2, qw - 1))
            y0 = qy + int(rng.integers(0, qh - bh))
            x0 = qx + int(rng.integers(0, qw - bw))
            c = int(rng.integers(0, num_classes))
            mask = np.zeros((h, w))
            mask[y0:y0 + bh, x0:x0 + bw] = 1.0
            img[:, y0:y0 + bh, x0:x0 + bw] = _SYNTH_COLORS[c][:, None, None]
            classes.append(c)
            masks.append(mask)
        out.append((np.clip(img, 0.0, 1.0),
                    GroundTruthSegments(classes, np.array(masks))))
    return out
