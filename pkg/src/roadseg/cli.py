"""Command-line front end wiring the modules into one workflow.

`roadseg <subcommand> [flags]` covers dataset statistics, splitting,
offline augmentation, adversarial and segmentation training, and both
evaluation paths. Every run writes its artifacts plus a `run.json`
config snapshot into `--out`; a failed run removes whatever it had
already written. Options may come from a TOML file via `--config`,
with command-line flags taking precedence.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Diagnostics go to stderr as `error: <category>: <message>`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli

from . import __version__
from .autograd import CheckpointError
from .data import (
    AUGMENT_DELTA_LIMIT,
    CROP_ZOOM_LIMIT,
    DatasetManifest,
    ManifestError,
    annotation_heatmap,
    augment_brightness,
    augment_crop_zoom,
    augment_saturation,
    class_histogram,
    dataset_summary,
    heatmap_to_pgm,
    load_image,
    load_manifest,
    load_sample,
    rasterize_polygon,
    read_netpbm,
    save_manifest,
    split_dataset,
    write_histogram_csv,
    write_ppm,
)
from .detection import BoundingBox, Detection, GroundTruthBox, read_detections_csv
from .errors import ConfigError
from .gan import (
    GanConfig,
    build_generator,
    sample,
    sample_grid,
    striped_images,
    train,
    write_gan_log,
)
from .metrics import (
    EvalReport,
    detection_confusion_matrix,
    map50,
    mean_accuracy,
    mean_iou,
    pixel_accuracy,
)
from .segmentation import (
    GroundTruthSegments,
    SegTrainConfig,
    synthetic_seg_dataset,
    train_seg,
    write_seg_log,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SEG_DEFAULT_LR = 5e-5

# Pooled detection matching stays within one image because each image's
# boxes are translated into their own far-apart region; see _shift_box.
IMAGE_SPACING = 1e7

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp")


class CliError(Exception):
    def __init__(self, category: str, message: str, exit_code: int):
        super().__init__(message)
        self.category = category
        self.exit_code = exit_code


def config_error(message: str) -> CliError:
    return CliError("config", message, EXIT_CONFIG)


def data_error(message: str) -> CliError:
    return CliError("data", message, EXIT_DATA)


def numeric_error(message: str) -> CliError:
    return CliError("numeric", message, EXIT_NUMERIC)


def log_info(message: str) -> None:
    print(f"info: {message}", file=sys.stderr)


class Workspace:
    """Artifact paths under --out, removable as a unit on failure.

    Creating the out directory is deferred knowledge: if it did not
    exist before the run, a failure removes it entirely; otherwise only
    the files and directories this run registered are removed.
    """

    def __init__(self, out) -> None:
        self.out = Path(out)
        self._preexisting = self.out.exists()
        self._files: list[Path] = []
        self._dirs: list[Path] = []
        self.out.mkdir(parents=True, exist_ok=True)

    def file(self, *parts: str) -> Path:
        path = self.out.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._files.append(path)
        return path

    def directory(self, *parts: str) -> Path:
        path = self.out.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        self._dirs.append(path)
        return path

    def discard(self) -> None:
        if not self._preexisting:
            shutil.rmtree(self.out, ignore_errors=True)
            return
        for path in self._files:
            try:
                path.unlink()
            except FileNotFoundError:
                pass
        for path in reversed(self._dirs):
            shutil.rmtree(path, ignore_errors=True)


def thread_cap() -> int:
    raw = os.environ.get("ROADSEG_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise config_error(f"ROADSEG_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise config_error(f"ROADSEG_THREADS must be >= 1, got {cap}")
    return cap


def _pooled_map(fn, items: Sequence):
    """Apply fn over items, order-preserving, bounded by ROADSEG_THREADS."""
    cap = thread_cap()
    if cap == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))


def coerce_size(value) -> tuple:
    if isinstance(value, str):
        m = re.fullmatch(r"(\d+)x(\d+)", value)
        if not m:
            raise config_error(f"size must look like 32x32, got {value!r}")
        return int(m.group(1)), int(m.group(2))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return int(value[0]), int(value[1])
    raise config_error(f"size must be HxW or a two-item list, got {value!r}")


def coerce_ratios(value) -> tuple:
    if isinstance(value, str):
        parts = value.split(",")
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        raise config_error(f"ratios must be three comma-separated numbers, got {value!r}")
    if len(parts) != 3:
        raise config_error(f"ratios must have three entries, got {len(parts)}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise config_error(f"ratios must be numeric, got {value!r}")


def _json_ready(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_json_ready(v) for v in value]
    if isinstance(value, list):
        return [_json_ready(v) for v in value]
    return value


def write_run_json(ws: Workspace, command: str, resolved: dict,
                   deviations: Optional[list] = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "config": {k: _json_ready(v) for k, v in sorted(resolved.items())},
        "deviations": deviations or [],
    }
    path = ws.file("run.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log_info(f"wrote {path}")


def _resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "command"}
    return {k: v for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# subcommands


def cmd_stats(args: argparse.Namespace, ws: Workspace) -> None:
    manifest = load_manifest(args.manifest)
    write_run_json(ws, "stats", _resolved_config(args))

    hist_path = ws.file("histogram.csv")
    write_histogram_csv(hist_path, manifest)
    log_info(f"wrote {hist_path}")

    heatmaps = []
    for class_id, name in enumerate(manifest.classes):
        grid = annotation_heatmap(manifest, class_id, grid=args.grid)
        heatmaps.append(grid)
        pgm_path = ws.file(f"heatmap_{name}.pgm")
        heatmap_to_pgm(pgm_path, grid)
        log_info(f"wrote {pgm_path}")

    summary_path = ws.file("summary.json")
    with open(summary_path, "w") as fh:
        json.dump(dataset_summary(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log_info(f"wrote {summary_path}")

    if manifest.classes:
        from . import report

        figures = ws.directory("figures")
        report.save_class_histogram(manifest.classes, class_histogram(manifest),
                                    figures / "class_histogram.png")
        report.save_heatmap_grid(manifest.classes, np.array(heatmaps),
                                 figures / "heatmaps.png")
        log_info(f"wrote {figures}/class_histogram.png and heatmaps.png")


def cmd_split(args: argparse.Namespace, ws: Workspace) -> None:
    ratios = coerce_ratios(args.ratios)
    manifest = load_manifest(args.manifest)
    args.ratios = list(ratios)
    write_run_json(ws, "split", _resolved_config(args))
    try:
        parts = split_dataset(manifest, ratios, seed=args.seed)
    except ValueError as exc:
        raise config_error(str(exc))
    for part, name in zip(parts, ("train.json", "valid.json", "test.json")):
        path = ws.file(name)
        save_manifest(part, path)
        log_info(f"wrote {path} ({len(part)} records)")


def cmd_augment(args: argparse.Namespace, ws: Workspace) -> None:
    if not 0.0 <= args.zoom_limit <= CROP_ZOOM_LIMIT:
        raise config_error(
            f"--zoom-limit must lie in [0, {CROP_ZOOM_LIMIT}], got {args.zoom_limit}")
    if not 0.0 <= args.delta_limit <= AUGMENT_DELTA_LIMIT:
        raise config_error(
            f"--delta-limit must lie in [0, {AUGMENT_DELTA_LIMIT}], got {args.delta_limit}")
    if args.count < 1:
        raise config_error(f"--count must be >= 1, got {args.count}")
    if args.per_epoch is not None and args.per_epoch < 1:
        raise config_error(f"--per-epoch must be >= 1, got {args.per_epoch}")

    manifest = load_manifest(args.manifest)
    root = Path(args.images_root) if args.images_root else Path(args.manifest).parent
    write_run_json(ws, "augment", _resolved_config(args))

    rng = np.random.default_rng(args.seed)
    epochs = args.per_epoch or 1
    for epoch in range(epochs):
        prefix = (f"epoch_{epoch:03d}",) if args.per_epoch else ()
        image_dir = ws.directory(*prefix, "images")
        records = []
        for record in manifest.images:
            source = load_sample(manifest, record, root)
            stem = Path(record.path).stem
            for k in range(args.count):
                out = augment_crop_zoom(source, rng.uniform(0.0, args.zoom_limit), rng)
                out = augment_brightness(out, rng.uniform(-args.delta_limit, args.delta_limit))
                out = augment_saturation(out, rng.uniform(-args.delta_limit, args.delta_limit))
                name = f"{stem}_aug{k}.ppm"
                write_ppm(image_dir / name, out.pixels)
                records.append(dataclasses.replace(out.record, path=f"images/{name}"))
        part_manifest = DatasetManifest(manifest.classes, records)
        manifest_path = ws.file(*prefix, "manifest.json")
        save_manifest(part_manifest, manifest_path)
        log_info(f"wrote {manifest_path} ({len(records)} records)")


def _load_image_dir(directory: Path, image_size: tuple) -> np.ndarray:
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise data_error(f"no images found under {directory}")
    h, w = image_size
    stack = []
    for path in paths:
        pixels = load_image(path)
        if pixels.shape[:2] != (h, w):
            raise data_error(
                f"{path}: image is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"expected {w}x{h}")
        stack.append(pixels.astype(np.float64).transpose(2, 0, 1) / 255.0)
    return np.stack(stack)


def cmd_train_gan(args: argparse.Namespace, ws: Workspace) -> None:
    image_size = coerce_size(args.image_size)
    args.image_size = list(image_size)
    if (args.synthetic is None) == (args.images is None):
        raise config_error("exactly one of --synthetic or --images is required")
    cfg = GanConfig(latent_dim=args.latent_dim, image_size=image_size,
                    base_channels=args.base_channels, epochs=args.epochs,
                    batch_size=args.batch_size, seed=args.seed,
                    learning_rate=args.lr, beta1=args.beta1, beta2=args.beta2)
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise config_error(f"--synthetic must be >= 1, got {args.synthetic}")
        data = striped_images(args.synthetic, image_size, seed=args.seed)
    else:
        data = _load_image_dir(Path(args.images), image_size)
    write_run_json(ws, "train-gan", _resolved_config(args))

    checkpoint_dir = ws.directory("checkpoints")
    try:
        generator, discriminator, log, checkpoints = train(
            data, cfg, checkpoint_dir=checkpoint_dir, max_steps=args.max_steps)
    except ValueError as exc:
        raise data_error(str(exc))
    losses = [rec.d_loss for rec in log] + [rec.g_loss for rec in log]
    if not np.all(np.isfinite(losses)):
        raise numeric_error("training produced a non-finite loss")
    log_info(f"trained {len(log)} steps, {len(checkpoints)} epoch snapshots")

    log_path = ws.file("log.csv")
    write_gan_log(log_path, log)
    log_info(f"wrote {log_path}")

    sample_dir = ws.directory("samples")
    snapshot = build_generator(cfg)
    for epoch, state in enumerate(checkpoints):
        snapshot.load_state(state)
        images = sample(snapshot, args.sample_count, seed=args.sample_seed)
        write_ppm(sample_dir / f"epoch_{epoch:03d}.ppm", sample_grid(images))
    log_info(f"wrote {len(checkpoints)} sample grids under {sample_dir}")

    from . import report

    figures = ws.directory("figures")
    report.save_gan_curves(log, figures / "gan_curves.png")
    log_info(f"wrote {figures}/gan_curves.png")


def _seg_dataset_from_manifest(manifest: DatasetManifest, root: Path,
                               image_size: tuple) -> list:
    h, w = image_size
    dataset = []
    for record in manifest.images:
        if (record.height, record.width) != (h, w):
            raise data_error(
                f"{record.path}: image is {record.width}x{record.height}, "
                f"expected {w}x{h}")
        sample_ = load_sample(manifest, record, root)
        image = sample_.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0
        classes = [a.class_id for a in record.annotations]
        if classes:
            masks = np.array([rasterize_polygon(a, h, w) for a in record.annotations],
                             dtype=np.float64)
        else:
            masks = np.zeros((0, h, w))
        dataset.append((image, GroundTruthSegments(classes, masks)))
    return dataset


def cmd_train_seg(args: argparse.Namespace, ws: Workspace) -> None:
    image_size = coerce_size(args.image_size)
    args.image_size = list(image_size)
    if (args.synthetic is None) == (args.manifest is None):
        raise config_error("exactly one of --synthetic or --manifest is required")

    if args.synthetic is not None:
        if args.synthetic < 1:
            raise config_error(f"--synthetic must be >= 1, got {args.synthetic}")
        train_set = synthetic_seg_dataset(args.synthetic, image_size,
                                          args.classes, seed=args.seed)
        val_set = None
        num_classes = args.classes
    else:
        manifest = load_manifest(args.manifest)
        root = Path(args.images_root) if args.images_root else Path(args.manifest).parent
        train_set = _seg_dataset_from_manifest(manifest, root, image_size)
        num_classes = len(manifest.classes)
        val_set = None
        if args.val_manifest:
            val_manifest = load_manifest(args.val_manifest)
            val_set = _seg_dataset_from_manifest(val_manifest, root, image_size)
    if not train_set:
        raise data_error("training set is empty")

    cfg = SegTrainConfig(num_classes=num_classes, image_size=image_size,
                         epochs=args.epochs, learning_rate=args.lr,
                         num_queries=args.queries, embed_dim=args.embed_dim,
                         stride=args.stride, seed=args.seed)
    deviations = []
    if cfg.learning_rate != SEG_DEFAULT_LR:
        deviations.append(
            f"learning_rate {cfg.learning_rate} overrides the documented "
            f"default {SEG_DEFAULT_LR} (needed for desk-scale convergence)")
    write_run_json(ws, "train-seg", _resolved_config(args), deviations)

    checkpoint_dir = ws.directory("checkpoints")
    try:
        model, log, best_epoch = train_seg(train_set, cfg, val_set=val_set,
                                           checkpoint_dir=checkpoint_dir)
    except ValueError as exc:
        # a non-finite cost matrix means the optimizer diverged
        if "finite" in str(exc):
            raise numeric_error(f"training diverged: {exc}")
        raise
    losses = [rec.train_loss for rec in log] + [rec.val_loss for rec in log]
    if not np.all(np.isfinite(losses)):
        raise numeric_error("training produced a non-finite loss")
    log_info(f"trained {cfg.epochs} epochs over {len(train_set)} images; "
             f"best epoch {best_epoch} (mIoU {log[best_epoch].miou:.4f})")

    log_path = ws.file("log.csv")
    write_seg_log(log_path, log)
    log_info(f"wrote {log_path}")

    from . import report

    figures = ws.directory("figures")
    report.save_seg_curves(log, figures / "seg_curves.png")
    log_info(f"wrote {figures}/seg_curves.png")


def _shift_box(box: BoundingBox, index: int) -> BoundingBox:
    offset = index * IMAGE_SPACING
    return BoundingBox(box.x1 + offset, box.y1 + offset,
                       box.x2 + offset, box.y2 + offset)


def cmd_eval_detections(args: argparse.Namespace, ws: Workspace) -> None:
    manifest = load_manifest(args.manifest)
    try:
        rows = read_detections_csv(args.detections)
    except ValueError as exc:
        raise data_error(str(exc))
    k = len(manifest.classes)
    image_index = {rec.path: i for i, rec in enumerate(manifest.images)}

    # Translating each image's boxes into a private region keeps pooled
    # matching within-image: cross-image IoU is exactly zero.
    dets = []
    for image_id, det in rows:
        if image_id not in image_index:
            raise data_error(f"detection references unknown image {image_id!r}")
        if det.class_id >= k:
            raise data_error(f"detection class id {det.class_id} out of range")
        dets.append(Detection(_shift_box(det.box, image_index[image_id]),
                              det.class_id, det.confidence))
    gts = []
    for rec in manifest.images:
        for ann in rec.annotations:
            box = BoundingBox(*ann.bounds())
            gts.append(GroundTruthBox(ann.class_id,
                                      _shift_box(box, image_index[rec.path])))

    write_run_json(ws, "eval-detections", _resolved_config(args))
    per_class, mean = map50(dets, gts, k, iou_thr=args.iou)
    try:
        raw, normalized = detection_confusion_matrix(dets, gts, k, iou_thr=args.iou,
                                                     conf_floor=args.conf_floor)
    except ValueError as exc:
        raise config_error(str(exc))
    report_data = EvalReport(class_names=list(manifest.classes),
                             per_class_ap=per_class, map50=mean,
                             confusion=raw, confusion_normalized=normalized)
    json_path = ws.file("report.json")
    report_data.to_json(json_path)
    csv_path = ws.file("report.csv")
    report_data.to_csv(csv_path)
    confusion_path = ws.file("confusion.csv")
    report_data.confusion_to_csv(confusion_path)
    log_info(f"wrote {json_path}, {csv_path}, {confusion_path}")
    log_info(f"mAP50 {mean:.4f} over {len(gts)} ground-truth boxes" if np.isfinite(mean)
             else "mAP50 undefined: no ground-truth instances")

    from . import report

    figures = ws.directory("figures")
    report.save_confusion_figure(normalized, manifest.classes,
                                 figures / "confusion.png")
    report.save_metric_bars(manifest.classes, per_class, mean, "AP50",
                            figures / "ap_per_class.png")
    log_info(f"wrote {figures}/confusion.png and ap_per_class.png")


def _default_class_names(k: int) -> list:
    from .data import DEFAULT_CLASSES

    if k == len(DEFAULT_CLASSES):
        return list(DEFAULT_CLASSES)
    return [f"class_{i}" for i in range(k)]


def _load_label_map(path: Path) -> np.ndarray:
    labels = read_netpbm(path)
    if labels.ndim != 2:
        raise data_error(f"{path}: label maps must be single-channel PGM")
    return labels


def cmd_eval_masks(args: argparse.Namespace, ws: Workspace) -> None:
    k = args.classes
    if k < 1:
        raise config_error(f"--classes must be >= 1, got {k}")
    if args.class_names:
        names = [n.strip() for n in args.class_names.split(",")]
        if len(names) != k:
            raise config_error(f"--class-names lists {len(names)} names for {k} classes")
    else:
        names = _default_class_names(k)

    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    gt_paths = sorted(gt_dir.glob("*.pgm"))
    if not gt_paths:
        raise data_error(f"no .pgm label maps under {gt_dir}")
    pairs = []
    for gt_path in gt_paths:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise data_error(f"missing prediction for {gt_path.name}")
        pairs.append((pred_path, gt_path))

    loaded = _pooled_map(lambda pair: (_load_label_map(pair[0]), _load_label_map(pair[1])),
                         pairs)
    for (pred, gt), (pred_path, gt_path) in zip(loaded, pairs):
        if pred.shape != gt.shape:
            raise data_error(
                f"{pred_path.name}: prediction shape {pred.shape} does not "
                f"match ground truth {gt.shape}")
    pred_stack = np.stack([pred for pred, _ in loaded])
    gt_stack = np.stack([gt for _, gt in loaded])

    write_run_json(ws, "eval-masks", _resolved_config(args))
    per_iou, miou = mean_iou(pred_stack, gt_stack, k)
    per_acc, macc = mean_accuracy(pred_stack, gt_stack, k)
    pix = pixel_accuracy(pred_stack, gt_stack)
    report_data = EvalReport(class_names=names, per_class_iou=per_iou,
                             mean_iou=miou, per_class_accuracy=per_acc,
                             mean_accuracy=macc, pixel_accuracy=pix)
    json_path = ws.file("report.json")
    report_data.to_json(json_path)
    csv_path = ws.file("report.csv")
    report_data.to_csv(csv_path)
    log_info(f"wrote {json_path} and {csv_path}")
    log_info(f"mIoU {miou:.4f}, mean accuracy {macc:.4f}, "
             f"pixel accuracy {pix:.4f} over {len(pairs)} images")

    from . import report

    figures = ws.directory("figures")
    report.save_metric_bars(names, per_iou, miou, "IoU", figures / "iou_per_class.png")
    log_info(f"wrote {figures}/iou_per_class.png")


# ---------------------------------------------------------------------------
# parser plumbing


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(
        prog="roadseg",
        description="Road-distress pipeline toolkit: data, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"roadseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    parsers = {}

    def add(name: str, func, help_text: str):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None,
                       help="TOML file of option defaults; flags override it")
        p.add_argument("--out", required=True, help="artifact output directory")
        p.set_defaults(func=func)
        parsers[name] = p
        return p

    p = add("stats", cmd_stats, "class histogram, annotation heatmaps, summary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", type=int, default=64, help="heatmap grid size")

    p = add("split", cmd_split, "shuffle and split a manifest into train/valid/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="0.85,0.10,0.05")
    p.add_argument("--seed", type=int, default=0)

    p = add("augment", cmd_augment, "write augmented image copies plus their manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", default=None,
                   help="base directory for record paths (default: manifest's directory)")
    p.add_argument("--count", type=int, default=1, help="augmented copies per image")
    p.add_argument("--zoom-limit", type=float, default=CROP_ZOOM_LIMIT)
    p.add_argument("--delta-limit", type=float, default=AUGMENT_DELTA_LIMIT)
    p.add_argument("--per-epoch", type=int, default=None,
                   help="emit N independent epoch_XXX sets instead of one")
    p.add_argument("--seed", type=int, default=0)

    p = add("train-gan", cmd_train_gan, "adversarial training with logs and samples")
    p.add_argument("--images", default=None, help="directory of training images")
    p.add_argument("--synthetic", type=int, default=None,
                   help="train on N generated striped images instead of files")
    p.add_argument("--image-size", default="32x32")
    p.add_argument("--latent-dim", type=int, default=100)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--sample-count", type=int, default=16,
                   help="images per epoch sample grid")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    p = add("train-seg", cmd_train_seg, "train the toy mask-classification model")
    p.add_argument("--manifest", default=None)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--images-root", default=None)
    p.add_argument("--synthetic", type=int, default=None,
                   help="train on N generated rectangle scenes instead of files")
    p.add_argument("--image-size", default="32x32")
    p.add_argument("--classes", type=int, default=4,
                   help="class count for synthetic data")
    p.add_argument("--epochs", type=int, default=35)
    p.add_argument("--lr", type=float, default=SEG_DEFAULT_LR)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = add("eval-detections", cmd_eval_detections,
            "mAP50 and confusion matrix for a detections CSV against a manifest")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf-floor", type=float, default=0.25,
                   help="confidence floor for the confusion matrix")

    p = add("eval-masks", cmd_eval_masks,
            "IoU and accuracy for predicted label maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted .pgm label maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth .pgm label maps")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--class-names", default=None, help="comma-separated names")

    return parser, parsers


def _find_subcommand(argv: Sequence[str]) -> Optional[str]:
    for token in argv:
        if not token.startswith("-"):
            return token
    return None


def _find_config_path(argv: Sequence[str]) -> Optional[str]:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def apply_config_file(parsers: dict, command: str, path: str) -> None:
    """Merge a TOML file into one subparser's defaults.

    Top-level keys apply directly; a table named after the subcommand
    overrides them. Tables for other subcommands are ignored; any other
    unknown key is a configuration error.
    """
    if command not in parsers:
        return
    try:
        with open(path, "rb") as fh:
            content = tomli.load(fh)
    except FileNotFoundError:
        raise config_error(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise config_error(f"config file {path}: {exc}")

    values = {}
    for key, value in content.items():
        if isinstance(value, dict):
            continue
        values[key] = value
    table = content.get(command, {})
    if not isinstance(table, dict):
        raise config_error(f"config file {path}: {command!r} must be a table")
    values.update(table)

    target = parsers[command]
    known = {action.dest for action in target._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("func", "help", "config"):
            raise config_error(f"config file {path}: unknown key {key!r} "
                               f"for subcommand {command}")
        defaults[dest] = value
    target.set_defaults(**defaults)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parsers = build_parser()
    try:
        config_path = _find_config_path(argv)
        if config_path:
            apply_config_file(parsers, _find_subcommand(argv), config_path)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        ws = Workspace(args.out)
        try:
            args.func(args, ws)
        except BaseException:
            ws.discard()
            raise
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, CheckpointError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
