"""Dataset statistics: instance histogram and annotation density heatmaps."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest
from .raster import rasterize_polygon

HEATMAP_GRID = 64


def class_histogram(manifest: DatasetManifest) -> np.ndarray:
    """Annotation instance counts per class id."""
    counts = np.zeros(len(manifest.classes), np.int64)
    for rec in manifest.images:
        for ann in rec.annotations:
            counts[ann.class_id] += 1
    return counts


def write_histogram_csv(path, manifest: DatasetManifest) -> None:
    counts = class_histogram(manifest)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "instances"])
        for name, count in zip(manifest.classes, counts):
            writer.writerow([name, int(count)])


def _overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] interval-overlap weights for exact area pooling.

    Entry (g, p) is the length of the intersection of output cell
    [g*s, (g+1)*s) with input pixel [p, p+1), s = n_in / n_out.  Pooling
    with these is linear and maps an all-ones input to a uniform grid.
    """
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    for g in range(n_out):
        lo, hi = g * scale, (g + 1) * scale
        for p in range(int(lo), min(math.ceil(hi), n_in)):
            mat[g, p] = min(hi, p + 1) - max(lo, p)
    return mat


def annotation_heatmap(manifest: DatasetManifest, class_id: int,
                       grid: int = HEATMAP_GRID) -> np.ndarray:
    """[grid, grid] density of one class's mask area, peak-normalized.

    Each image's class mask is area-pooled onto the grid and the pools
    summed; the sum divides by its maximum so the peak is 1.  A class
    with no annotations yields an all-zero grid.
    """
    if not 0 <= class_id < len(manifest.classes):
        raise ValueError(f"class id {class_id} out of range for "
                         f"{len(manifest.classes)} classes")
    total = np.zeros((grid, grid))
    for rec in manifest.images:
        anns = [a for a in rec.annotations if a.class_id == class_id]
        if not anns:
            continue
        mask = np.zeros((rec.height, rec.width), np.uint8)
        for ann in anns:
            mask |= rasterize_polygon(ann, rec.height, rec.width)
        pool_y = _overlap_matrix(grid, rec.height)
        pool_x = _overlap_matrix(grid, rec.width)
        total += pool_y @ mask.astype(np.float64) @ pool_x.T
    peak = total.max()
    return total / peak if peak > 0 else total


def heatmap_to_pgm(path, heatmap: np.ndarray) -> None:
    """Write a peak-normalized heatmap as an 8-bit PGM."""
    from .netpbm import write_pgm
    write_pgm(path, np.clip(np.rint(heatmap * 255.0), 0, 255).astype(np.uint8))


def split_sizes(n: int, ratios=(0.85, 0.10, 0.05)):
    """Floor allocation with the remainder to train; sums to n."""
    n_valid = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    return n - n_valid - n_test, n_valid, n_test


def dataset_summary(manifest: DatasetManifest) -> dict:
    counts = class_histogram(manifest)
    sizes = {(rec.width, rec.height) for rec in manifest.images}
    return {
        "images": len(manifest.images),
        "annotations": int(counts.sum()),
        "per_class": {name: int(c) for name, c in zip(manifest.classes, counts)},
        "distinct_sizes": sorted(f"{w}x{h}" for w, h in sizes),
    }


def verify_paths(manifest: DatasetManifest, root) -> list:
    """Paths referenced by the manifest that do not exist under root."""
    root = Path(root)
    return [rec.path for rec in manifest.images if not (root / rec.path).exists()]
