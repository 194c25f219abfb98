"""Dataset manifest: a single JSON document describing images and labels.

Schema (version 1):

    {
      "version": 1,
      "classes": ["crack", ...],
      "images": [
        {
          "path": "relative/to/manifest.png",
          "width": 1024, "height": 640,
          "orientation": 1,
          "annotations": [
            {"class_id": 0, "polygon": [[x, y], ...]}
          ]
        }
      ]
    }

Polygon vertices are pixel coordinates; they are clamped into the image
bounds at load time.  Paths must be unique within a manifest and class
ids must index into the class list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_CLASSES = ("crack", "pothole", "damaged_marking", "guardrail")
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Manifest file violates the schema or an invariant."""


@dataclass(frozen=True)
class PolygonAnnotation:
    """One labeled region: a class id and a polygon outline.

    Vertices are (x, y) pairs in pixels.  Self-intersecting outlines are
    legal; the even-odd fill rule resolves them.
    """

    class_id: int
    vertices: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(pts) < 3:
            raise ManifestError(
                f"polygon needs at least 3 vertices, got {len(pts)}")
        if self.class_id < 0:
            raise ManifestError(f"negative class id {self.class_id}")
        object.__setattr__(self, "vertices", pts)

    def bounds(self):
        xs = [x for x, _ in self.vertices]
        ys = [y for _, y in self.vertices]
        return min(xs), min(ys), max(xs), max(ys)


@dataclass(frozen=True)
class ImageRecord:
    path: str
    width: int
    height: int
    orientation: int = 1
    annotations: tuple = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"record {self.path!r}: non-positive size")
        if self.orientation not in range(1, 9):
            raise ManifestError(
                f"record {self.path!r}: orientation tag {self.orientation} "
                "outside 1..8")
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple = DEFAULT_CLASSES
    images: tuple = ()
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "images", tuple(self.images))
        if self.version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {self.version}")
        seen = set()
        for rec in self.images:
            if rec.path in seen:
                raise ManifestError(f"record {rec.path!r}: duplicate path")
            seen.add(rec.path)
            for ann in rec.annotations:
                if ann.class_id >= len(self.classes):
                    raise ManifestError(
                        f"record {rec.path!r}: class id {ann.class_id} out of "
                        f"range for {len(self.classes)} classes")

    def __len__(self):
        return len(self.images)


@dataclass
class ImageSample:
    """Decoded pixels plus the manifest record they came from.

    Per-class masks rasterize on first access and are cached; any
    transform producing a new sample starts with an empty cache.
    """

    pixels: np.ndarray
    record: ImageRecord
    num_classes: int
    _masks: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if (w, h) != (self.record.width, self.record.height):
            raise ManifestError(
                f"record {self.record.path!r}: pixels are {w}x{h} but the "
                f"manifest says {self.record.width}x{self.record.height}")

    def class_masks(self) -> np.ndarray:
        """[num_classes, H, W] binary union of each class's polygons."""
        if self._masks is None:
            from .raster import rasterize_polygon
            h, w = self.record.height, self.record.width
            out = np.zeros((self.num_classes, h, w), np.uint8)
            for ann in self.record.annotations:
                out[ann.class_id] |= rasterize_polygon(ann, h, w)
            self._masks = out
        return self._masks


def _clamped(ann: PolygonAnnotation, width, height) -> PolygonAnnotation:
    pts = tuple((min(max(x, 0.0), float(width)), min(max(y, 0.0), float(height)))
                for x, y in ann.vertices)
    return PolygonAnnotation(ann.class_id, pts)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    for key in ("version", "classes", "images"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key {key!r}")
    records = []
    for idx, entry in enumerate(doc["images"]):
        label = f"record {idx} ({entry.get('path', '?')!r})"
        for key in ("path", "width", "height"):
            if key not in entry:
                raise ManifestError(f"{label}: missing key {key!r}")
        anns = []
        for ann in entry.get("annotations", ()):
            if "class_id" not in ann or "polygon" not in ann:
                raise ManifestError(f"{label}: annotation missing class_id/polygon")
            parsed = PolygonAnnotation(int(ann["class_id"]),
                                       tuple((p[0], p[1]) for p in ann["polygon"]))
            anns.append(_clamped(parsed, entry["width"], entry["height"]))
        records.append(ImageRecord(str(entry["path"]), int(entry["width"]),
                                   int(entry["height"]),
                                   int(entry.get("orientation", 1)),
                                   tuple(anns)))
    return DatasetManifest(tuple(str(c) for c in doc["classes"]),
                           tuple(records), int(doc["version"]))


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": manifest.version,
        "classes": list(manifest.classes),
        "images": [
            {
                "path": rec.path,
                "width": rec.width,
                "height": rec.height,
                "orientation": rec.orientation,
                "annotations": [
                    {"class_id": ann.class_id,
                     "polygon": [[x, y] for x, y in ann.vertices]}
                    for ann in rec.annotations
                ],
            }
            for rec in manifest.images
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def split_dataset(manifest: DatasetManifest, ratios=(0.85, 0.10, 0.05),
                  seed: int = 0):
    """Shuffle records by seed and cut train/valid/test manifests.

    Sizes are floor(n * ratio) with every remainder image going to train,
    so 1000 images split exactly 850/100/50.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three numbers summing to 1, got {ratios}")
    if min(ratios) < 0:
        raise ValueError("ratios must be non-negative")
    n = len(manifest.images)
    n_valid = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_valid - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [manifest.images[i] for i in order]

    def piece(records):
        return DatasetManifest(manifest.classes, tuple(records), manifest.version)

    return (piece(shuffled[:n_train]),
            piece(shuffled[n_train:n_train + n_valid]),
            piece(shuffled[n_train + n_valid:]))
