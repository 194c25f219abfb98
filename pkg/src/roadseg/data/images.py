"""Image file IO: PNG through Pillow, netpbm through the local reader."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, ImageRecord, ImageSample
from .netpbm import read_netpbm, write_ppm


def load_image(path) -> np.ndarray:
    """Decode a PNG, PPM, or PGM file to [H, W, 3] uint8."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm"):
        arr = read_netpbm(path)
    else:
        from PIL import Image
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"))
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr, dtype=np.uint8)


def save_image(path, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, pixels)
    else:
        from PIL import Image
        Image.fromarray(pixels.astype(np.uint8)).save(path)


def load_sample(manifest: DatasetManifest, record: ImageRecord,
                root) -> ImageSample:
    """Decode one record's image; dims are validated against the record."""
    pixels = load_image(Path(root) / record.path)
    return ImageSample(pixels, record, len(manifest.classes))
