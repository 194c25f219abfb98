"""Sample transforms: resize, EXIF orientation, and the augmentations.

Every transform maps an ImageSample to a new ImageSample and keeps the
record's annotations consistent with the pixels.  Neutral parameters
(zoom 0, delta 0, tag 1, same-size resize) return byte-identical pixels.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .manifest import ImageRecord, ImageSample, PolygonAnnotation
from .raster import clip_polygon, polygon_area

# Rec. 601 luma weights; chroma is the per-channel residual around it
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

AUGMENT_DELTA_LIMIT = 0.25
CROP_ZOOM_LIMIT = 0.20


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment.

    Output center j maps to source coordinate (j + 0.5) * scale - 0.5,
    clamped to the valid range, so a same-size call is exact identity.
    uint8 input rounds back to uint8; float input stays float.
    """
    h, w = pixels.shape[:2]
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return pixels.copy()
    arr = pixels.astype(np.float64)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    if arr.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    out = ((1 - fy) * (1 - fx) * arr[np.ix_(y0, x0)]
           + (1 - fy) * fx * arr[np.ix_(y0, x1)]
           + fy * (1 - fx) * arr[np.ix_(y1, x0)]
           + fy * fx * arr[np.ix_(y1, x1)])
    if pixels.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def _rebuild(sample: ImageSample, pixels, record) -> ImageSample:
    return ImageSample(pixels, record, sample.num_classes)


def resize_with_annotations(sample: ImageSample, target=(640, 640)) -> ImageSample:
    """Resize pixels to target (width, height); vertices scale with them."""
    tw, th = int(target[0]), int(target[1])
    sx = tw / sample.record.width
    sy = th / sample.record.height
    pixels = resize_bilinear(sample.pixels, th, tw)
    anns = tuple(
        PolygonAnnotation(a.class_id, tuple((x * sx, y * sy) for x, y in a.vertices))
        for a in sample.record.annotations)
    record = dataclasses.replace(sample.record, width=tw, height=th,
                                 annotations=anns)
    return _rebuild(sample, pixels, record)


# vertex maps for EXIF orientation tags, in index coordinates: pixel
# column x, row y of a WxH image lands at the returned (x', y')
_ORIENT_VERTEX = {
    1: lambda x, y, w, h: (x, y),
    2: lambda x, y, w, h: (w - 1 - x, y),
    3: lambda x, y, w, h: (w - 1 - x, h - 1 - y),
    4: lambda x, y, w, h: (x, h - 1 - y),
    5: lambda x, y, w, h: (y, x),
    6: lambda x, y, w, h: (h - 1 - y, x),
    7: lambda x, y, w, h: (h - 1 - y, w - 1 - x),
    8: lambda x, y, w, h: (y, w - 1 - x),
}


def orient_pixels(pixels: np.ndarray, tag: int) -> np.ndarray:
    """Apply the EXIF orientation transform for tag to an H x W x C array."""
    if tag not in _ORIENT_VERTEX:
        raise ValueError(f"unknown orientation tag {tag}")
    t = pixels.transpose(1, 0, 2) if pixels.ndim == 3 else pixels.T
    out = {
        1: lambda: pixels,
        2: lambda: pixels[:, ::-1],
        3: lambda: pixels[::-1, ::-1],
        4: lambda: pixels[::-1],
        5: lambda: t,
        6: lambda: t[:, ::-1],
        7: lambda: t[::-1, ::-1],
        8: lambda: t[::-1],
    }[tag]()
    return np.ascontiguousarray(out)


def auto_orient(sample: ImageSample) -> ImageSample:
    """Normalize to orientation 1, transforming pixels and vertices."""
    tag = sample.record.orientation
    if tag == 1:
        return _rebuild(sample, sample.pixels.copy(), sample.record)
    w, h = sample.record.width, sample.record.height
    vmap = _ORIENT_VERTEX[tag]
    pixels = orient_pixels(sample.pixels, tag)
    anns = tuple(
        PolygonAnnotation(a.class_id,
                          tuple(vmap(x, y, w, h) for x, y in a.vertices))
        for a in sample.record.annotations)
    new_h, new_w = pixels.shape[:2]
    record = dataclasses.replace(sample.record, width=new_w, height=new_h,
                                 orientation=1, annotations=anns)
    return _rebuild(sample, pixels, record)


def augment_crop_zoom(sample: ImageSample, zoom: float,
                      rng: np.random.Generator) -> ImageSample:
    """Random crop of side fraction (1 - zoom), resized back to full size.

    Polygons are clipped to the window; annotations whose clipped outline
    degenerates to zero area are dropped.
    """
    if not 0.0 <= zoom <= CROP_ZOOM_LIMIT:
        raise ValueError(f"zoom must lie in [0, {CROP_ZOOM_LIMIT}], got {zoom}")
    if zoom == 0.0:
        return _rebuild(sample, sample.pixels.copy(), sample.record)
    w, h = sample.record.width, sample.record.height
    win_w = max(int(round((1 - zoom) * w)), 1)
    win_h = max(int(round((1 - zoom) * h)), 1)
    x0 = int(rng.integers(0, w - win_w + 1))
    y0 = int(rng.integers(0, h - win_h + 1))
    crop = sample.pixels[y0:y0 + win_h, x0:x0 + win_w]
    pixels = resize_bilinear(crop, h, w)
    sx, sy = w / win_w, h / win_h
    anns = []
    for a in sample.record.annotations:
        clipped = clip_polygon(a.vertices, x0, y0, x0 + win_w, y0 + win_h)
        if len(clipped) < 3 or polygon_area(clipped) == 0.0:
            continue
        anns.append(PolygonAnnotation(
            a.class_id, tuple(((x - x0) * sx, (y - y0) * sy) for x, y in clipped)))
    record = dataclasses.replace(sample.record, annotations=tuple(anns))
    return _rebuild(sample, pixels, record)


def _check_delta(delta: float) -> None:
    if not -AUGMENT_DELTA_LIMIT <= delta <= AUGMENT_DELTA_LIMIT:
        raise ValueError(
            f"delta must lie in [-{AUGMENT_DELTA_LIMIT}, {AUGMENT_DELTA_LIMIT}],"
            f" got {delta}")


def augment_brightness(sample: ImageSample, delta: float) -> ImageSample:
    """Scale all channels by (1 + delta) and clamp to [0, 255]."""
    _check_delta(delta)
    if delta == 0.0:
        return _rebuild(sample, sample.pixels.copy(), sample.record)
    out = np.clip(np.rint(sample.pixels.astype(np.float64) * (1.0 + delta)),
                  0, 255).astype(np.uint8)
    return _rebuild(sample, out, sample.record)


def augment_saturation(sample: ImageSample, delta: float) -> ImageSample:
    """Scale chroma around the Rec. 601 luma by (1 + delta).

    Grayscale pixels have zero chroma, so they are unaffected.
    """
    _check_delta(delta)
    if delta == 0.0:
        return _rebuild(sample, sample.pixels.copy(), sample.record)
    arr = sample.pixels.astype(np.float64)
    luma = arr @ LUMA_WEIGHTS
    out = luma[..., None] + (1.0 + delta) * (arr - luma[..., None])
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return _rebuild(sample, out, sample.record)
