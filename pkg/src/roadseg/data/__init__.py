"""Dataset plumbing: manifests, rasterization, transforms, statistics."""

from .images import load_image, load_sample, save_image
from .manifest import (
    DEFAULT_CLASSES,
    DatasetManifest,
    ImageRecord,
    ImageSample,
    ManifestError,
    PolygonAnnotation,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .netpbm import read_netpbm, write_pgm, write_ppm
from .raster import clip_polygon, polygon_area, rasterize_polygon
from .stats import (
    annotation_heatmap,
    class_histogram,
    dataset_summary,
    heatmap_to_pgm,
    split_sizes,
    verify_paths,
    write_histogram_csv,
)
from .transforms import (
    AUGMENT_DELTA_LIMIT,
    CROP_ZOOM_LIMIT,
    LUMA_WEIGHTS,
    auto_orient,
    augment_brightness,
    augment_crop_zoom,
    augment_saturation,
    orient_pixels,
    resize_bilinear,
    resize_with_annotations,
)

__all__ = [
    "AUGMENT_DELTA_LIMIT",
    "CROP_ZOOM_LIMIT",
    "DEFAULT_CLASSES",
    "DatasetManifest",
    "LUMA_WEIGHTS",
    "ImageRecord",
    "ImageSample",
    "ManifestError",
    "PolygonAnnotation",
    "annotation_heatmap",
    "augment_brightness",
    "augment_crop_zoom",
    "augment_saturation",
    "auto_orient",
    "class_histogram",
    "clip_polygon",
    "dataset_summary",
    "heatmap_to_pgm",
    "load_image",
    "load_manifest",
    "load_sample",
    "orient_pixels",
    "polygon_area",
    "rasterize_polygon",
    "read_netpbm",
    "resize_bilinear",
    "resize_with_annotations",
    "save_image",
    "save_manifest",
    "split_dataset",
    "split_sizes",
    "verify_paths",
    "write_histogram_csv",
    "write_pgm",
    "write_ppm",
]
