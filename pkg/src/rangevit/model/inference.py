"""Full-scan inference by averaging overlapping crops."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, no_grad
from ..pointops import knn_postprocess
from ..projection import RangeImage
from .network import CropPoints, RangeViT

WINDOW_BATCH = 8


def window_starts(width: int, crop_width: int, stride: int) -> list[int]:
    """Left edges of the crops: 0, stride, 2*stride, ... until the last
    window reaches the right edge (it may wrap around to column 0)."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if crop_width > width:
        raise ValueError(f"crop width {crop_width} exceeds image width {width}")
    if stride > crop_width:
        raise ValueError(f"stride {stride} larger than crop width {crop_width} would leave gaps")
    starts = [0]
    while starts[-1] + crop_width < width:
        starts.append(starts[-1] + stride)
    return starts


def window_columns(width: int, crop_width: int, start: int) -> np.ndarray:
    return (start + np.arange(crop_width)) % width


def coverage(width: int, crop_width: int, stride: int) -> np.ndarray:
    counts = np.zeros(width, dtype=np.int64)
    for s in window_starts(width, crop_width, stride):
        np.add.at(counts, window_columns(width, crop_width, s), 1)
    return counts


def averaged_feature_map(model: RangeViT, image: RangeImage, stride: int) -> np.ndarray:
    """Decoder output over the whole image, averaged where crops overlap."""
    cfg = model.config
    if image.height != cfg.crop_height:
        raise ValueError(f"image height {image.height} differs from crop height {cfg.crop_height}")
    width = image.width
    starts = window_starts(width, cfg.crop_width, stride)
    acc = None
    counts = np.zeros(width, dtype=np.int64)
    with no_grad():
        for i in range(0, len(starts), WINDOW_BATCH):
            chunk = starts[i:i + WINDOW_BATCH]
            cols = [window_columns(width, cfg.crop_width, s) for s in chunk]
            crops = np.stack([image.features[:, :, c] for c in cols])
            maps = model.feature_maps(crops).data
            if acc is None:
                acc = np.zeros((maps.shape[1], image.height, width), dtype=maps.dtype)
            for m, c in zip(maps, cols):
                acc[:, :, c] += m  # columns within one window are distinct
                np.add.at(counts, c, 1)
    return acc / counts.astype(acc.dtype)


def infer_full_scan(image: RangeImage, model: RangeViT, stride: int, coords: np.ndarray) -> np.ndarray:
    """Per-point logits (N x K) for a complete range image.

    ``coords`` are the xyz positions of the image's points, in the same
    order as ``image.point_pixel``. The refiner (or the pixel head) runs
    once on the averaged feature map.
    """
    was_training = model.training
    model.eval()
    try:
        fmap = averaged_feature_map(model, image, stride)
        points = CropPoints(coords, image.point_pixel, image.point_valid)
        with no_grad():
            return model.point_logits(Tensor(fmap[None]), [points]).data
    finally:
        model.training = was_training


def predict_labels(image: RangeImage, model: RangeViT, stride: int, coords: np.ndarray,
                   point_range: np.ndarray | None = None, knn_k: int = 5, knn_window: int = 5) -> np.ndarray:
    """Class ids (1..K) per point.

    Models without the refiner label pixels first and then re-label the
    points with the range-weighted K-NN vote.
    """
    if model.config.use_refiner:
        return infer_full_scan(image, model, stride, coords).argmax(axis=1) + 1
    was_training = model.training
    model.eval()
    try:
        fmap = averaged_feature_map(model, image, stride)
        with no_grad():
            pix = model.pixel_logits(Tensor(fmap[None])).data[0]
    finally:
        model.training = was_training
    pixel_labels = pix.argmax(axis=0) + 1
    if point_range is None:
        point_range = np.sqrt((np.asarray(coords, dtype=np.float64) ** 2).sum(axis=1))
    return knn_postprocess(pixel_labels, image, point_range, k=knn_k, window=knn_window)
