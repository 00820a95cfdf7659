"""Point-cloud augmentation and random range-image crops."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..projection import PointCloud, RangeImage

MAX_ROTATION_DEG = 5.0
MAX_TRANSLATION_M = 1.0


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    translate_prob: float = 0.5

    def __post_init__(self):
        for name in ("flip_prob", "rotate_prob", "translate_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0)


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) Ry(pitch) Rx(roll), angles in radians."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _with_xyz(cloud: PointCloud, xyz: np.ndarray) -> PointCloud:
    pts = cloud.points.copy()
    pts[:, :3] = xyz
    return PointCloud(pts, None if cloud.labels is None else cloud.labels.copy())


def flip_y(cloud: PointCloud) -> PointCloud:
    xyz = cloud.points[:, :3].copy()
    xyz[:, 1] = -xyz[:, 1]
    return _with_xyz(cloud, xyz)


def rotate(cloud: PointCloud, roll: float, pitch: float, yaw: float) -> PointCloud:
    rot = rotation_matrix(roll, pitch, yaw)
    return _with_xyz(cloud, cloud.points[:, :3].astype(np.float64) @ rot.T)


def translate(cloud: PointCloud, offset) -> PointCloud:
    return _with_xyz(cloud, cloud.points[:, :3].astype(np.float64) + np.asarray(offset, dtype=np.float64))


def augment(cloud: PointCloud, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> PointCloud:
    """Y-flip, then rotation, then translation, each with its own probability.

    Every draw is consumed whether or not the step is applied, so the
    random stream does not depend on earlier outcomes.
    """
    u = rng.uniform(size=3)
    angles = np.radians(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG, size=3))
    offset = rng.uniform(-MAX_TRANSLATION_M, MAX_TRANSLATION_M, size=3)
    out = cloud
    if u[0] < config.flip_prob:
        out = flip_y(out)
    if u[1] < config.rotate_prob:
        out = rotate(out, *angles)
    if u[2] < config.translate_prob:
        out = translate(out, offset)
    if out is cloud:
        out = PointCloud(cloud.points.copy(), None if cloud.labels is None else cloud.labels.copy())
    return out


@dataclass
class Crop:
    """A full-height window of a range image and the points it contains.

    ``point_index`` selects the retained points of the source image;
    ``point_pixel`` holds their positions in crop coordinates.
    """

    features: np.ndarray
    start: int
    point_index: np.ndarray
    point_pixel: np.ndarray

    @property
    def width(self) -> int:
        return self.features.shape[2]


def crop_at(image: RangeImage, crop_width: int, start: int) -> Crop:
    w = image.width
    if crop_width > w:
        raise ValueError(f"crop width {crop_width} exceeds image width {w}")
    if crop_width < 1:
        raise ValueError("crop width must be >= 1")
    cols = (start + np.arange(crop_width)) % w
    features = image.features[:, :, cols]
    int_col = image.integer_pixels()[:, 1]
    local = (int_col - start) % w
    keep = image.point_valid & (local < crop_width)
    idx = np.flatnonzero(keep)
    pix = image.point_pixel[idx].copy()
    local = local[idx].astype(np.float64)
    # continuous column keeps its sub-pixel offset but stays inside its pixel
    frac = np.clip(pix[:, 1] - int_col[idx], 0.0, np.nextafter(1.0, 0.0))
    pix[:, 1] = local + frac
    return Crop(features, int(start), idx, pix)


def random_crop(image: RangeImage, crop_width: int, rng: np.random.Generator) -> Crop:
    """Uniform start column; the window wraps cyclically past the right edge."""
    if crop_width > image.width:
        raise ValueError(f"crop width {crop_width} exceeds image width {image.width}")
    start = 0 if crop_width == image.width else int(rng.integers(0, image.width))
    return crop_at(image, crop_width, start)
