"""Point cloud <-> range image conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Tensor, ops

NUM_FEATURES = 5  # r, x, y, z, intensity


@dataclass
class PointCloud:
    """N x 4 points (x, y, z in meters, intensity) and optional labels.

    Label 0 means "ignore"; classes are 1..K.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            bad = int(np.flatnonzero(~np.isfinite(self.points).all(axis=1))[0])
            raise ValueError(f"point {bad} has non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.points.shape[0]:
                raise ValueError(
                    f"{self.labels.shape[0]} labels for {self.points.shape[0]} points"
                )
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be >= 0")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def ranges(self) -> np.ndarray:
        p = self.points[:, :3].astype(np.float64)
        return np.sqrt((p * p).sum(axis=1))


@dataclass(frozen=True)
class SensorFov:
    """Vertical field of view in degrees; ``f_down`` is negative."""

    f_up: float = 10.0
    f_down: float = -30.0

    def __post_init__(self):
        if self.f_v <= 0:
            raise ValueError(f"vertical field of view must be positive, got {self.f_v}")

    @property
    def f_v(self) -> float:
        return abs(self.f_down) + abs(self.f_up)

    @classmethod
    def for_beams(cls, beams: int) -> "SensorFov":
        if beams >= 64:
            return cls(3.0, -25.0)
        return cls(10.0, -30.0)


@dataclass
class RangeImage:
    features: np.ndarray  # 5 x H x W, float32
    occupancy: np.ndarray  # H x W bool
    pixel_owner: np.ndarray  # H x W int64, -1 where empty
    point_pixel: np.ndarray  # N x 2 continuous (row, col); pixel (i, j) spans [i, i+1) x [j, j+1)
    point_valid: np.ndarray  # N bool
    skipped: int = 0
    overflow: int = 0
    collisions: int = 0

    @property
    def height(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    @property
    def num_points(self) -> int:
        return self.point_pixel.shape[0]

    def integer_pixels(self) -> np.ndarray:
        """Floor-then-clamp integer (row, col) of each point."""
        rows = np.clip(np.floor(self.point_pixel[:, 0]), 0, self.height - 1).astype(np.int64)
        cols = np.clip(np.floor(self.point_pixel[:, 1]), 0, self.width - 1).astype(np.int64)
        return np.stack([rows, cols], axis=1)


def azimuth_column(x: np.ndarray, y: np.ndarray, width: int) -> np.ndarray:
    return 0.5 * (1.0 - np.arctan2(y, x) / np.pi) * width


def _fill_image(cloud: PointCloud, pix_rc: np.ndarray, valid: np.ndarray, height: int, width: int,
                rng: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    rows = np.clip(np.floor(pix_rc[:, 0]), 0, height - 1).astype(np.int64)
    cols = np.clip(np.floor(pix_rc[:, 1]), 0, width - 1).astype(np.int64)
    flat = np.where(valid, rows * width + cols, -1).astype(np.int64)
    owner = _kernels.resolve_collisions(flat, rng, height * width)
    occupied = owner >= 0
    feats = np.zeros((NUM_FEATURES, height * width), dtype=np.float32)
    src = owner[occupied]
    feats[0, occupied] = rng[src]
    feats[1:4, occupied] = cloud.points[src, :3].T
    feats[4, occupied] = cloud.points[src, 3]
    n_valid = int(valid.sum())
    collisions = n_valid - int(occupied.sum())
    return (
        feats.reshape(NUM_FEATURES, height, width),
        occupied.reshape(height, width),
        owner.reshape(height, width),
        collisions,
    )


def spherical_project(cloud: PointCloud, fov: SensorFov, height: int, width: int) -> RangeImage:
    """Project points onto an H x W grid by elevation and azimuth.

    Pixels keep the point with the smallest range; empty pixels are zero.
    Points at the origin are skipped and counted.
    """
    if height < 1 or width < 1:
        raise ValueError("range image size must be at least 1 x 1")
    p = cloud.points[:, :3].astype(np.float64)
    r = np.sqrt((p * p).sum(axis=1))
    valid = r > 0
    safe_r = np.where(valid, r, 1.0)
    col = azimuth_column(p[:, 0], p[:, 1], width)
    elev = np.degrees(np.arcsin(np.clip(p[:, 2] / safe_r, -1.0, 1.0)))
    row = (1.0 - (elev + abs(fov.f_down)) / fov.f_v) * height
    pix = np.stack([row, col], axis=1)
    feats, occ, owner, coll = _fill_image(cloud, pix, valid, height, width, r)
    return RangeImage(
        features=feats,
        occupancy=occ,
        pixel_owner=owner,
        point_pixel=pix,
        point_valid=valid,
        skipped=int((~valid).sum()),
        collisions=coll,
    )


def unfold_scan(cloud: PointCloud, beams: int, width: int) -> RangeImage:
    """Build a range image from sensor capture order.

    A new row starts whenever azimuth jumps backwards by more than pi.
    Rows beyond ``beams`` are dropped and counted in ``overflow``.
    """
    if beams < 1 or width < 1:
        raise ValueError("beams and width must be >= 1")
    p = cloud.points[:, :3].astype(np.float64)
    r = np.sqrt((p * p).sum(axis=1))
    nonzero = r > 0
    phi = np.arctan2(p[:, 1], p[:, 0])
    row_idx = np.zeros(len(cloud), dtype=np.int64)
    live = np.flatnonzero(nonzero)
    if live.size > 1:
        jumps = np.diff(phi[live]) < -np.pi
        row_idx[live[1:]] = np.cumsum(jumps)
    inside = row_idx < beams
    valid = nonzero & inside
    pix = np.stack([row_idx + 0.5, azimuth_column(p[:, 0], p[:, 1], width)], axis=1)
    feats, occ, owner, coll = _fill_image(cloud, pix, valid, beams, width, r)
    return RangeImage(
        features=feats,
        occupancy=occ,
        pixel_owner=owner,
        point_pixel=pix,
        point_valid=valid,
        skipped=int((~nonzero).sum()),
        overflow=int((nonzero & ~inside).sum()),
        collisions=coll,
    )


def unproject_features(feature_map: Tensor, image: RangeImage) -> Tensor:
    """Bilinearly sample a D x H x W map at every point's pixel position.

    Invalid points get zero features. Differentiable w.r.t. the map.
    """
    c, h, w = feature_map.shape
    if (h, w) != (image.height, image.width):
        raise ValueError(
            f"feature map is {h}x{w} but range image is {image.height}x{image.width}"
        )
    return sample_points(feature_map, image.point_pixel, image.point_valid)


def sample_points(feature_map: Tensor, point_pixel: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Sample at pixel-space positions (pixel centers sit at +0.5)."""
    coords = np.asarray(point_pixel, dtype=np.float64) - 0.5
    if valid is None or valid.all():
        return ops.bilinear_sample(feature_map, coords)
    coords = np.where(valid[:, None], coords, 0.0)
    out = ops.bilinear_sample(feature_map, coords)
    mask = valid[:, None].astype(feature_map.dtype)
    return ops.mul(out, mask)


def range_preview(image: RangeImage) -> np.ndarray:
    """8-bit normalized range channel (0 for empty pixels)."""
    rng = image.features[0]
    out = np.zeros(rng.shape, dtype=np.uint8)
    if image.occupancy.any():
        vals = rng[image.occupancy]
        lo, hi = float(vals.min()), float(vals.max())
        scale = 254.0 / (hi - lo) if hi > lo else 0.0
        out[image.occupancy] = (1 + np.round((vals - lo) * scale)).astype(np.uint8)
    return out


@dataclass(frozen=True)
class Projector:
    """Turns clouds into range images with fixed settings.

    ``mode`` is ``spherical`` (elevation bins from the field of view) or
    ``unfold`` (rows from capture order).
    """

    height: int
    width: int
    fov: SensorFov = SensorFov()
    mode: str = "spherical"

    def __post_init__(self):
        if self.mode not in ("spherical", "unfold"):
            raise ValueError(f"unknown projection mode {self.mode!r}")

    def __call__(self, cloud: PointCloud) -> RangeImage:
        if self.mode == "unfold":
            return unfold_scan(cloud, self.height, self.width)
        return spherical_project(cloud, self.fov, self.height, self.width)
