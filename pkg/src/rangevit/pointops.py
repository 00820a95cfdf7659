"""Operations on raw 3D points: radius search, KPConv, K-NN label voting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Tensor
from .projection import RangeImage

NUM_KERNEL_POINTS = 15
INFLUENCE_RADIUS = 1.2
MAX_NEIGHBORS = 32


@dataclass(frozen=True)
class NeighborIndex:
    """Per-query neighbor lists, nearest first, padded with -1."""

    indices: np.ndarray  # Q x max_neighbors int64
    counts: np.ndarray  # Q int64

    def lists(self) -> list[np.ndarray]:
        return [row[:n] for row, n in zip(self.indices, self.counts)]


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise ValueError(f"{name} row {bad} is not finite")


def radius_neighbors(coords: np.ndarray, queries: np.ndarray, radius: float,
                     max_neighbors: int = MAX_NEIGHBORS) -> NeighborIndex:
    """All points within ``radius`` of each query (ties broken by index).

    Uses a uniform grid with cell size ``radius``; when more than
    ``max_neighbors`` qualify, the nearest ones are kept.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    _check_finite("coords", coords)
    _check_finite("queries", queries)
    idx, counts = _kernels.radius_search(coords, queries, float(radius), int(max_neighbors))
    return NeighborIndex(idx, counts)


def fibonacci_sphere(n: int, radius: float) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(1.0 - z * z)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@dataclass
class KernelDisposition:
    """Kernel point offsets (meters) and the correlation falloff distance.

    Point 0 sits at the origin, the rest on a sphere of radius
    ``0.6 * sigma``.
    """

    kernel_points: np.ndarray
    sigma: float = INFLUENCE_RADIUS

    def __post_init__(self):
        self.kernel_points = np.asarray(self.kernel_points, dtype=np.float64)
        if not np.allclose(self.kernel_points[0], 0.0):
            raise ValueError("kernel point 0 must be the origin")
        if np.any(np.linalg.norm(self.kernel_points, axis=1) > self.sigma + 1e-12):
            raise ValueError("kernel points must lie within sigma of the origin")

    @classmethod
    def default(cls, n: int = NUM_KERNEL_POINTS, sigma: float = INFLUENCE_RADIUS) -> "KernelDisposition":
        pts = np.vstack([np.zeros((1, 3)), fibonacci_sphere(n - 1, 0.6 * sigma)])
        return cls(pts, sigma)

    @property
    def size(self) -> int:
        return self.kernel_points.shape[0]

    def influences(self, coords: np.ndarray, neighbors: NeighborIndex) -> np.ndarray:
        """Linear correlation h = max(0, 1 - |y - p_k| / sigma), N x nb x K.

        Padded neighbor slots get zero weight.
        """
        coords = np.asarray(coords, dtype=np.float64)
        idx = neighbors.indices
        rel = coords[np.maximum(idx, 0)] - coords[:, None, :]
        diff = rel[:, :, None, :] - self.kernel_points[None, None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        h = np.maximum(0.0, 1.0 - dist / self.sigma)
        h[idx < 0] = 0.0
        return h


def kpconv(features: Tensor, weights: Tensor, neighbors: NeighborIndex, influences: np.ndarray) -> Tensor:
    """Kernel point convolution.

    ``out[q] = sum_n sum_k h[q, n, k] * (f[n] @ W[k])`` with ``weights``
    shaped (K, D_in, D_out). Differentiable w.r.t. features and weights.
    """
    fd, wd = features.data, weights.data
    n_pts, d_in = fd.shape
    k, w_in, d_out = wd.shape
    if w_in != d_in:
        raise ValueError(f"kpconv: features have {d_in} channels, weights expect {w_in}")
    idx = neighbors.indices
    if idx.shape[0] != n_pts:
        raise ValueError(f"kpconv: {idx.shape[0]} neighbor rows for {n_pts} points")
    h = influences.astype(fd.dtype, copy=False)
    if n_pts == 0:
        return Tensor.from_op(np.zeros((0, d_out), dtype=fd.dtype), (features, weights),
                              lambda g: (np.zeros_like(fd), np.zeros_like(wd)))
    padded = np.vstack([fd, np.zeros((1, d_in), dtype=fd.dtype)])
    gathered = padded[np.where(idx < 0, n_pts, idx)]  # N x nb x D_in
    blended = np.matmul(np.swapaxes(h, 1, 2), gathered)  # N x K x D_in
    flat = blended.reshape(n_pts, k * d_in)
    wflat = wd.reshape(k * d_in, d_out)
    out = flat @ wflat

    def back(g):
        gf = gw = None
        if weights.requires_grad:
            gw = (flat.T @ g).reshape(wd.shape)
        if features.requires_grad:
            gblend = (g @ wflat.T).reshape(n_pts, k, d_in)
            ggath = np.matmul(h, gblend)  # N x nb x D_in
            gf = np.zeros_like(fd)
            _kernels.scatter_add_rows(gf, idx.reshape(-1), ggath.reshape(-1, d_in))
        return gf, gw

    return Tensor.from_op(out, (features, weights), back)


def knn_postprocess(pixel_labels: np.ndarray, image: RangeImage, point_range: np.ndarray, k: int = 5,
                    window: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Re-label points by a range-weighted vote among nearby pixels.

    For each point, occupied pixels inside the ``window`` x ``window``
    neighborhood of its pixel are ranked by ``|r_point - r_pixel|``; the k
    closest vote with weight ``exp(-d^2 / 2 sigma^2)``. Votes within a
    relative 1e-9 of the best are ties, won by the lowest label. A point
    with no occupied candidate keeps its own pixel's label.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd number")
    pixel_labels = np.asarray(pixel_labels, dtype=np.int64)
    if pixel_labels.shape != (image.height, image.width):
        raise ValueError("pixel label grid does not match the range image")
    rc = image.integer_pixels()
    num_labels = int(pixel_labels.max(initial=0)) + 1
    return _kernels.knn_vote(
        rc[:, 0].copy(), rc[:, 1].copy(), np.asarray(point_range, dtype=np.float64),
        image.features[0].astype(np.float64), image.occupancy, pixel_labels,
        int(k), int(window), float(sigma), num_labels,
    )
