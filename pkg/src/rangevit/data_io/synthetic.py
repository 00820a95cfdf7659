"""Analytic LiDAR scenes: a ground plane with boxes, cylinders and poles.

One ray is cast per range-image pixel center, so projecting a scan at its
own beams x width puts every point on its own pixel. Points are emitted
beam by beam with azimuth increasing along each beam, which is the
capture order ``unfold_scan`` expects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..projection import PointCloud, SensorFov

GROUND, BOX, CYLINDER, POLE = 1, 2, 3, 4
CLASS_NAMES = {GROUND: "ground", BOX: "box", CYLINDER: "cylinder", POLE: "pole"}
_BASE_INTENSITY = {GROUND: 0.25, BOX: 0.55, CYLINDER: 0.4, POLE: 0.8}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    yaw: float = 0.0
    label: int = BOX


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder with flat caps."""

    center_xy: tuple[float, float]
    radius: float
    z_min: float
    z_max: float
    label: int = CYLINDER


@dataclass(frozen=True)
class SceneSpec:
    """Object counts, sensor layout and randomness of one scene.

    ``enclosure`` surrounds the sensor with four tall walls (labelled as
    boxes) so that every ray returns a point.
    """

    seed: int = 0
    ground: bool = True
    ground_z: float = -1.73
    num_boxes: int = 4
    num_cylinders: int = 3
    num_poles: int = 4
    enclosure: bool = False
    wall_distance: float = 30.0
    beams: int = 32
    width: int = 256
    fov: SensorFov = field(default_factory=SensorFov)
    max_range: float = 60.0
    intensity_noise: float = 0.05
    min_distance: float = 4.0
    max_distance: float = 22.0

    def __post_init__(self):
        if self.beams < 1 or self.width < 1:
            raise ValueError("beams and width must be >= 1")
        if min(self.num_boxes, self.num_cylinders, self.num_poles) < 0:
            raise ValueError("object counts must be >= 0")
        if not (self.ground or self.enclosure or self.num_boxes or self.num_cylinders or self.num_poles):
            raise ValueError("a scene needs at least one surface")
        if not 0 < self.min_distance < self.max_distance:
            raise ValueError("need 0 < min_distance < max_distance")

    def with_seed(self, seed: int) -> "SceneSpec":
        return replace(self, seed=seed)


@dataclass
class Scan:
    cloud: PointCloud
    rows: np.ndarray  # beam index of each point
    cols: np.ndarray  # azimuth bin of each point
    boxes: list[Box]
    cylinders: list[Cylinder]


def ray_directions(beams: int, width: int, fov: SensorFov) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit directions through every pixel center, in emission order.

    Returns (directions N x 3, rows, cols) with rows top-down and, within a
    row, columns from ``width - 1`` down to 0 (increasing azimuth).
    """
    rows = np.repeat(np.arange(beams), width)
    cols = np.tile(np.arange(width - 1, -1, -1), beams)
    elev = np.radians(fov.f_up - (rows + 0.5) * fov.f_v / beams)
    azim = np.pi * (1.0 - 2.0 * (cols + 0.5) / width)
    dirs = np.stack([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)], axis=1)
    return dirs, rows, cols


# -- intersections (rays start at the origin) -------------------------------------


def hit_plane(dirs: np.ndarray, z: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = z / dirs[:, 2]
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def hit_box(dirs: np.ndarray, box: Box) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    origin = rot @ -np.asarray(box.center, dtype=np.float64)
    d = dirs @ rot.T
    half = np.asarray(box.half_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - origin) / d
        t2 = (half - origin) / d
    # rays parallel to a slab: inside it for all t, or never
    parallel = d == 0
    inside = np.abs(origin) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    near, far = lo.max(axis=1), hi.min(axis=1)
    hit = (near <= far) & (far > 0)
    t = np.where(near > 0, near, far)
    return np.where(hit, t, np.inf)


def hit_cylinder(dirs: np.ndarray, cyl: Cylinder) -> np.ndarray:
    cx, cy = cyl.center_xy
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (cx * dx + cy * dy)
    c = cx * cx + cy * cy - cyl.radius ** 2
    disc = b * b - 4 * a * c
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(np.where(disc >= 0, disc, 0.0))
        for t in ((-b - root) / (2 * a), (-b + root) / (2 * a)):
            z = t * dz
            ok = (disc >= 0) & (a > 0) & (t > 0) & (z >= cyl.z_min) & (z <= cyl.z_max)
            best = np.where(ok & (t < best), t, best)
        for zc in (cyl.z_min, cyl.z_max):
            t = zc / dz
            px, py = t * dx - cx, t * dy - cy
            ok = np.isfinite(t) & (t > 0) & (px * px + py * py <= cyl.radius ** 2)
            best = np.where(ok & (t < best), t, best)
    return best


# -- scene layout ----------------------------------------------------------------


def _place(rng: np.random.Generator, spec: SceneSpec) -> tuple[float, float]:
    dist = rng.uniform(spec.min_distance, spec.max_distance)
    ang = rng.uniform(-np.pi, np.pi)
    return float(dist * math.cos(ang)), float(dist * math.sin(ang))


def scene_objects(spec: SceneSpec) -> tuple[list[Box], list[Cylinder]]:
    rng = np.random.default_rng(spec.seed)
    g = spec.ground_z
    boxes, cylinders = [], []
    for _ in range(spec.num_boxes):
        x, y = _place(rng, spec)
        hx, hy, hz = rng.uniform(0.8, 2.2), rng.uniform(0.8, 1.5), rng.uniform(0.6, 1.3)
        boxes.append(Box((x, y, g + hz), (hx, hy, hz), float(rng.uniform(-np.pi, np.pi))))
    for _ in range(spec.num_cylinders):
        x, y = _place(rng, spec)
        cylinders.append(Cylinder((x, y), float(rng.uniform(0.4, 1.2)), g, g + float(rng.uniform(1.5, 4.0))))
    for _ in range(spec.num_poles):
        x, y = _place(rng, spec)
        cylinders.append(Cylinder((x, y), float(rng.uniform(0.08, 0.2)), g, g + float(rng.uniform(3.0, 7.0)), POLE))
    if spec.enclosure:
        d, thick, height = spec.wall_distance, 0.5, 40.0
        zc = g + height / 2
        for cx, cy, hx, hy in ((d + thick, 0, thick, d + 2 * thick), (-d - thick, 0, thick, d + 2 * thick),
                               (0, d + thick, d + 2 * thick, thick), (0, -d - thick, d + 2 * thick, thick)):
            boxes.append(Box((cx, cy, zc), (hx, hy, height / 2)))
    return boxes, cylinders


def cast_rays(dirs: np.ndarray, spec: SceneSpec, boxes: list[Box], cylinders: list[Cylinder]):
    """Nearest hit distance and label per ray (inf / 0 where nothing is hit)."""
    dist = np.full(len(dirs), np.inf)
    label = np.zeros(len(dirs), dtype=np.int64)

    def take(t, cls):
        closer = t < dist
        dist[closer] = t[closer]
        label[closer] = cls

    if spec.ground:
        take(hit_plane(dirs, spec.ground_z), GROUND)
    for b in boxes:
        take(hit_box(dirs, b), b.label)
    for c in cylinders:
        take(hit_cylinder(dirs, c), c.label)
    miss = dist > spec.max_range
    label[miss] = 0
    dist[miss] = np.inf
    return dist, label


def generate_scan(spec: SceneSpec) -> Scan:
    """Cloud plus the beam row and azimuth bin that produced each point."""
    dirs, rows, cols = ray_directions(spec.beams, spec.width, spec.fov)
    boxes, cylinders = scene_objects(spec)
    dist, label = cast_rays(dirs, spec, boxes, cylinders)
    hit = np.isfinite(dist)
    xyz = dirs[hit] * dist[hit, None]
    labels = label[hit]
    noise_rng = np.random.default_rng([spec.seed, 1])
    base = np.vectorize(_BASE_INTENSITY.get, otypes=[float])(labels) if labels.size else np.zeros(0)
    intensity = np.clip(base + spec.intensity_noise * noise_rng.standard_normal(labels.size), 0.0, 1.0)
    cloud = PointCloud(np.column_stack([xyz, intensity]), labels)
    return Scan(cloud, rows[hit], cols[hit], boxes, cylinders)


def generate_scene(spec: SceneSpec) -> PointCloud:
    return generate_scan(spec).cloud


def generate_dataset(spec: SceneSpec, count: int, first_seed: int | None = None) -> list[PointCloud]:
    """``count`` scenes with consecutive seeds starting at ``first_seed``."""
    start = spec.seed if first_seed is None else first_seed
    return [generate_scene(spec.with_seed(start + i)) for i in range(count)]
