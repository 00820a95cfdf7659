"""Binary readers and writers. Everything is little-endian."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..projection import NUM_FEATURES, PointCloud, RangeImage

PathLike = str | os.PathLike

RANGE_IMAGE_MAGIC = b"RVRI1\n"
LABEL_MASK = 0xFFFF


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the fault."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


# -- point clouds -------------------------------------------------------------


def read_point_cloud(path: PathLike) -> PointCloud:
    """Float32 quadruples (x, y, z, intensity), 16 bytes per point."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(path, len(raw) - len(raw) % 16,
                          f"length {len(raw)} is not a multiple of 16 (trailing partial point)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise FormatError(path, 16 * bad, f"point {bad} has non-finite values")
    return PointCloud(pts.astype(np.float32))


def write_point_cloud(path: PathLike, cloud: PointCloud) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


# -- labels ---------------------------------------------------------------------


def read_labels(path: PathLike, num_points: int, class_map: dict[int, int] | None = None) -> np.ndarray:
    """One uint32 per point; the semantic id is the low 16 bits.

    With ``class_map`` the raw ids are translated (ids missing from the
    map are an error); without it they are returned as-is.
    """
    raw = Path(path).read_bytes()
    if len(raw) != 4 * num_points:
        raise FormatError(path, min(len(raw), 4 * num_points),
                          f"expected {4 * num_points} bytes for {num_points} labels, found {len(raw)}")
    ids = (np.frombuffer(raw, dtype="<u4") & LABEL_MASK).astype(np.int64)
    if class_map is None:
        return ids
    lut_keys = np.array(sorted(class_map), dtype=np.int64)
    known = np.isin(ids, lut_keys)
    if not known.all():
        missing = sorted(set(ids[~known].tolist()))
        first = int(np.flatnonzero(~known)[0])
        raise FormatError(path, 4 * first, f"class ids {missing} are not in the class map")
    lut = np.zeros(int(lut_keys.max()) + 1, dtype=np.int64)
    for k, v in class_map.items():
        lut[k] = v
    return lut[ids]


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint32).max):
        raise ValueError("labels must fit in uint32")
    Path(path).write_bytes(labels.astype("<u4").tobytes())


# -- range images ------------------------------------------------------------------

_RI_HEADER = struct.Struct("<6I")  # channels, height, width, points, skipped, overflow
_RI_COLLISIONS = struct.Struct("<I")


def write_range_image(path: PathLike, image: RangeImage) -> None:
    """Features, occupancy, owners and the point correspondence."""
    c, h, w = image.features.shape
    n = image.num_points
    parts = [
        RANGE_IMAGE_MAGIC,
        _RI_HEADER.pack(c, h, w, n, image.skipped, image.overflow),
        _RI_COLLISIONS.pack(image.collisions),
        image.features.astype("<f4").tobytes(),
        image.occupancy.astype(np.uint8).tobytes(),
        image.pixel_owner.astype("<i8").tobytes(),
        image.point_pixel.astype("<f8").tobytes(),
        image.point_valid.astype(np.uint8).tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_range_image(path: PathLike) -> RangeImage:
    raw = Path(path).read_bytes()
    if not raw.startswith(RANGE_IMAGE_MAGIC):
        raise FormatError(path, 0, "bad magic")
    pos = len(RANGE_IMAGE_MAGIC)
    header_end = pos + _RI_HEADER.size + _RI_COLLISIONS.size
    if len(raw) < header_end:
        raise FormatError(path, len(raw), "truncated header")
    c, h, w, n, skipped, overflow = _RI_HEADER.unpack_from(raw, pos)
    (collisions,) = _RI_COLLISIONS.unpack_from(raw, pos + _RI_HEADER.size)
    if c != NUM_FEATURES:
        raise FormatError(path, pos, f"expected {NUM_FEATURES} channels, header says {c}")
    pos = header_end
    sizes = [("features", "<f4", (c, h, w)), ("occupancy", "u1", (h, w)), ("pixel_owner", "<i8", (h, w)),
             ("point_pixel", "<f8", (n, 2)), ("point_valid", "u1", (n,))]
    arrays = {}
    for name, dtype, shape in sizes:
        nbytes = int(np.dtype(dtype).itemsize * np.prod(shape))
        if pos + nbytes > len(raw):
            raise FormatError(path, len(raw), f"truncated {name} block (needs {nbytes} bytes at {pos})")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise FormatError(path, pos, f"{len(raw) - pos} unexpected trailing bytes")
    return RangeImage(
        features=arrays["features"].astype(np.float32),
        occupancy=arrays["occupancy"].astype(bool),
        pixel_owner=arrays["pixel_owner"].astype(np.int64),
        point_pixel=arrays["point_pixel"].astype(np.float64),
        point_valid=arrays["point_valid"].astype(bool),
        skipped=skipped,
        overflow=overflow,
        collisions=collisions,
    )


# -- previews -------------------------------------------------------------------


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, pos, "truncated PGM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError(path, 0, "not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(path, pos, f"only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace before the raster
    if len(raw) - pos != w * h:
        raise FormatError(path, pos, f"raster has {len(raw) - pos} bytes, expected {w * h}")
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w).copy()


# -- evaluation output -----------------------------------------------------------


def write_iou_csv(path: PathLike, per_class: np.ndarray, mean: float, names: dict[int, str]) -> None:
    """``class_id,name,iou`` per class, then ``mean,,value``."""
    lines = ["class_id,name,iou"]
    for k, iou in enumerate(per_class, start=1):
        lines.append(f"{k},{names.get(k, '')},{'nan' if np.isnan(iou) else f'{iou:.6f}'}")
    lines.append(f"mean,,{'nan' if np.isnan(mean) else f'{mean:.6f}'}")
    Path(path).write_text("\n".join(lines) + "\n")
