"""Weight archives and import of externally trained ViT encoders.

Archive layout (little-endian)::

    b"RVWT1\\n"
    u32 entry count
    per entry: u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
               u32 payload offset, u32 CRC-32 of the entry's payload bytes
    payload: float32 values of every entry, back to back

Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..autodiff import ops
from ..model import ParamStore, RangeViT
from .formats import FormatError, PathLike

MAGIC = b"RVWT1\n"
_U32 = struct.Struct("<I")


def write_weight_archive(path: PathLike, tensors: dict[str, np.ndarray] | ParamStore) -> None:
    if isinstance(tensors, ParamStore):
        tensors = tensors.arrays()
    header = [MAGIC, _U32.pack(len(tensors))]
    payload = []
    offset = 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        encoded = name.encode("utf-8")
        shape = np.shape(value)
        header.append(_U32.pack(len(encoded)) + encoded + _U32.pack(len(shape)))
        header.append(b"".join(_U32.pack(d) for d in shape))
        header.append(_U32.pack(offset) + _U32.pack(zlib.crc32(data)))
        payload.append(data)
        offset += len(data)
    Path(path).write_bytes(b"".join(header) + b"".join(payload))


def read_weight_archive(path: PathLike) -> dict[str, np.ndarray]:
    """Entries in file order as float32 arrays."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(path, 0, "bad magic (not a weight archive)")
    pos = len(MAGIC)

    def u32():
        nonlocal pos
        if pos + 4 > len(raw):
            raise FormatError(path, pos, "truncated header")
        (v,) = _U32.unpack_from(raw, pos)
        pos += 4
        return v

    count = u32()
    entries = []
    seen = set()
    for _ in range(count):
        entry_at = pos
        n = u32()
        if pos + n > len(raw):
            raise FormatError(path, pos, "truncated entry name")
        try:
            name = raw[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(path, pos, "entry name is not valid UTF-8") from None
        pos += n
        if name in seen:
            raise FormatError(path, entry_at, f"duplicate entry {name!r}")
        seen.add(name)
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        offset, crc = u32(), u32()
        entries.append((name, shape, offset, crc, entry_at))
    payload_start = pos
    payload_len = len(raw) - payload_start
    out = {}
    expected = 0
    for name, shape, offset, crc, entry_at in entries:
        nbytes = 4 * math.prod(shape)
        if offset != expected:
            raise FormatError(path, entry_at, f"{name}: payload offset {offset} overlaps or leaves a gap (expected {expected})")
        if offset + nbytes > payload_len:
            raise FormatError(path, payload_start + offset, f"{name}: truncated payload")
        chunk = raw[payload_start + offset: payload_start + offset + nbytes]
        if zlib.crc32(chunk) != crc:
            raise FormatError(path, payload_start + offset, f"{name}: checksum mismatch")
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        expected = offset + nbytes
    if expected != payload_len:
        raise FormatError(path, payload_start + expected, f"{payload_len - expected} unexpected trailing payload bytes")
    return out


def save_model(path: PathLike, model: RangeViT) -> None:
    write_weight_archive(path, model.params)


def load_model_weights(path: PathLike, model: RangeViT, strict: bool = True) -> list[str]:
    """Overwrite parameters and buffers from an archive; returns missing names."""
    arrays = read_weight_archive(path)
    store = model.params
    targets = store.arrays()
    unknown = [k for k in arrays if k not in targets]
    missing = [k for k in targets if k not in arrays]
    if strict and (unknown or missing):
        raise ValueError(f"archive does not match the model: unknown {unknown[:5]}, missing {missing[:5]}")
    for k, v in arrays.items():
        if k in targets:
            store.assign(k, v)
    return missing


# -- import of external encoders ------------------------------------------------


def load_name_map(path: PathLike | None = None) -> list[tuple[str, str]]:
    """Two whitespace-separated columns per line: external name, internal name.

    ``{i}`` in both columns stands for a block index. ``#`` starts a comment.
    """
    if path is None:
        text = resources.files(__package__).joinpath("vit_names.txt").read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) != 2:
            raise ValueError(f"name map line {lineno}: expected two columns, got {len(cols)}")
        rows.append((cols[0], cols[1]))
    return rows


def _translate(name: str, name_map: list[tuple[str, str]], depth: int) -> str | None:
    for ext, internal in name_map:
        if "{i}" not in ext:
            if name == ext:
                return internal
            continue
        head, tail = ext.split("{i}")
        if name.startswith(head) and name.endswith(tail):
            idx = name[len(head): len(name) - len(tail)]
            if idx.isdigit() and int(idx) < depth:
                return internal.replace("{i}", idx)
    return None


def _split_grid(rows: int, has_cls_hint: bool | None = None) -> tuple[bool, int, int] | None:
    """Guess (has class row, grid h, grid w) for a square source grid."""
    for cls in ((True, False) if has_cls_hint is None else (has_cls_hint,)):
        n = rows - int(cls)
        side = math.isqrt(n) if n > 0 else 0
        if side * side == n and n > 0:
            return cls, side, side
    return None


def resample_grid(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (h, w, D) grid with half-pixel alignment."""
    h, w, d = grid.shape
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    idx, wts = ops.bilinear_weights(coords, h, w)
    flat = grid.reshape(h * w, d).astype(np.float64)
    return np.einsum("nk,nkd->nd", wts, flat[idx]).reshape(height, width, d)


def resample_pos_embed(source: np.ndarray, grid_height: int, grid_width: int, use_class_token: bool,
                       source_grid: tuple[int, int] | None = None,
                       target_cls_row: np.ndarray | None = None) -> np.ndarray:
    """Map a positional-embedding table onto a new token grid.

    The class-token row (when both sides have one) is copied unchanged.
    ``source_grid`` is needed for non-square source grids.
    """
    src = np.asarray(source).reshape(-1, np.shape(source)[-1])
    d = src.shape[1]
    if source_grid is not None:
        gh, gw = source_grid
        extra = src.shape[0] - gh * gw
        if extra not in (0, 1):
            raise ValueError(f"pos_embed has {src.shape[0]} rows, incompatible with a {gh}x{gw} grid")
        has_cls = bool(extra)
    else:
        guess = _split_grid(src.shape[0])
        if guess is None:
            raise ValueError(f"cannot infer the grid of a {src.shape[0]}-row positional embedding")
        has_cls, gh, gw = guess
    cls_row = src[:1] if has_cls else None
    grid = src[int(has_cls):].reshape(gh, gw, d)
    resized = grid.reshape(-1, d) if (gh, gw) == (grid_height, grid_width) else \
        resample_grid(grid, grid_height, grid_width).reshape(-1, d)
    if not use_class_token:
        return resized
    if cls_row is None:
        cls_row = np.zeros((1, d)) if target_cls_row is None else np.asarray(target_cls_row).reshape(1, d)
    return np.vstack([cls_row, resized])


@dataclass
class ImportReport:
    copied: list[str] = field(default_factory=list)
    resampled: list[str] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)  # archive names with no encoder target
    missing: list[str] = field(default_factory=list)  # encoder parameters left at their init


def load_pretrained(source: PathLike | dict[str, np.ndarray], model: RangeViT, policy: str = "full",
                    name_map: list[tuple[str, str]] | None = None,
                    source_grid: tuple[int, int] | None = None) -> ImportReport:
    """Copy encoder weights into ``model`` and apply a fine-tuning policy.

    Archive names are either internal encoder names or external names
    translated through ``name_map`` (the bundled ViT table by default).
    Only ``encoder.*`` parameters are touched. Raises when a tensor's
    size cannot be reconciled.
    """
    from ..trainer.freeze import apply_freeze_mask

    arrays = read_weight_archive(source) if not isinstance(source, dict) else source
    cfg = model.config
    name_map = load_name_map() if name_map is None else name_map
    store = model.params
    report = ImportReport()
    done = set()
    for name, value in arrays.items():
        target = name if name.startswith("encoder.") else _translate(name, name_map, cfg.depth)
        if target is None or target not in store:
            report.unmatched.append(name)
            continue
        current = store[target].data
        value = np.asarray(value)
        if target == "encoder.pos_embed":
            if value.size == current.size:
                store.assign(target, value.reshape(current.shape))
                report.copied.append(target)
            else:
                cls_init = current[:1] if cfg.use_class_token else None
                store.assign(target, resample_pos_embed(value, cfg.grid_height, cfg.grid_width,
                                                        cfg.use_class_token, source_grid, cls_init))
                report.resampled.append(target)
        else:
            if value.size != current.size:
                raise ValueError(f"{name} -> {target}: shape {value.shape} does not fit {current.shape}")
            store.assign(target, value.reshape(current.shape))
            report.copied.append(target)
        done.add(target)
    report.missing = [k for k in store.names() if k.startswith("encoder.") and k not in done]
    apply_freeze_mask(store, policy)
    return report
