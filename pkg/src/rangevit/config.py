"""Run configuration files (JSON).

Top-level sections::

    {
      "model":      {"preset": "toy" | "vit_small", ...ModelConfig fields},
      "train":      {...TrainConfig fields},
      "sensor":     {"f_up": 10.0, "f_down": -30.0},
      "projection": {"mode": "spherical" | "unfold", "height": 32, "width": 2048},
      "data":       {"scene": {...}} or {"paths": {...}},
      "inference":  {"stride": 192, "postprocess": "refiner" | "knn", "knn_k": 5, "knn_window": 5},
      "classes":    {"names": {"1": "ground", ...}, "map": {"40": 1, ...}}
    }

``data.scene`` holds SceneSpec fields plus ``train_scans``, ``val_scans``
and ``val_first_seed``. ``data.paths`` maps split names (``train``,
``val``) to lists of ``{"scan": ..., "labels": ...}`` entries; relative
paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from .data_io import SceneSpec, generate_dataset, read_labels, read_point_cloud
from .data_io.synthetic import CLASS_NAMES
from .model import ConfigError, ModelConfig
from .model.config import check_type
from .projection import PointCloud, Projector, SensorFov
from .trainer import TrainConfig

SECTIONS = ("model", "train", "sensor", "projection", "data", "inference", "classes")
SPLITS = ("train", "val")


def _section(data: dict, key: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected an object, got {type(value).__name__}")
    return value


def _fields_from(cls, data: dict, prefix: str, extra: dict | None = None) -> dict:
    """Type-checked keyword arguments for dataclass ``cls``."""
    defaults = {f.name: None if f.default is MISSING else f.default for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if extra is not None and key in extra:
            continue
        if key not in defaults:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        check_type(f"{prefix}.{key}", value, defaults[key])
        out[key] = value
    return out


@dataclass(frozen=True)
class ScanSource:
    scan: Path
    labels: Path | None = None

    @property
    def name(self) -> str:
        return self.scan.stem


@dataclass(frozen=True)
class SceneSource:
    spec: SceneSpec
    train_scans: int = 8
    val_scans: int = 0
    val_first_seed: int = 1000


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    sensor: SensorFov
    projection: Projector
    scene: SceneSource | None = None
    paths: dict[str, list[ScanSource]] | None = None
    stride: int = 0
    postprocess: str = "refiner"
    knn_k: int = 5
    knn_window: int = 5
    class_names: dict[int, str] = field(default_factory=dict)
    class_map: dict[int, int] | None = None

    # -- datasets ------------------------------------------------------------
    def split_names(self, split: str) -> list[str]:
        if self.scene is not None:
            count, first = self._scene_range(split)
            return [f"scene_{first + i:05d}" for i in range(count)]
        return [s.name for s in (self.paths or {}).get(split, [])]

    def _scene_range(self, split: str) -> tuple[int, int]:
        src = self.scene
        if split == "train":
            return src.train_scans, src.spec.seed
        return src.val_scans, src.val_first_seed

    def load_split(self, split: str) -> list[PointCloud]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if self.scene is not None:
            count, first = self._scene_range(split)
            return generate_dataset(self.scene.spec, count, first)
        clouds = []
        for src in (self.paths or {}).get(split, []):
            cloud = read_point_cloud(src.scan)
            if src.labels is not None:
                cloud = PointCloud(cloud.points, read_labels(src.labels, len(cloud), self.class_map))
            clouds.append(cloud)
        return clouds


def _parse_model(data: dict) -> ModelConfig:
    data = dict(data)
    preset = data.pop("preset", "vit_small")
    if preset not in ("toy", "vit_small"):
        raise ConfigError("model.preset", f"unknown preset {preset!r} (toy or vit_small)")
    base = (ModelConfig.toy() if preset == "toy" else ModelConfig.vit_small()).to_dict()
    base.update(_fields_from(ModelConfig, data, "model"))
    return ModelConfig.from_dict(base)


def _parse_paths(data, base_dir: Path) -> dict[str, list[ScanSource]]:
    if not isinstance(data, dict):
        raise ConfigError("data.paths", "expected an object of splits")
    out = {}
    for split, entries in data.items():
        key = f"data.paths.{split}"
        if split not in SPLITS:
            raise ConfigError(key, f"unknown split (expected one of {', '.join(SPLITS)})")
        if not isinstance(entries, list):
            raise ConfigError(key, "expected a list of scans")
        sources = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "scan" not in entry:
                raise ConfigError(f"{key}[{i}]", 'expected {"scan": ..., "labels": ...}')
            unknown = set(entry) - {"scan", "labels"}
            if unknown:
                raise ConfigError(f"{key}[{i}].{sorted(unknown)[0]}", "unknown key")
            labels = entry.get("labels")
            sources.append(ScanSource(base_dir / entry["scan"], None if labels is None else base_dir / labels))
        out[split] = sources
    if not out.get("train") and not out.get("val"):
        raise ConfigError("data.paths", "no scans listed")
    return out


def _parse_scene(data, sensor: SensorFov, projection: dict) -> SceneSource:
    if not isinstance(data, dict):
        raise ConfigError("data.scene", "expected an object")
    extra = {"train_scans": 8, "val_scans": 0, "val_first_seed": 1000}
    for key, default in extra.items():
        if key in data:
            check_type(f"data.scene.{key}", data[key], default)
            if data[key] < 0:
                raise ConfigError(f"data.scene.{key}", "must be >= 0")
    kwargs = _fields_from(SceneSpec, data, "data.scene", extra)
    if "fov" in kwargs:
        raise ConfigError("data.scene.fov", "set the field of view in the sensor section")
    kwargs.setdefault("beams", projection.get("height", SceneSpec.beams))
    kwargs.setdefault("width", projection.get("width", SceneSpec.width))
    try:
        spec = SceneSpec(fov=sensor, **kwargs)
    except ValueError as exc:
        raise ConfigError("data.scene", str(exc)) from None
    return SceneSource(spec, **{k: data.get(k, v) for k, v in extra.items()})


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    model = _parse_model(_section(data, "model"))
    train = TrainConfig.from_dict(_section(data, "train"))

    sensor_cfg = _fields_from(SensorFov, _section(data, "sensor"), "sensor")
    try:
        sensor = SensorFov(**sensor_cfg)
    except ValueError as exc:
        raise ConfigError("sensor", str(exc)) from None

    proj = _section(data, "projection")
    for key in proj:
        if key not in ("mode", "height", "width"):
            raise ConfigError(f"projection.{key}", "unknown key")
    mode = proj.get("mode", "spherical")
    if mode not in ("spherical", "unfold"):
        raise ConfigError("projection.mode", f"unknown mode {mode!r} (spherical or unfold)")
    height = proj.get("height", model.crop_height)
    width = proj.get("width", 2048)
    for key, value in (("height", height), ("width", width)):
        check_type(f"projection.{key}", value, 1)
        if value < 1:
            raise ConfigError(f"projection.{key}", "must be >= 1")
    if height != model.crop_height:
        raise ConfigError("projection.height", f"{height} must equal model.crop_height {model.crop_height}")
    if width < model.crop_width:
        raise ConfigError("projection.width", f"{width} is narrower than model.crop_width {model.crop_width}")
    projector = Projector(height, width, sensor, mode)

    ds = _section(data, "data")
    unknown = set(ds) - {"scene", "paths"}
    if unknown:
        raise ConfigError(f"data.{sorted(unknown)[0]}", "unknown key")
    if ("scene" in ds) == ("paths" in ds):
        raise ConfigError("data", "give exactly one dataset source: scene or paths")
    scene = _parse_scene(ds["scene"], sensor, proj) if "scene" in ds else None
    paths = _parse_paths(ds["paths"], base_dir) if "paths" in ds else None

    inf = _section(data, "inference")
    for key in inf:
        if key not in ("stride", "postprocess", "knn_k", "knn_window"):
            raise ConfigError(f"inference.{key}", "unknown key")
    stride = inf.get("stride", max(1, model.crop_width // 2))
    check_type("inference.stride", stride, 1)
    if not 1 <= stride <= model.crop_width:
        raise ConfigError("inference.stride", f"must lie in [1, crop_width={model.crop_width}]")
    postprocess = inf.get("postprocess", "refiner" if model.use_refiner else "knn")
    if postprocess not in ("refiner", "knn"):
        raise ConfigError("inference.postprocess", f"unknown mode {postprocess!r} (refiner or knn)")
    if postprocess == "knn" and model.use_refiner:
        raise ConfigError("inference.postprocess", "knn post-processing requires model.use_refiner = false")
    if postprocess == "refiner" and not model.use_refiner:
        raise ConfigError("inference.postprocess", "refiner post-processing needs model.use_refiner = true")
    knn_k, knn_window = inf.get("knn_k", 5), inf.get("knn_window", 5)
    check_type("inference.knn_k", knn_k, 1)
    check_type("inference.knn_window", knn_window, 1)
    if knn_k < 1:
        raise ConfigError("inference.knn_k", "must be >= 1")
    if knn_window < 1 or knn_window % 2 == 0:
        raise ConfigError("inference.knn_window", "must be a positive odd number")

    classes = _section(data, "classes")
    unknown = set(classes) - {"names", "map"}
    if unknown:
        raise ConfigError(f"classes.{sorted(unknown)[0]}", "unknown key")
    names = dict(CLASS_NAMES) if scene is not None else {}
    names.update(_int_keys(classes.get("names", {}), "classes.names", str))
    class_map = _int_keys(classes["map"], "classes.map", int) if "map" in classes else None
    if class_map is not None:
        bad = [k for k, v in class_map.items() if not 0 <= v <= model.num_classes]
        if bad:
            raise ConfigError(f"classes.map.{bad[0]}", f"target must lie in [0, {model.num_classes}]")

    return RunConfig(model, train, sensor, projector, scene, paths, stride, postprocess, knn_k, knn_window,
                     names, class_map)


def _int_keys(data, key: str, value_type) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(key, "expected an object")
    out = {}
    for k, v in data.items():
        try:
            ik = int(k)
        except ValueError:
            raise ConfigError(f"{key}.{k}", "keys must be integer class ids") from None
        if not isinstance(v, value_type) or isinstance(v, bool):
            raise ConfigError(f"{key}.{k}", f"expected {value_type.__name__}")
        out[ik] = v
    return out


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return parse_config(data, path.parent)
