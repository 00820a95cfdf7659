"""The training loop: batches of random crops, AdamW, metrics and archives."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..autodiff import backward
from ..model import CropPoints, RangeViT
from ..model.config import ConfigError, check_type
from ..model.inference import predict_labels
from ..objective import ConfusionMatrix, miou, total_loss
from ..projection import PointCloud, Projector
from .augment import AugmentConfig, augment, random_crop
from .freeze import apply_freeze_mask, normalize_policy
from .optim import AdamW, WarmupCosine

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
LAST_ARCHIVE = "last.rvwt"
BEST_ARCHIVE = "best.rvwt"
OPTIMIZER_ARCHIVE = "optimizer.rvwt"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_epochs: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    crop_height: int | None = None  # None: take the model's crop size
    crop_width: int | None = None
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    translate_prob: float = 0.5
    finetune_policy: str = "full"
    seed: int = 0
    val_every: int = 1
    val_stride: int | None = None  # None: half the crop width

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if not self.peak_lr > 0:
            raise ConfigError("train.peak_lr", "must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs", f"must lie in [0, epochs={self.epochs})")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"train.{key}", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if self.val_every < 1:
            raise ConfigError("train.val_every", "must be >= 1")
        try:
            AugmentConfig(self.flip_prob, self.rotate_prob, self.translate_prob)
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None
        try:
            normalize_policy(self.finetune_policy)
        except ValueError as exc:
            raise ConfigError("train.finetune_policy", str(exc)) from None

    @property
    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(self.flip_prob, self.rotate_prob, self.translate_prob)

    @property
    def schedule(self) -> WarmupCosine:
        return WarmupCosine(self.peak_lr, self.epochs, self.warmup_epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, prefix: str = "train") -> "TrainConfig":
        defaults = {f.name: f.default for f in fields(cls)}
        for key, value in data.items():
            if key not in defaults:
                raise ConfigError(f"{prefix}.{key}", "unknown key")
            check_type(f"{prefix}.{key}", value, defaults[key])
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_miou: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_miou: float = math.nan
    best_epoch: int | None = None
    out_dir: Path | None = None


def input_statistics(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over occupied pixels of all images."""
    total = None
    count = 0
    for img in images:
        vals = img.features[:, img.occupancy].astype(np.float64)
        s = np.stack([vals.sum(axis=1), (vals * vals).sum(axis=1)])
        total = s if total is None else total + s
        count += vals.shape[1]
    if not count:
        raise ValueError("no occupied pixels to compute input statistics from")
    mean = total[0] / count
    std = np.sqrt(np.maximum(total[1] / count - mean * mean, 0.0))
    return mean, np.where(std > 1e-6, std, 1.0)


def evaluate(model: RangeViT, clouds: list[PointCloud], projector: Projector, stride: int | None = None,
             knn_k: int = 5, knn_window: int = 5) -> tuple[ConfusionMatrix, list[np.ndarray]]:
    """Full-scan predictions and their confusion matrix."""
    k = model.config.num_classes
    stride = stride or max(1, model.config.crop_width // 2)
    cm = ConfusionMatrix.empty(k)
    preds = []
    for cloud in clouds:
        image = projector(cloud)
        pred = predict_labels(image, model, stride, cloud.xyz, cloud.ranges(), knn_k, knn_window)
        preds.append(pred)
        if cloud.labels is not None:
            cm.update(cloud.labels, pred)
    return cm, preds


def _check_dataset(clouds, name: str, k: int) -> None:
    for i, c in enumerate(clouds):
        if c.labels is None:
            raise ValueError(f"{name} scan {i} has no labels")
        if c.labels.size and c.labels.max() > k:
            raise ValueError(f"{name} scan {i} has label {c.labels.max()} but the model predicts {k} classes")


def _write_metrics(path: Path, history: list[EpochRecord]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_miou"])
        for r in history:
            writer.writerow([r.epoch, f"{r.lr:.10g}", f"{r.train_loss:.8f}",
                             "nan" if math.isnan(r.val_miou) else f"{r.val_miou:.6f}"])


def _read_metrics(path: Path) -> list[EpochRecord]:
    with path.open() as fh:
        return [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["val_miou"]))
                for r in csv.DictReader(fh)]


def train(model: RangeViT, dataset: list[PointCloud], config: TrainConfig, projector: Projector,
          val_dataset: list[PointCloud] | None = None, out_dir: str | Path | None = None,
          resume: str | Path | None = None, set_input_stats: bool = True) -> TrainResult:
    """Train ``model`` in place.

    Each epoch draws from its own generator seeded by (seed, epoch), so a
    resumed run continues exactly where an uninterrupted one would be.
    With ``out_dir`` the per-epoch metrics, last-epoch archive,
    best-validation archive and optimizer state are written there.
    """
    from ..data_io.weights import load_model_weights, read_weight_archive, save_model, write_weight_archive

    if not dataset:
        raise ValueError("training dataset is empty")
    cfg = model.config
    if (config.crop_height, config.crop_width) != (None, None) and \
            (config.crop_height, config.crop_width) != (cfg.crop_height, cfg.crop_width):
        raise ConfigError("train.crop_width", f"crop {config.crop_height}x{config.crop_width} differs from the "
                          f"model's {cfg.crop_height}x{cfg.crop_width}")
    if projector.height != cfg.crop_height:
        raise ConfigError("projection.height", f"{projector.height} must equal the crop height {cfg.crop_height}")
    _check_dataset(dataset, "training", cfg.num_classes)
    _check_dataset(val_dataset or [], "validation", cfg.num_classes)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    apply_freeze_mask(model.params, config.finetune_policy)
    opt = AdamW(model.params, (config.beta1, config.beta2), weight_decay=config.weight_decay)
    result = TrainResult(out_dir=out)
    first_epoch = 0
    if resume is not None:
        resume = Path(resume)
        load_model_weights(resume, model)
        opt_path = resume.parent / OPTIMIZER_ARCHIVE
        if opt_path.exists():
            state = read_weight_archive(opt_path)
            opt.load_state_arrays({k: v for k, v in state.items() if k != "epoch"})
            first_epoch = int(state["epoch"][0])
        metrics = resume.parent / METRICS_FILE
        if metrics.exists():
            result.history = _read_metrics(metrics)[:first_epoch]
            scored = [r for r in result.history if not math.isnan(r.val_miou)]
            if scored:
                best = max(scored, key=lambda r: r.val_miou)
                result.best_miou, result.best_epoch = best.val_miou, best.epoch
    elif set_input_stats:
        mean, std = input_statistics(projector(c) for c in dataset)
        model.params.assign("input.mean", mean)
        model.params.assign("input.std", std)

    schedule = config.schedule
    aug = config.augmentation
    n = len(dataset)
    batches_per_epoch = math.ceil(n / config.batch_size)
    stride = config.val_stride or max(1, cfg.crop_width // 2)
    for epoch in range(first_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        model.train()
        losses, weights = [], []
        for b in range(batches_per_epoch):
            lr = schedule(epoch + b / batches_per_epoch)
            crops, points, labels = [], [], []
            for i in order[b * config.batch_size:(b + 1) * config.batch_size]:
                cloud = augment(dataset[i], rng, aug)
                image = projector(cloud)
                crop = random_crop(image, cfg.crop_width, rng)
                crops.append(crop.features)
                points.append(CropPoints(cloud.xyz[crop.point_index], crop.point_pixel))
                labels.append(cloud.labels[crop.point_index])
            target = np.concatenate(labels)
            if not (target > 0).any():
                log.warning("epoch %d batch %d has no labelled points; skipped", epoch, b)
                continue
            model.params.zero_grad()
            loss = total_loss(model.forward_batch(np.stack(crops), points), target)
            backward(loss)
            opt.step(lr)
            losses.append(loss.item())
            weights.append(int((target > 0).sum()))
        train_loss = float(np.average(losses, weights=weights)) if losses else math.nan
        val = math.nan
        if val_dataset and ((epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs):
            cm, _ = evaluate(model, val_dataset, projector, stride)
            val = miou(cm)[1]
        record = EpochRecord(epoch + 1, schedule(epoch), train_loss, val)
        result.history.append(record)
        log.info("epoch %d lr %.3g loss %.4f val mIoU %.4f", record.epoch, record.lr, train_loss, val)
        improved = not math.isnan(val) and (math.isnan(result.best_miou) or val > result.best_miou)
        if improved:
            result.best_miou, result.best_epoch = val, epoch + 1
        if out is not None:
            _write_metrics(out / METRICS_FILE, result.history)
            save_model(out / LAST_ARCHIVE, model)
            if improved:
                save_model(out / BEST_ARCHIVE, model)
            state = opt.state_arrays()
            state["epoch"] = np.array([epoch + 1], dtype=np.float32)
            write_weight_archive(out / OPTIMIZER_ARCHIVE, state)
    model.eval()
    return result
