"""Optimization: augmentation, crops, AdamW, schedule and freeze masks."""

from .augment import AugmentConfig, Crop, augment, crop_at, flip_y, random_crop, rotate, rotation_matrix, translate
from .freeze import POLICIES, apply_freeze_mask, encoder_group
from .loop import EpochRecord, TrainConfig, TrainResult, evaluate, input_statistics, train
from .optim import AdamW, WarmupCosine, adamw_update, lr_at

__all__ = [
    "POLICIES", "AdamW", "AugmentConfig", "Crop", "EpochRecord", "TrainConfig", "TrainResult", "WarmupCosine",
    "adamw_update", "apply_freeze_mask", "augment", "crop_at", "encoder_group", "evaluate", "flip_y",
    "input_statistics", "lr_at", "random_crop", "rotate", "rotation_matrix", "train", "translate",
]
