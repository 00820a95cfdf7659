"""The segmentation network, its configuration and parameter storage."""

from .config import ConfigError, ModelConfig
from .inference import infer_full_scan, window_starts
from .network import CropPoints, RangeViT, count_params, layout, param_breakdown
from .params import ParamSpec, ParamStore

__all__ = [
    "ConfigError",
    "CropPoints",
    "ModelConfig",
    "ParamSpec",
    "ParamStore",
    "RangeViT",
    "count_params",
    "infer_full_scan",
    "layout",
    "param_breakdown",
    "window_starts",
]
