"""File formats, weight archives and the synthetic scene generator."""

from .formats import (
    FormatError,
    read_labels,
    read_pgm,
    read_point_cloud,
    read_range_image,
    write_iou_csv,
    write_labels,
    write_pgm,
    write_point_cloud,
    write_range_image,
)
from .synthetic import CLASS_NAMES, SceneSpec, generate_dataset, generate_scan, generate_scene
from .weights import (
    ImportReport,
    load_model_weights,
    load_name_map,
    load_pretrained,
    read_weight_archive,
    resample_pos_embed,
    save_model,
    write_weight_archive,
)

__all__ = [
    "CLASS_NAMES", "FormatError", "ImportReport", "SceneSpec", "generate_dataset", "generate_scan",
    "generate_scene", "load_model_weights", "load_name_map", "load_pretrained", "read_labels", "read_pgm",
    "read_point_cloud", "read_range_image", "read_weight_archive", "resample_pos_embed", "save_model",
    "write_iou_csv", "write_labels", "write_pgm", "write_point_cloud", "write_range_image",
    "write_weight_archive",
]
