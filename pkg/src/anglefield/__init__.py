"""Point-cloud normal estimation with neural angle fields."""

from .geometry import (KdIndex, LabeledCloud, Patch, angle_offset, build_index,
                       extract_patch, sample_sphere_uniform, unoriented_rmse)
from .inference import InferConfig, estimate_normal, estimate_normals
from .neural import AngleFieldModel, forward, init_model, load_model, save_model
from .pipeline import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AngleFieldModel", "InferConfig", "KdIndex", "LabeledCloud", "Patch", "TrainConfig",
    "angle_offset", "build_index", "estimate_normal", "estimate_normals", "extract_patch",
    "forward", "init_model", "load_model", "sample_sphere_uniform", "save_model", "train",
    "unoriented_rmse",
]
