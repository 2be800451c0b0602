"""Slice-scan selective state space networks for 2-D segmentation, with slice-combination search."""
from .errors import SliceScanError
from .network import ModelConfig, SliceScanNet, build_model, desk_config, full_config, tiny_config
from .scan_geometry import SliceConfig, build_slice_plan, restore_merge

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "SliceConfig",
    "SliceScanNet",
    "SliceScanError",
    "build_model",
    "build_slice_plan",
    "desk_config",
    "full_config",
    "restore_merge",
    "tiny_config",
]
