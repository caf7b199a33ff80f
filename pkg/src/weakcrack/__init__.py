"""Weakly-supervised pixel-wise road crack detection.

Image-level crack/road labels train a classifier and a reconstruction
encoder/decoder against each other; the classifier's activation maps, refined
by a dense CRF, become pseudo labels for a pixel detector fed by both
backbones through a directional attention block.
"""

from .config import Config, apply_overrides, load_config, save_resolved, \
    validate_config
from .data import Batch, DatasetManifest, ImageSample, build_weak_dataset, \
    load_manifest, save_manifest, scan_directory
from .errors import CheckpointError, ConfigError, DataError, NumericalError, \
    WeakCrackError
from .pseudo_label import PseudoMask, binarize_and_select, cam_to_unary, \
    mean_field_exact, mean_field_fast, refine_cam
from .training import Trainer, build_models, checkpoint_info, load_for_eval, \
    lr_at

__version__ = "0.1.0"

__all__ = [
    "Batch", "CheckpointError", "Config", "ConfigError", "DataError",
    "DatasetManifest", "ImageSample", "NumericalError", "PseudoMask",
    "Trainer", "WeakCrackError", "apply_overrides", "binarize_and_select",
    "build_models", "build_weak_dataset", "cam_to_unary", "checkpoint_info",
    "load_config",
    "load_for_eval", "load_manifest", "lr_at", "mean_field_exact",
    "mean_field_fast", "refine_cam", "save_manifest", "save_resolved",
    "scan_directory", "validate_config", "__version__",
]
