"""Multimodal (RGB, thermal, LIDAR) semantic segmentation toolkit.

Modules: geometry (projection, densification, remapping), sync (stream
pairing), dataio (dataset layout, synthetic scenes, splits), model (the
two-branch network), training (composed loss and double-pass steps),
evaluation (IoU metrics and ablations), figures (report renderings),
config and cli.
"""

__version__ = "0.1.0"

from .dataio import FrameBundle, SyntheticSceneParams, synthesize_frame
from .geometry import CameraModel, DenseDepth, Extrinsics, PointCloud, SparseDepth
from .model import ModelConfig, Params, PredictionSet, forward, init_params, predict
from .training import LossBreakdown, TrainConfig, grad_check, train

__all__ = [
    "CameraModel", "DenseDepth", "Extrinsics", "FrameBundle", "LossBreakdown",
    "ModelConfig", "Params", "PointCloud", "PredictionSet", "SparseDepth",
    "SyntheticSceneParams", "TrainConfig", "forward", "grad_check",
    "init_params", "predict", "synthesize_frame", "train",
]
