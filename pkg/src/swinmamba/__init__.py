"""Serpentine-window state-space segmentation for thin curvilinear structures."""

__version__ = "0.1.0"

from .network import PRESETS, ModelConfig, SegmentationModel, build_model, segmentation_loss
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "PRESETS",
    "ModelConfig",
    "SegmentationModel",
    "Tensor",
    "__version__",
    "build_model",
    "grad_check",
    "no_grad",
    "segmentation_loss",
]
