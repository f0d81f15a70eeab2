"""Image tampering detection with error level analysis and a from-scratch CNN."""

from .ela import ElaConfig, RgbImage, ela_image, ela_transform, load_image
from .errors import ElaCnnError
from .layers import Model, build_model, build_paper_model
from .training import TrainConfig, fit, load_model, predict, save_model, train

__all__ = [
    "ElaCnnError", "ElaConfig", "Model", "RgbImage", "TrainConfig", "build_model",
    "build_paper_model", "ela_image", "ela_transform", "fit", "load_image", "load_model",
    "predict", "save_model", "train",
]
