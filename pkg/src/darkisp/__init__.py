"""Differentiable low-light RAW image signal processing.

A trainable linear calibration stage (white balance, binning, colour matrix,
attention-modulated per pixel) followed by a polynomial-basis tone stretch,
with a least-squares regularizer tying the two together.
"""

from .errors import DarkIspError
from .linear_isp import LinearParams, compose
from .model import DarkISP, ModelConfig
from .nonlinear_isp import BasisFamily
from .raw_io import BayerImage, RgbImage, SensorMeta, load_bayer, load_rgb, save_bayer, save_rgb
from .synth_data import SynthConfig, generate_dataset
from .tensor import Tensor, grad_check
from .trainer import Checkpoint, TrainConfig, evaluate, train

__all__ = [
    "BasisFamily", "BayerImage", "Checkpoint", "DarkISP", "DarkIspError", "LinearParams", "ModelConfig",
    "RgbImage", "SensorMeta", "SynthConfig", "Tensor", "TrainConfig", "compose", "evaluate",
    "generate_dataset", "grad_check", "load_bayer", "load_rgb", "save_bayer", "save_rgb", "train",
]
__version__ = "0.1.0"
