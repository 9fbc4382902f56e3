"""Stereo deblurring with depth awareness and view aggregation.

Modules: ``geometry`` (stereo/blur relations, warping, consistency masks),
``synth`` (synthetic stereo blur datasets), ``network`` (DeblurNet, DispBiNet,
fusion), ``losses``, ``training``, ``metrics``, ``evaluation`` and ``cli``.
"""

from .errors import ConfigError, ContractError, DataError, DomainError, NumericError
from .geometry import CameraRig, MotionSpec, consistency_mask, warp_with_disparity
from .metrics import psnr, ssim
from .network import DAVANet, ModelConfig, count_params, load_checkpoint, save_checkpoint
from .synth import StereoSample, SynthConfig, generate_dataset, generate_sample
from .training import TrainConfig, augment, train_stage

__all__ = [
    "CameraRig", "ConfigError", "ContractError", "DAVANet", "DataError", "DomainError",
    "ModelConfig", "MotionSpec", "NumericError", "StereoSample", "SynthConfig", "TrainConfig",
    "augment", "consistency_mask", "count_params", "generate_dataset", "generate_sample",
    "load_checkpoint", "psnr", "save_checkpoint", "ssim", "train_stage", "warp_with_disparity",
]
__version__ = "0.1.0"
