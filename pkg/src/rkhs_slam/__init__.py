"""Keyframe RGB-D SLAM with kernel inner-product frame registration."""

from .cloud import ColoredPointCloud
from .config import RunConfig, load_config
from .frontend import KeyframeTracker, Tracker
from .pipeline import run, run_sequence
from .registration import CVORegistration, RegistrationConfig, inner_product, register
from .se3 import Pose
from .vocabulary import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "CVORegistration",
    "ColoredPointCloud",
    "KeyframeTracker",
    "Pose",
    "RegistrationConfig",
    "RunConfig",
    "Tracker",
    "Vocabulary",
    "inner_product",
    "load_config",
    "register",
    "run",
    "run_sequence",
]
