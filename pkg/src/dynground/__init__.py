"""Multi-step referring expression grounding with a learned stop/continue policy."""

from .synth_env import GroundingInstance, generate_dataset, make_instance
from .model import DynamicGroundingNet, ModelConfig
from .training import GroundingData, TrainConfig, evaluate, fit

__all__ = ["GroundingInstance", "generate_dataset", "make_instance", "DynamicGroundingNet",
           "ModelConfig", "GroundingData", "TrainConfig", "evaluate", "fit"]
__version__ = "0.1.0"
