"""Validation toolkit for an inverse-reinforcement-learned highway driver model."""

from .reward import FEATURE_NAMES, DEFAULT_CONSTANTS, FeatureConstants, RewardWeights
from .rollout import AgentConfig, rollout
from .irl import OptimizerConfig, TrainingStatus, train

__version__ = "0.1.0"

__all__ = [
    "FEATURE_NAMES", "DEFAULT_CONSTANTS", "FeatureConstants", "RewardWeights",
    "AgentConfig", "rollout", "OptimizerConfig", "TrainingStatus", "train",
]
