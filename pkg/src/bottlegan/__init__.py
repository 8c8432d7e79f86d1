"""BottleGAN: many-one-many stain transfer with federated training."""

from .estimator import BottleGAN, MacenkoEstimator
from .exceptions import (
    BottleGANError,
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    InsufficientTissueError,
    InvalidInputError,
    ProtocolError,
    StyleLookupError,
    TrainingDivergedError,
)
from .federation import FedConfig, build_decomposed, client_train, federate, fedavgm_aggregate, server_distill
from .models import ModelBundle
from .stain import StainStyle, macenko_estimate, od_to_rgb, rgb_to_od
from .synth import FederationConfig, build_federation
from .trainer import ModelConfig, TrainConfig, train_bottlegan

__version__ = "0.1.0"

__all__ = [
    "BottleGAN",
    "BottleGANError",
    "CheckpointError",
    "ConfigError",
    "DegenerateInputError",
    "FedConfig",
    "FederationConfig",
    "InsufficientTissueError",
    "InvalidInputError",
    "MacenkoEstimator",
    "ModelBundle",
    "ModelConfig",
    "ProtocolError",
    "StainStyle",
    "StyleLookupError",
    "TrainConfig",
    "TrainingDivergedError",
    "build_decomposed",
    "build_federation",
    "client_train",
    "federate",
    "fedavgm_aggregate",
    "macenko_estimate",
    "od_to_rgb",
    "rgb_to_od",
    "server_distill",
    "train_bottlegan",
]
