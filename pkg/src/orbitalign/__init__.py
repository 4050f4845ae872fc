"""Learn invertible coordinate maps that align the orbits of two dynamical systems."""
from .iresnet import IResNet
from .trainer import TrainConfig, train

__all__ = ["IResNet", "TrainConfig", "train"]
__version__ = "0.1.0"
