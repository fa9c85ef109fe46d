"""Bit-accurate model of a CNN equalizer with on-chip training for IM/DD
optical links."""
from .channel import ChannelConfig, simulate
from .cnn import CnnModel, equalize, forward, init_model
from .fxp import FxpFormat, FxpTensor, quantize
from .harness import SystemConfig, run_experiment
from .train import TrainConfig, compute_gradients, sgd_update

__version__ = "0.1.0"
