"""Spiking neural network training engine for hyperspectral image classification."""

from .errors import (ConfigError, ConvergenceError, DataError, DomainError,
                     NonFiniteError, ShapeError, SpikegridError, TrainingError)
from .network import NetworkSpec, forward_record, init_params, layer_shapes
from .neuron import LifConfig, LifState, SurrogateKind, SurrogateSpec, lif_step, surrogate_grad

__version__ = "0.1.0"
