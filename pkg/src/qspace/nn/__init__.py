"""Minimal reverse-mode autodiff engine for all-convolutional classifiers."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import LAYER_KINDS, LayerSpec, Network
from .optim import Adam, epoch_learning_rate
from .tensor import (Tensor, conv2d, dropout, global_avg_pool, maxpool2x2, parameter,
                     record_patterns, relu, set_debug, softmax, softmax_cross_entropy)

__all__ = ["Adam", "LAYER_KINDS", "LayerSpec", "Network", "Tensor", "conv2d", "dropout",
           "epoch_learning_rate", "global_avg_pool", "load_checkpoint", "maxpool2x2",
           "parameter", "record_patterns", "relu", "save_checkpoint", "set_debug", "softmax",
           "softmax_cross_entropy"]
