"""Minimal differentiable compute engine for the gait CNNs."""
from . import functional, ops
from .graph import GradCheckReport, ModelGraph, grad_check, rel_error
from .layers import (
    AvgPool, BatchNorm, Concat, Conv, Dropout, FullyConnected, Layer, LRN,
    MaxPool, NonFiniteError, Parallel, ReLU, Reshape, Residual2Block,
    Residual3Block, Sequential, Softmax,
)

__all__ = [
    "functional", "ops", "ModelGraph", "GradCheckReport", "grad_check", "rel_error",
    "AvgPool", "BatchNorm", "Concat", "Conv", "Dropout", "FullyConnected",
    "Layer", "LRN", "MaxPool", "NonFiniteError", "Parallel", "ReLU", "Reshape",
    "Residual2Block", "Residual3Block", "Sequential", "Softmax",
]
