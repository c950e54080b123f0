"""Minimal differentiable-operator core for the two fixed networks.

Layers are objects with ``forward``/``backward`` methods that cache what the
backward pass needs; there is no general graph. Parameters live in
:class:`DiffTensor` values whose gradients are accumulated in place.
"""
from .tensor import DiffTensor, component_rng
from .layers import (
    BatchNorm3d,
    Conv3d,
    Dropout,
    Linear,
    MaxPool3d,
    PointwiseConv3d,
    ReLU,
    UpsampleTrilinear2x,
)
from .optim import (
    AdamConfig,
    AdamOptimizer,
    AdamState,
    CosineAnnealing,
    FixedLr,
    StepDecay,
    adam_step,
    schedule_lr,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamConfig",
    "AdamOptimizer",
    "AdamState",
    "BatchNorm3d",
    "Conv3d",
    "CosineAnnealing",
    "DiffTensor",
    "Dropout",
    "FixedLr",
    "Linear",
    "MaxPool3d",
    "PointwiseConv3d",
    "ReLU",
    "StepDecay",
    "UpsampleTrilinear2x",
    "adam_step",
    "component_rng",
    "load_checkpoint",
    "save_checkpoint",
    "schedule_lr",
]
