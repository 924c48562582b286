from . import functional, ops
from .functional import (
    ShapeError,
    activation,
    batchnorm_train,
    conv2d_forward,
    conv2d_tuplewise,
    flat_attention_score,
    glorot_init,
    lift_forward,
    linear_forward,
    linear_tuplewise,
    logits_readout,
    tuple_gate,
)
from .modules import ConvClassifier, GRULanguageModel, MLPClassifier, Model, gru_forward
from .ops import BatchNormState
from .serialize import CheckpointError, load_arrays, save_arrays
from .tensor import AlgebraTensor

__all__ = [
    "AlgebraTensor",
    "BatchNormState",
    "CheckpointError",
    "ConvClassifier",
    "GRULanguageModel",
    "MLPClassifier",
    "Model",
    "ShapeError",
    "activation",
    "batchnorm_train",
    "conv2d_forward",
    "conv2d_tuplewise",
    "flat_attention_score",
    "functional",
    "glorot_init",
    "gru_forward",
    "lift_forward",
    "linear_forward",
    "linear_tuplewise",
    "load_arrays",
    "logits_readout",
    "ops",
    "save_arrays",
    "tuple_gate",
]
