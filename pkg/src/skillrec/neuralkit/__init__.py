"""Minimal numpy neural substrate: hashed text features, layers, Adam, grad checks."""
from .featurize import (
    FeatureBatch,
    FeaturizerConfig,
    SparseFeatures,
    featurize,
    fnv1a64,
    ngram_keys,
    tokenize,
)
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    MLP,
    BiGRU,
    GRUDirection,
    dense_backward,
    dense_forward,
    dropout_mask,
    embed_bag_backward,
    embed_bag_forward,
    log_sigmoid,
    log_softmax,
    relu,
    relu_backward,
    sigmoid,
    softmax,
    softplus,
)
from .optim import Adam, GradBag, GradientError, TrainConfig
from .params import ParameterError, ParamSet, load_params, save_params

__all__ = [
    "Adam",
    "BiGRU",
    "FeatureBatch",
    "FeaturizerConfig",
    "GradBag",
    "GradCheckReport",
    "GradientError",
    "GRUDirection",
    "MLP",
    "ParameterError",
    "ParamSet",
    "SparseFeatures",
    "TrainConfig",
    "dense_backward",
    "dense_forward",
    "dropout_mask",
    "embed_bag_backward",
    "embed_bag_forward",
    "featurize",
    "fnv1a64",
    "grad_check",
    "load_params",
    "log_sigmoid",
    "log_softmax",
    "ngram_keys",
    "relu",
    "relu_backward",
    "save_params",
    "sigmoid",
    "softmax",
    "softplus",
    "tokenize",
]
