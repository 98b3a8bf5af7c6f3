"""Bregman-enhanced graph neural networks on a small numpy autodiff core."""

from .bregman import ActivationPair, activation_registry, get_activation
from .layers import ModelConfig, build_model
from .sparsegraph import GraphDataset, SparseMatrix, generate_sbm, load_dataset, save_dataset
from .tensor import Tensor
from .train import TrainConfig, fit, multi_seed

__version__ = "0.1.0"

__all__ = [
    "ActivationPair",
    "GraphDataset",
    "ModelConfig",
    "SparseMatrix",
    "Tensor",
    "TrainConfig",
    "activation_registry",
    "build_model",
    "fit",
    "generate_sbm",
    "get_activation",
    "load_dataset",
    "multi_seed",
    "save_dataset",
]
