"""Meta-learning with a subspace adaptation prior: a small reverse-mode autodiff
engine, candidate-operation networks, bilevel training, task generators and an
experiment harness."""

from .autodiff import Graph, Tensor, gradient
from .harness import RunConfig, meta_test, meta_train, run_experiment
from .meta import MetaConfig
from .network import build_convnet, build_mlp

__version__ = "0.1.0"

__all__ = ["Graph", "Tensor", "gradient", "MetaConfig", "RunConfig", "build_mlp", "build_convnet",
           "meta_train", "meta_test", "run_experiment"]
