"""Cost-aware model routing via latent capability matching."""

from .domain import (
    ModelDescriptor,
    ModelPool,
    MultimodalQuery,
    RoutingTrace,
    UtilitySpec,
    compute_utility,
)
from .network import RouterConfig, RouterParams, forward, load_checkpoint, route, save_checkpoint
from .synth import GeneratorConfig, generate_dataset
from .training import LossWeights, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GeneratorConfig",
    "LossWeights",
    "ModelDescriptor",
    "ModelPool",
    "MultimodalQuery",
    "RouterConfig",
    "RouterParams",
    "RoutingTrace",
    "TrainConfig",
    "UtilitySpec",
    "compute_utility",
    "forward",
    "generate_dataset",
    "load_checkpoint",
    "route",
    "save_checkpoint",
    "train",
    "__version__",
]
