"""Contrastive predictive coding for wearable sensor windows.

Self-contained research toolkit: a small numpy-backed autodiff engine,
convolutional/recurrent sequence models, contrastive pretraining objectives,
a CSV/synthetic data pipeline with user-disjoint cross-validation, and a
training harness with frozen-backbone probes, ablations and random search.
"""

from cpc_har.tensor import (
    GraphError,
    OptimizerState,
    Padding,
    Rng,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    no_grad,
    zero_grads,
)

__version__ = "0.1.0"

__all__ = [
    "GraphError",
    "OptimizerState",
    "Padding",
    "Rng",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "no_grad",
    "zero_grads",
    "__version__",
]
