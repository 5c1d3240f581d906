"""Ordinal neural network transformation models for outcome prediction and
individualized treatment effects from randomized-trial data."""
from .core import (
    EmbeddingHead,
    ModelParams,
    OutcomeScale,
    class_probabilities,
    cumulative_probabilities,
    cutpoints_from_raw,
    favorable_probability,
    latent_cdf,
    loss_and_gradient,
    negative_log_likelihood,
    nll_gradient,
    transformation,
)
from .kernels import BACKEND

__version__ = "0.1.0"
