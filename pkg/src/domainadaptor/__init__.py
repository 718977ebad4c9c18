"""Test-time adaptation with mixed batch-norm statistics and generalized entropy minimization."""
from .adapt import METHODS, AdaptConfig, AdaptReport, adapt_batch, run_stream, tent_adapt
from .bn import ChannelStats, compute_alpha, mixbn_forward, transform_affine
from .gem import GemConfig, dynamic_temperature, em_loss, gem_loss
from .nn import Model, small_convnet

__version__ = "0.1.0"

__all__ = [
    "METHODS", "AdaptConfig", "AdaptReport", "adapt_batch", "run_stream", "tent_adapt",
    "ChannelStats", "compute_alpha", "mixbn_forward", "transform_affine",
    "GemConfig", "dynamic_temperature", "em_loss", "gem_loss",
    "Model", "small_convnet",
]
