"""Toolkit for efficient single-image super-resolution networks.

Numpy reference kernels, a declarative graph format with forward execution,
builders for distillation/attention networks, structural reparameterization,
losses, complexity profiling and leaderboard ranking.
"""

from .executor import forward, trace
from .graph import ArchError, ArchSpec, NodeSpec, infer_shapes, validate
from .weights import WeightStore, init_weights

__version__ = "0.1.0"

__all__ = ["ArchSpec", "NodeSpec", "ArchError", "WeightStore", "forward", "trace", "validate", "infer_shapes", "init_weights"]
