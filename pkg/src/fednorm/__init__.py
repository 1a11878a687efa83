"""fednorm: a deterministic federated-averaging simulator with a
from-scratch neural-network core, pluggable normalization layers, and
diagnostics for cross-device feature-statistics divergence."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
