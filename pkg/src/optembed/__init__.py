"""Embedding-table compression for CTR models: learnable row pruning,
one-shot field-wise dimension search, and retraining under both masks."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
