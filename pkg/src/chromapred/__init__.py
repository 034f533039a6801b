"""Attention-based chroma intra-prediction: float training, layer fusion and
bit-exact fixed-point inference."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
