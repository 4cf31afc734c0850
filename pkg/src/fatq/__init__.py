"""Learned spectral weight transforms for low-bit quantization-aware training."""
from fatq._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
