"""Federated-averaging simulator with fractal-pair pre-training."""

from .ifs import KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
