"""Post-training quantization simulator with mean-activation-shift analysis
and bias correction (iterative bias correction and bias fine-tuning)."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
