"""Recurrent convolutional networks on prefix sums, with contraction guarantees."""

from .model import Model, ModelSpec, build_model, predict_bits

__version__ = "0.1.0"
__all__ = ["Model", "ModelSpec", "build_model", "predict_bits", "__version__"]
