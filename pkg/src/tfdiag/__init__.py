"""Noise-robust vibration fault diagnosis with learnable spectral filtering."""

from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError
from .tensor import Tensor, backward, gradcheck

__all__ = ["Tensor", "backward", "gradcheck", "ConfigError", "ContractError", "DimensionError",
           "NumericError", "ParseError"]
