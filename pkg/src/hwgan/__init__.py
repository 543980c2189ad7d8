"""Adversarial handwriting generation for digital ink.

Mixture-density recurrent generators trained against a CNN-LSTM discriminator
that reads path-signature rasters of the ink.
"""
from .errors import (ContractError, CorruptCheckpointError, DegenerateGeometryError, HwganError,
                     InvalidConfigError, InvalidInputError, ParseError, ShapeError,
                     TrainingDivergenceError, UnsupportedVersionError)
from .ink import (HandwritingSample, OffsetPoint, Stroke, StrokePoint, from_offsets, read_samples,
                  resample_uniform, scale_to_height, to_offsets, write_samples)

__version__ = "0.1.0"

__all__ = [
    "ContractError", "CorruptCheckpointError", "DegenerateGeometryError", "HwganError", "InvalidConfigError",
    "InvalidInputError", "ParseError", "ShapeError", "TrainingDivergenceError", "UnsupportedVersionError",
    "HandwritingSample", "OffsetPoint", "Stroke", "StrokePoint", "from_offsets", "read_samples",
    "resample_uniform", "scale_to_height", "to_offsets", "write_samples",
]
