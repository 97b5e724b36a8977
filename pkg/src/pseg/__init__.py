"""Promptable binary segmentation at desk scale, on a small numpy autodiff core."""
from .errors import (
    BoxError, ChecksumError, ConfigError, DataError, EmptyMaskError, FreezeViolation,
    LengthError, MaskDomainError, NumericError, ParseError, ProvenanceError, PsegError,
    ShapeError, TapeError, UsageError,
)
from .prompt_encoder import BoxPrompt, MaskPrompt, PointPrompt, PromptSet
from .prompt_generator import GeneratorKind

__version__ = "0.1.0"

__all__ = [
    "BoxError", "ChecksumError", "ConfigError", "DataError", "EmptyMaskError", "FreezeViolation",
    "LengthError", "MaskDomainError", "NumericError", "ParseError", "ProvenanceError", "PsegError",
    "ShapeError", "TapeError", "UsageError", "BoxPrompt", "MaskPrompt", "PointPrompt",
    "PromptSet", "GeneratorKind",
]
