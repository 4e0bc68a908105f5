"""Multi-modal action anticipation on synthetic worlds: fused modality
tokens, a causal future-feature decoder, contrastive text pre-training, and
the evaluation harness around them."""

__version__ = "0.1.0"

from .errors import (
    AnticipateError,
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
)

__all__ = [
    "AnticipateError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "__version__",
]
