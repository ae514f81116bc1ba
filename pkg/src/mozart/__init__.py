"""Stacked-ensemble meta-learning for binary classifiers, built on a small numpy network engine."""

from .errors import (InvalidArgument, MozartError, ParseError, ShapeError, TrainingDiverged,
                     ValidationError)

__version__ = "0.1.0"

__all__ = ["InvalidArgument", "MozartError", "ParseError", "ShapeError", "TrainingDiverged",
           "ValidationError", "__version__"]
