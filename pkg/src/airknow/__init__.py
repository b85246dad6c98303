"""Confidence-gated robust training for composed retrieval under noisy triplets."""

from .errors import (AirknowError, ConfigError, DomainError, InputError,
                     ParseError, ShapeError)
from .rng import RngState
from .estimators import ComposedRetriever, TripletConfidenceClassifier

__version__ = "0.1.0"

__all__ = [
    "AirknowError", "ConfigError", "DomainError", "InputError", "ParseError",
    "ShapeError", "RngState", "ComposedRetriever",
    "TripletConfidenceClassifier", "__version__",
]
