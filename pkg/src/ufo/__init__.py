"""Probabilistic forecasting for regular and irregular multivariate series.

The model is a hierarchical encoder-decoder: continuous-time resampling
moves between temporal resolutions (a neural controlled differential
equation integrated per patch), transformer blocks refine each level, and
the decoder emits an ensemble of sample paths scored by a proper scoring
rule.  Everything runs on a small hand-rolled reverse-mode numpy substrate
(:mod:`ufo.tensorops`).
"""

from .errors import (DegenerateChannelError, FormatError,
                     IntegrationDivergedError, NumericError,
                     TrainingDivergedError, UfoError)

__version__ = "0.1.0"

__all__ = [
    "UfoError", "FormatError", "DegenerateChannelError",
    "TrainingDivergedError", "IntegrationDivergedError", "NumericError",
    "__version__",
]
