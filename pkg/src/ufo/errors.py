"""Exceptions raised at module boundaries."""

from .tensorops import NumericError


class UfoError(Exception):
    """Base class for package-specific failures."""


class FormatError(UfoError):
    """Malformed input file (CSV, config, checkpoint)."""


class DegenerateChannelError(UfoError):
    """A channel's score denominator is zero, so its scale-free score is
    undefined; carries the offending channel names."""

    def __init__(self, channels):
        self.channels = list(channels)
        super().__init__(
            "score undefined for all-zero channel(s): " + ", ".join(self.channels))


class TrainingDivergedError(UfoError):
    """Loss or gradients became non-finite during training."""


class IntegrationDivergedError(UfoError):
    """A latent trajectory left the finite range; carries the patch time."""

    def __init__(self, time: float):
        self.time = float(time)
        super().__init__(f"latent state became non-finite near t={self.time:g}")


class DegenerateStudyError(UfoError):
    """A diagnostic study has nothing to measure (all-zero gradients,
    single-class probe labels, ...)."""


__all__ = [
    "UfoError", "FormatError", "DegenerateChannelError",
    "TrainingDivergedError", "IntegrationDivergedError",
    "DegenerateStudyError", "NumericError",
]
