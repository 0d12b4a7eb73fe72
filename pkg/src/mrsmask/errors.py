"""Exception types raised across the package."""

from __future__ import annotations


class CubeFormatError(ValueError):
    """Malformed cube/label/checkpoint header."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class TruncationError(ValueError):
    """Payload length does not match the header."""


class DataError(ValueError):
    """Invalid sample or label values."""


class BoundsError(IndexError):
    """Requested window or index lies outside the valid range."""


class ShapeError(ValueError):
    """Array shapes or counts disagree."""


class RatioError(ValueError):
    """Mask ratio outside (0, 1) or producing an invalid masked count."""


class SpecError(ValueError):
    """Invalid synthetic scene description."""


class ComparisonError(ValueError):
    """Two models cannot be compared (mismatched shapes)."""


class TrainingError(RuntimeError):
    """Optimizer received unusable input."""


class TrainingDivergence(TrainingError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, last_good_epoch: int) -> None:
        super().__init__(f"{message} (last good epoch: {last_good_epoch})")
        self.last_good_epoch = last_good_epoch
