"""Error types raised while converting a checkpoint."""

from __future__ import annotations


class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class MapError(ExportError):
    """The layer-mapping file is malformed or self-contradictory."""


class UnsupportedLayer(ExportError):
    """The mapping asks for an operation the target cannot run."""


class KernelTooLarge(ExportError):
    """A convolution kernel exceeds the 7x7 ceiling of the target array."""


class ShapeMismatch(ExportError):
    """Checkpoint tensors do not line up with the mapping or each other."""


class CheckpointError(ExportError):
    """The checkpoint file cannot be read or decoded at all."""


class InvalidCheckpoint(ExportError):
    """Checkpoint numerics cannot be represented: bad variance, NaN, or a
    folded threshold outside the signed 16-bit range."""
