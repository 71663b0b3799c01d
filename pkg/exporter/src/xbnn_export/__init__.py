"""Checkpoint-to-XBM1 exporter for the xbnn accelerator toolchain.

This package talks to the accelerator model purely through its file
formats; it shares no code with the simulator side. The threshold fold is
deliberately written a second time here so the two implementations check
each other through the byte-equality tests.
"""

from .errors import (
    CheckpointError,
    ExportError,
    InvalidCheckpoint,
    KernelTooLarge,
    MapError,
    ShapeMismatch,
    UnsupportedLayer,
)
from .export import (
    SourceLayer,
    export,
    load_checkpoint,
    load_map,
    model_document,
    resolve_layers,
    write_document,
)
from .fold import MODE_CONST, MODE_GE, MODE_LE, fold_channel
from .packing import binarize_sign, pack_weight_bits, tiles_for

__all__ = [
    "CheckpointError",
    "ExportError",
    "InvalidCheckpoint",
    "KernelTooLarge",
    "MapError",
    "ShapeMismatch",
    "UnsupportedLayer",
    "SourceLayer",
    "export",
    "load_checkpoint",
    "load_map",
    "model_document",
    "resolve_layers",
    "write_document",
    "MODE_CONST",
    "MODE_GE",
    "MODE_LE",
    "fold_channel",
    "binarize_sign",
    "pack_weight_bits",
    "tiles_for",
]

__version__ = "0.1.0"
