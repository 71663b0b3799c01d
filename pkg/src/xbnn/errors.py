"""Exception types shared across the package."""


class XbnnError(Exception):
    """Base class for all errors raised by this package."""


class InvalidBipolar(XbnnError):
    """A value outside {-1, +1} was passed where a bipolar value is required."""


class ShapeError(XbnnError):
    """Geometry or shape mismatch between operands."""


class InvalidBatchNorm(XbnnError):
    """Batch-norm parameters that cannot be folded (sigma <= 0)."""


class ParseError(XbnnError):
    """A file could not be read or decoded at all (bad JSON, bad magic)."""


class SchemaError(XbnnError):
    """A file parsed but does not match the expected schema."""


class ValidationError(XbnnError):
    """A model violates a structural invariant.

    Carries the full violation list so callers can report each rule.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations)
        super().__init__(f"model validation failed: {msg}")


class CompileError(XbnnError):
    """Base class for lowering failures. `layer` is the offending layer index."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class KernelTooLarge(CompileError):
    """Kernel exceeds the processing array."""


class FeatureMapOverflow(CompileError):
    """A feature map or partial-sum region does not fit its memory bank."""


class ParamOverflow(CompileError):
    """Weights and thresholds exceed the parameter buffer."""


class ConfigMismatch(XbnnError):
    """A control stream requires more hardware than the machine config has."""


class AddressFault(XbnnError):
    """A simulated access fell outside its declared address range.

    Indicates a compiler bug; the simulation is aborted.
    """
