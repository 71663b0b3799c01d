"""Bit-true model of a binary-CNN accelerator.

Layers of the package: core (bipolar arithmetic and the reference forward
pass), model (XBM1 container and validation), xbf (binary activation
files), compiler (control streams), archsim (cycle-counting simulator),
energy (throughput/energy reports), fixtures (canned workloads), cli.
"""

from .archsim import Stats, analytic_cycles, simulate, stats_closed_form
from .compiler import (
    ControlStream,
    LayerProgram,
    MemoryConfig,
    check_capacity,
    compile_model,
    emit_control_stream,
    load_control_stream,
)
from .core import (
    BinaryFeatureMap,
    ConvGeometry,
    ThresholdSpec,
    WeightSet,
    apply_threshold,
    conv2d_ref,
    decode_bipolar,
    dot16,
    encode_bipolar,
    fold_bn_threshold,
    forward_ref,
    pool_or,
)
from .energy import (
    EnergyCoefficients,
    EnergyReport,
    default_coefficients,
    estimate,
    load_coefficients,
    peak_throughput,
)
from .errors import (
    AddressFault,
    CompileError,
    ConfigMismatch,
    FeatureMapOverflow,
    InvalidBatchNorm,
    InvalidBipolar,
    KernelTooLarge,
    ParamOverflow,
    ParseError,
    SchemaError,
    ShapeError,
    ValidationError,
    XbnnError,
)
from .model import (
    LayerDescriptor,
    ModelDescriptor,
    PoolConfig,
    Violation,
    gen_random_fmap,
    gen_random_model,
    load_model,
    save_model,
    validate_model,
)
from .xbf import load_fmap, save_fmap

__version__ = "0.1.0"
