"""Lower a model to an accelerator control stream.

Per layer the stream fixes: which SRAM bank is the source and which is the
sink (roles alternate layer to layer), word addresses for the input words,
the 16-bit partial sums, and the packed output, plus the tile/group
schedule implied by the loop order (output group outer, then input tile,
then output row, then output column; the 16 filters of a group rotate
innermost). Parameters (weight words, then two threshold words per output
channel) are concatenated into one little-endian image so a stream is
self-contained.

Capacity rules mirror the machine: the source bank must hold the whole
input feature map, and the sink bank must hold one output group's 16-bit
partial sums plus the packed bits of all output groups. Layers whose
per-layer parameters exceed the parameter buffer are rejected unless
parameter streaming is requested; an oversized layer-0 input can likewise
be exempted, modeling an input streamed from off chip.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .core import MODE_CONST, MODE_GE, MODE_LE, WORD_BITS
from .errors import (
    ConfigMismatch,
    FeatureMapOverflow,
    KernelTooLarge,
    ParamOverflow,
    ParseError,
    SchemaError,
    ValidationError,
)
from .model import (
    MAX_KERNEL,
    LayerDescriptor,
    ModelDescriptor,
    _atomic_write,
    _require_keys,
    validate_model,
)

PSUM_GROUP = WORD_BITS  # partial-sum region always spans a full filter group

MODE_CODES = {MODE_GE: 0, MODE_LE: 1, MODE_CONST: 2}
CODE_MODES = {v: k for k, v in MODE_CODES.items()}


@dataclass(frozen=True)
class MemoryConfig:
    """Accelerator sizing: SRAM capacities in bits, array dims in units."""

    bank_a_bits: int = 128 * 1024
    bank_b_bits: int = 256 * 1024
    param_buffer_bits: int = 1024 * 1024
    row_banks: int = 7
    bpus: int = 7
    units_per_bpu: int = 7
    csr_width: int = 7

    def bank_bits(self, bank: str) -> int:
        return self.bank_a_bits if bank == "A" else self.bank_b_bits

    def bank_words(self, bank: str) -> int:
        return self.bank_bits(bank) // WORD_BITS


@dataclass(frozen=True)
class LayerProgram:
    """Addresses and geometry for one layer; all addresses in 16-bit words."""

    index: int
    src_bank: str
    sink_bank: str
    in_h: int
    in_w: int
    c_in: int
    t_in: int
    out_h: int  # pre-pool
    out_w: int
    pooled_h: int
    pooled_w: int
    c_out: int
    g_out: int
    k_h: int
    k_w: int
    stride_y: int
    stride_x: int
    pad_y: int
    pad_x: int
    pad_value: int
    pool_enabled: bool
    pool_size: int
    pool_stride: int
    in_base: int
    psum_base: int
    out_base: int
    param_base: int
    param_words: int

    @property
    def psum_words(self) -> int:
        return PSUM_GROUP * self.out_h * self.out_w

    @property
    def packed_words(self) -> int:
        return self.g_out * self.pooled_h * self.pooled_w

    @property
    def in_words(self) -> int:
        return self.t_in * self.in_h * self.in_w

    @property
    def weight_words(self) -> int:
        return self.c_out * self.k_h * self.k_w * self.t_in

    @property
    def threshold_words(self) -> int:
        return 2 * self.c_out


@dataclass
class ControlStream:
    config: MemoryConfig
    name: str
    input_shape: tuple[int, int, int]
    programs: list[LayerProgram]
    param_image: np.ndarray
    stream_params: bool = False
    streamed_input: bool = False


def layer_dims(model: ModelDescriptor) -> list[tuple[int, int, int, int, int, int]]:
    """(in_h, in_w, out_h, out_w, pooled_h, pooled_w) per layer."""
    h, w, _ = model.input_shape
    dims = []
    for layer in model.layers:
        oh, ow = layer.geometry.out_dims(h, w)
        ph, pw = layer.pool.out_dims(oh, ow)
        dims.append((h, w, oh, ow, ph, pw))
        h, w = ph, pw
    return dims


def check_capacity(
    layer: LayerDescriptor,
    in_h: int,
    in_w: int,
    src_bits: int,
    sink_bits: int,
    skip_input: bool = False,
) -> list[str]:
    """Violated capacity terms for one layer, empty when it fits."""
    oh, ow = layer.geometry.out_dims(in_h, in_w)
    ph, pw = layer.pool.out_dims(oh, ow)
    bad = []
    in_bits = layer.t_in * WORD_BITS * in_h * in_w
    if not skip_input and in_bits > src_bits:
        bad.append(
            f"input feature map needs {in_bits} bits, source bank holds {src_bits}"
        )
    psum_bits = oh * ow * PSUM_GROUP * WORD_BITS
    done_bits = (layer.g_out - 1) * ph * pw * WORD_BITS
    if psum_bits + done_bits > sink_bits:
        bad.append(
            f"partial sums ({psum_bits} bits) plus completed packed groups "
            f"({done_bits} bits) exceed sink bank ({sink_bits} bits)"
        )
    all_packed_bits = layer.g_out * ph * pw * WORD_BITS
    if psum_bits + all_packed_bits > sink_bits:
        bad.append(
            f"partial-sum region ({psum_bits} bits) plus the full packed output "
            f"region ({all_packed_bits} bits) cannot both be allocated in the "
            f"sink bank ({sink_bits} bits)"
        )
    return bad


def _check_kernels(model: ModelDescriptor, cfg: MemoryConfig) -> None:
    for i, layer in enumerate(model.layers):
        g = layer.geometry
        if g.k_h > MAX_KERNEL or g.k_w > MAX_KERNEL:
            raise KernelTooLarge(
                f"kernel {g.k_h}x{g.k_w} exceeds the supported {MAX_KERNEL}x"
                f"{MAX_KERNEL} taps; decompose the layer into several smaller "
                f"convolutions before compiling",
                layer=i,
            )
        if g.k_h > cfg.bpus or g.k_h > cfg.row_banks:
            raise ConfigMismatch(
                f"layer {i}: kernel height {g.k_h} exceeds the configured array "
                f"({cfg.bpus} row units, {cfg.row_banks} row banks)"
            )
        if g.k_w > cfg.units_per_bpu or g.k_w > cfg.csr_width:
            raise ConfigMismatch(
                f"layer {i}: kernel width {g.k_w} exceeds the configured array "
                f"({cfg.units_per_bpu} units per row, csr width {cfg.csr_width})"
            )


def _try_phase(
    model: ModelDescriptor,
    cfg: MemoryConfig,
    first_src: str,
    allow_streaming_input: bool,
) -> tuple[list[LayerProgram] | None, int, list[str]]:
    """Assign banks starting with first_src; returns (programs, fail_layer,
    violations) where programs is None on failure."""
    dims = layer_dims(model)
    programs: list[LayerProgram] = []
    param_base = 0
    in_base = 0
    src = first_src
    for i, layer in enumerate(model.layers):
        in_h, in_w, oh, ow, ph, pw = dims[i]
        sink = "B" if src == "A" else "A"
        streamed = allow_streaming_input and i == 0
        bad = check_capacity(
            layer, in_h, in_w, cfg.bank_bits(src), cfg.bank_bits(sink),
            skip_input=streamed,
        )
        if not streamed and in_base + layer.t_in * in_h * in_w > cfg.bank_words(src):
            bad.append(
                f"input region [{in_base}, "
                f"{in_base + layer.t_in * in_h * in_w}) exceeds source bank "
                f"({cfg.bank_words(src)} words)"
            )
        if bad:
            return None, i, bad
        psum_words = PSUM_GROUP * oh * ow
        prog = LayerProgram(
            index=i, src_bank=src, sink_bank=sink,
            in_h=in_h, in_w=in_w, c_in=layer.c_in, t_in=layer.t_in,
            out_h=oh, out_w=ow, pooled_h=ph, pooled_w=pw,
            c_out=layer.c_out, g_out=layer.g_out,
            k_h=layer.geometry.k_h, k_w=layer.geometry.k_w,
            stride_y=layer.geometry.stride_y, stride_x=layer.geometry.stride_x,
            pad_y=layer.geometry.pad_y, pad_x=layer.geometry.pad_x,
            pad_value=layer.geometry.pad_value,
            pool_enabled=layer.pool.enabled,
            pool_size=layer.pool.size, pool_stride=layer.pool.stride,
            in_base=0 if streamed else in_base,
            psum_base=0, out_base=psum_words,
            param_base=param_base,
            param_words=layer.c_out * (layer.geometry.k_h * layer.geometry.k_w
                                       * layer.t_in + 2),
        )
        programs.append(prog)
        param_base += prog.param_words
        in_base = prog.out_base
        src = sink
    return programs, len(model.layers), []


def _param_image(model: ModelDescriptor) -> np.ndarray:
    """Weights then per-channel threshold pairs, one layer after another.

    Threshold pair: word 0 is the effective threshold as a two's-complement
    16-bit value, word 1 packs the mode code (bits 0..1) and the constant
    bit (bit 2).
    """
    parts = []
    for layer in model.layers:
        parts.append(np.ascontiguousarray(layer.weights.words).reshape(-1))
        thr = np.zeros(2 * layer.c_out, dtype=np.uint16)
        for ch, spec in enumerate(layer.thresholds):
            thr[2 * ch] = np.uint16(np.int16(spec.threshold))
            thr[2 * ch + 1] = MODE_CODES[spec.mode] | (spec.const_bit & 1) << 2
        parts.append(thr)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint16)


def compile_model(
    model: ModelDescriptor,
    cfg: MemoryConfig | None = None,
    stream_params: bool = False,
    allow_streaming_input: bool = False,
) -> ControlStream:
    """Validate, place, and schedule a model; deterministic.

    Bank assignment tries layer 0 reading bank A first, then the swapped
    phase, and keeps the first assignment under which every layer fits.
    """
    cfg = cfg or MemoryConfig()
    bad = validate_model(model)
    if bad:
        raise ValidationError(bad)
    _check_kernels(model, cfg)
    if not stream_params:
        for i, layer in enumerate(model.layers):
            bits = WORD_BITS * layer.c_out * (
                layer.geometry.k_h * layer.geometry.k_w * layer.t_in + 2
            )
            if bits > cfg.param_buffer_bits:
                raise ParamOverflow(
                    f"parameters need {bits} bits, buffer holds "
                    f"{cfg.param_buffer_bits}; enable parameter streaming to "
                    f"run this layer from external storage",
                    layer=i,
                )
    attempts = []
    for first_src in ("A", "B"):
        programs, fail_layer, violations = _try_phase(
            model, cfg, first_src, allow_streaming_input
        )
        if programs is not None:
            return ControlStream(
                config=cfg, name=model.name,
                input_shape=tuple(model.input_shape),
                programs=programs, param_image=_param_image(model),
                stream_params=stream_params,
                streamed_input=bool(allow_streaming_input),
            )
        attempts.append((fail_layer, first_src, violations))
    attempts.sort(key=lambda a: -a[0])
    fail_layer, first_src, violations = attempts[0]
    raise FeatureMapOverflow(
        "no bank assignment fits (best attempt started with source bank "
        f"{first_src}): " + "; ".join(violations),
        layer=fail_layer,
    )


_CFG_KEYS = {
    "bank_a_bits", "bank_b_bits", "param_buffer_bits",
    "row_banks", "bpus", "units_per_bpu", "csr_width",
}
_PROG_KEYS = {
    "index", "src_bank", "sink_bank", "in_h", "in_w", "c_in", "t_in",
    "out_h", "out_w", "pooled_h", "pooled_w", "c_out", "g_out",
    "k_h", "k_w", "stride_y", "stride_x", "pad_y", "pad_x", "pad_value",
    "pool_enabled", "pool_size", "pool_stride",
    "in_base", "psum_base", "out_base", "param_base", "param_words",
}
_CS_KEYS = {
    "format_tag", "name", "input_shape", "config", "stream_params",
    "streamed_input", "programs", "param_image",
}

CS_FORMAT_TAG = "XCS1"


def emit_control_stream(cs: ControlStream, path) -> None:
    doc = {
        "format_tag": CS_FORMAT_TAG,
        "name": cs.name,
        "input_shape": list(cs.input_shape),
        "config": {k: getattr(cs.config, k) for k in sorted(_CFG_KEYS)},
        "stream_params": cs.stream_params,
        "streamed_input": cs.streamed_input,
        "programs": [
            {k: getattr(p, k) for k in sorted(_PROG_KEYS)} for p in cs.programs
        ],
        "param_image": base64.b64encode(
            np.ascontiguousarray(cs.param_image, dtype="<u2").tobytes()
        ).decode("ascii"),
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    _atomic_write(path, text.encode("ascii") + b"\n")


def load_control_stream(path) -> ControlStream:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from None
    _require_keys(doc, _CS_KEYS, "control stream")
    if doc["format_tag"] != CS_FORMAT_TAG:
        raise SchemaError(
            f"format_tag {doc['format_tag']!r}, expected {CS_FORMAT_TAG!r}"
        )
    _require_keys(doc["config"], _CFG_KEYS, "config")
    cfg = MemoryConfig(**{k: int(doc["config"][k]) for k in _CFG_KEYS})
    programs = []
    for i, p in enumerate(doc["programs"]):
        _require_keys(p, _PROG_KEYS, f"programs[{i}]")
        kw = {}
        for k in _PROG_KEYS:
            v = p[k]
            if k in ("src_bank", "sink_bank"):
                if v not in ("A", "B"):
                    raise SchemaError(f"programs[{i}].{k}: bad bank {v!r}")
                kw[k] = v
            elif k == "pool_enabled":
                if not isinstance(v, bool):
                    raise SchemaError(f"programs[{i}].{k}: expected a boolean")
                kw[k] = v
            else:
                if isinstance(v, bool) or not isinstance(v, int):
                    raise SchemaError(f"programs[{i}].{k}: expected an integer")
                kw[k] = v
        programs.append(LayerProgram(**kw))
    try:
        blob = base64.b64decode(doc["param_image"], validate=True)
    except Exception as e:
        raise SchemaError(f"param_image: bad base64 ({e})") from None
    if len(blob) % 2:
        raise SchemaError("param_image: odd byte count")
    shape = doc["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3):
        raise SchemaError("input_shape: expected [H, W, C]")
    return ControlStream(
        config=cfg,
        name=str(doc["name"]),
        input_shape=tuple(int(d) for d in shape),
        programs=programs,
        param_image=np.frombuffer(blob, dtype="<u2").astype(np.uint16),
        stream_params=bool(doc["stream_params"]),
        streamed_input=bool(doc["streamed_input"]),
    )
