"""Model container: schema, XBM1 serialization, validation, random models.

A model file carries uncompensated thresholds, i.e. thresholds that apply to
the mathematical convolution sum over the real channels only. The in-memory
descriptor instead holds effective thresholds that apply directly to packed
sums, which include the +k_h*k_w*pad_channels constant contributed by the
channel-padding bits (see core). load_model adds the constant to GE/LE
thresholds and save_model removes it, so files round-trip bit-exactly and
every consumer of a descriptor can stay branch-free.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import core
from .core import (
    INT16_MAX,
    INT16_MIN,
    WORD_BITS,
    BinaryFeatureMap,
    ConvGeometry,
    ThresholdSpec,
    WeightSet,
    tiles_for,
)
from .errors import CompileError, ParseError, SchemaError, ValidationError

FORMAT_TAG = "XBM1"

MAX_KERNEL = 7


@dataclass(frozen=True)
class PoolConfig:
    enabled: bool = False
    size: int = 1
    stride: int = 1

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        if not self.enabled:
            return h, w
        return (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1


@dataclass
class LayerDescriptor:
    """One conv + threshold + optional pool stage.

    thresholds are effective (packed-sum domain); threshold_offset is the
    channel-padding constant they include, so the file value is
    threshold - threshold_offset for GE/LE modes.
    """

    geometry: ConvGeometry
    c_in: int
    c_out: int
    weights: WeightSet
    thresholds: tuple[ThresholdSpec, ...]
    pool: PoolConfig = field(default_factory=PoolConfig)

    @property
    def t_in(self) -> int:
        return tiles_for(self.c_in)

    @property
    def g_out(self) -> int:
        return tiles_for(self.c_out)

    @property
    def pad_channels(self) -> int:
        return self.t_in * WORD_BITS - self.c_in

    @property
    def threshold_offset(self) -> int:
        return self.geometry.k_h * self.geometry.k_w * self.pad_channels

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        """Post-conv, post-pool output dims for an h x w input."""
        return self.pool.out_dims(*self.geometry.out_dims(h, w))


@dataclass
class ModelDescriptor:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerDescriptor]

    def same_as(self, other: "ModelDescriptor") -> bool:
        if (
            self.name != other.name
            or tuple(self.input_shape) != tuple(other.input_shape)
            or len(self.layers) != len(other.layers)
        ):
            return False
        for a, b in zip(self.layers, other.layers):
            if (
                a.geometry != b.geometry
                or (a.c_in, a.c_out) != (b.c_in, b.c_out)
                or a.thresholds != b.thresholds
                or a.pool != b.pool
                or not np.array_equal(a.weights.words, b.weights.words)
            ):
                return False
        return True


@dataclass(frozen=True)
class Violation:
    """One broken model invariant; layer is None for model-level rules."""

    layer: int | None
    rule: str
    message: str

    def __str__(self) -> str:
        at = "model" if self.layer is None else f"layer {self.layer}"
        return f"{self.rule}@{at}: {self.message}"


def shift_thresholds(specs, offset: int) -> tuple[ThresholdSpec, ...]:
    """Add `offset` to GE/LE thresholds; CONST rules ignore the sum."""
    out = []
    for s in specs:
        if s.mode in (core.MODE_GE, core.MODE_LE) and offset:
            out.append(replace(s, threshold=s.threshold + offset))
        else:
            out.append(s)
    return tuple(out)


def _check_layer(i: int, layer: LayerDescriptor, bad: list[Violation]) -> None:
    g = layer.geometry
    for name, k in (("height", g.k_h), ("width", g.k_w)):
        if k < 1:
            bad.append(Violation(i, "KernelRange", f"kernel {name} {k} is below 1"))
        elif k > MAX_KERNEL:
            bad.append(
                Violation(
                    i, "KernelTooLarge", f"kernel {name} {k} exceeds {MAX_KERNEL}"
                )
            )
    if g.stride_y < 1 or g.stride_x < 1:
        bad.append(
            Violation(i, "StrideRange", f"strides {g.stride_y}x{g.stride_x} below 1")
        )
    if g.pad_y < 0 or g.pad_x < 0:
        bad.append(Violation(i, "PadRange", f"negative padding {g.pad_y}x{g.pad_x}"))
    elif g.pad_y >= max(g.k_h, 1) or g.pad_x >= max(g.k_w, 1):
        bad.append(
            Violation(
                i,
                "PadRange",
                f"padding {g.pad_y}x{g.pad_x} not below kernel {g.k_h}x{g.k_w}",
            )
        )
    if g.pad_value not in (-1, 1):
        bad.append(Violation(i, "PadValue", f"pad_value {g.pad_value} not bipolar"))
    if layer.c_in < 1 or layer.c_out < 1:
        bad.append(
            Violation(i, "ChannelRange", f"c_in={layer.c_in} c_out={layer.c_out}")
        )
        return
    w = layer.weights
    if (w.c_out, w.k_h, w.k_w, w.c_in) != (layer.c_out, g.k_h, g.k_w, layer.c_in):
        bad.append(
            Violation(
                i,
                "WeightShape",
                f"weight set is {w.c_out}x{w.c_in}x{w.k_h}x{w.k_w}, layer wants "
                f"{layer.c_out}x{layer.c_in}x{g.k_h}x{g.k_w}",
            )
        )
        return
    want = (layer.c_out, g.k_h, g.k_w, layer.t_in)
    if w.words.dtype != np.uint16 or w.words.shape != want:
        bad.append(
            Violation(
                i,
                "WeightShape",
                f"weight words must be uint16 {want}, got {w.words.dtype} "
                f"{w.words.shape}",
            )
        )
        return
    mask = core.tile_mask(layer.c_in, layer.t_in - 1)
    if np.any(w.words[..., -1] & ~np.uint16(mask)):
        bad.append(
            Violation(i, "WeightPadBits", "weight bits set for padding channels")
        )
    if len(layer.thresholds) != layer.c_out:
        bad.append(
            Violation(
                i,
                "ThresholdCount",
                f"{len(layer.thresholds)} thresholds for {layer.c_out} channels",
            )
        )
        return
    off = layer.threshold_offset
    for ch, spec in enumerate(layer.thresholds):
        if spec.mode not in core.THRESHOLD_MODES:
            bad.append(
                Violation(i, "ThresholdMode", f"channel {ch}: mode {spec.mode!r}")
            )
            continue
        if spec.mode == core.MODE_CONST:
            if spec.const_bit not in (0, 1):
                bad.append(
                    Violation(
                        i, "ConstBit", f"channel {ch}: const_bit {spec.const_bit}"
                    )
                )
            continue
        stored = spec.threshold - off
        for label, t in (("stored", stored), ("effective", spec.threshold)):
            if not INT16_MIN <= t <= INT16_MAX:
                bad.append(
                    Violation(
                        i,
                        "ThresholdRange",
                        f"channel {ch}: {label} threshold {t} outside 16-bit range",
                    )
                )
    if layer.pool.enabled and (layer.pool.size < 1 or layer.pool.stride < 1):
        bad.append(
            Violation(
                i,
                "PoolRange",
                f"pool size={layer.pool.size} stride={layer.pool.stride}",
            )
        )


def validate_model(model: ModelDescriptor) -> list[Violation]:
    """All invariant violations, empty when the model is well formed."""
    bad: list[Violation] = []
    shape = tuple(model.input_shape)
    if len(shape) != 3 or any(int(d) < 1 for d in shape):
        bad.append(Violation(None, "InputShape", f"input_shape {shape}"))
        return bad
    h, w, c = shape
    if not model.layers:
        bad.append(Violation(None, "NoLayers", "model has no layers"))
    for i, layer in enumerate(model.layers):
        _check_layer(i, layer, bad)
        if layer.c_in != c:
            bad.append(
                Violation(
                    i,
                    "ChannelMismatch",
                    f"c_in={layer.c_in} but previous stage provides {c}",
                )
            )
        g = layer.geometry
        if min(g.k_h, g.k_w, g.stride_y, g.stride_x) < 1:
            return bad
        oh, ow = g.out_dims(h, w)
        if oh < 1 or ow < 1:
            bad.append(
                Violation(
                    i,
                    "SpatialUnderflow",
                    f"kernel {g.k_h}x{g.k_w} on {h}x{w} input gives {oh}x{ow}",
                )
            )
            return bad
        if layer.pool.enabled:
            if layer.pool.size > oh or layer.pool.size > ow:
                bad.append(
                    Violation(
                        i,
                        "PoolOverrun",
                        f"pool window {layer.pool.size} exceeds conv output "
                        f"{oh}x{ow}",
                    )
                )
                return bad
            oh, ow = layer.pool.out_dims(oh, ow)
        h, w, c = oh, ow, layer.c_out
    return bad


_POOL_KEYS = {"enabled", "size", "stride"}
_THR_KEYS = {"mode", "t", "const_bit"}
_LAYER_KEYS = {
    "c_in", "c_out", "k_h", "k_w", "stride_y", "stride_x",
    "pad_y", "pad_x", "pad_value", "pool", "thresholds", "weights",
}
_TOP_KEYS = {"format_tag", "name", "input_shape", "layers"}


def _require_keys(obj: dict, want: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    missing = want - obj.keys()
    extra = obj.keys() - want
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unknown fields {sorted(extra)}")


def _as_int(obj, where: str) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise SchemaError(f"{where}: expected an integer, got {obj!r}")
    return obj


def _layer_from_json(i: int, obj: dict) -> LayerDescriptor:
    where = f"layers[{i}]"
    _require_keys(obj, _LAYER_KEYS, where)
    ints = {
        k: _as_int(obj[k], f"{where}.{k}")
        for k in (
            "c_in", "c_out", "k_h", "k_w", "stride_y", "stride_x",
            "pad_y", "pad_x", "pad_value",
        )
    }
    geom = ConvGeometry(
        k_h=ints["k_h"], k_w=ints["k_w"],
        stride_y=ints["stride_y"], stride_x=ints["stride_x"],
        pad_y=ints["pad_y"], pad_x=ints["pad_x"], pad_value=ints["pad_value"],
    )
    _require_keys(obj["pool"], _POOL_KEYS, f"{where}.pool")
    if not isinstance(obj["pool"]["enabled"], bool):
        raise SchemaError(f"{where}.pool.enabled: expected a boolean")
    pool = PoolConfig(
        enabled=obj["pool"]["enabled"],
        size=_as_int(obj["pool"]["size"], f"{where}.pool.size"),
        stride=_as_int(obj["pool"]["stride"], f"{where}.pool.stride"),
    )
    if not isinstance(obj["thresholds"], list):
        raise SchemaError(f"{where}.thresholds: expected an array")
    specs = []
    for ch, t in enumerate(obj["thresholds"]):
        _require_keys(t, _THR_KEYS, f"{where}.thresholds[{ch}]")
        if not isinstance(t["mode"], str):
            raise SchemaError(f"{where}.thresholds[{ch}].mode: expected a string")
        specs.append(
            ThresholdSpec(
                mode=t["mode"],
                threshold=_as_int(t["t"], f"{where}.thresholds[{ch}].t"),
                const_bit=_as_int(t["const_bit"], f"{where}.thresholds[{ch}].const_bit"),
            )
        )
    if not isinstance(obj["weights"], str):
        raise SchemaError(f"{where}.weights: expected base64 text")
    try:
        blob = base64.b64decode(obj["weights"], validate=True)
    except Exception as e:
        raise SchemaError(f"{where}.weights: bad base64 ({e})") from None
    t_in = tiles_for(max(ints["c_in"], 1))
    want_words = ints["c_out"] * ints["k_h"] * ints["k_w"] * t_in
    if len(blob) != 2 * want_words:
        raise SchemaError(
            f"{where}.weights: blob holds {len(blob) // 2} words, geometry "
            f"needs {want_words}"
        )
    words = np.frombuffer(blob, dtype="<u2").astype(np.uint16).reshape(
        ints["c_out"], ints["k_h"], ints["k_w"], t_in
    )
    weights = WeightSet(
        c_out=ints["c_out"], k_h=ints["k_h"], k_w=ints["k_w"], c_in=ints["c_in"],
        words=words,
    )
    layer = LayerDescriptor(
        geometry=geom, c_in=ints["c_in"], c_out=ints["c_out"],
        weights=weights, thresholds=tuple(specs), pool=pool,
    )
    # file -> effective: fold the channel-padding constant into GE/LE rules
    layer.thresholds = shift_thresholds(layer.thresholds, layer.threshold_offset)
    return layer


def load_model(path) -> ModelDescriptor:
    """Read and fully validate an XBM1 model file."""
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from None
    _require_keys(doc, _TOP_KEYS, "model")
    if doc["format_tag"] != FORMAT_TAG:
        raise SchemaError(f"format_tag {doc['format_tag']!r}, expected {FORMAT_TAG!r}")
    if not isinstance(doc["name"], str):
        raise SchemaError("name: expected a string")
    shape = doc["input_shape"]
    if not (isinstance(shape, list) and len(shape) == 3):
        raise SchemaError("input_shape: expected [H, W, C]")
    if not isinstance(doc["layers"], list):
        raise SchemaError("layers: expected an array")
    model = ModelDescriptor(
        name=doc["name"],
        input_shape=tuple(_as_int(d, "input_shape") for d in shape),
        layers=[_layer_from_json(i, it) for i, it in enumerate(doc["layers"])],
    )
    bad = validate_model(model)
    if bad:
        raise ValidationError(bad)
    return model


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def model_to_json(model: ModelDescriptor) -> dict:
    layers = []
    for layer in model.layers:
        g = layer.geometry
        stored = shift_thresholds(layer.thresholds, -layer.threshold_offset)
        layers.append(
            {
                "c_in": layer.c_in,
                "c_out": layer.c_out,
                "k_h": g.k_h, "k_w": g.k_w,
                "stride_y": g.stride_y, "stride_x": g.stride_x,
                "pad_y": g.pad_y, "pad_x": g.pad_x,
                "pad_value": g.pad_value,
                "pool": {
                    "enabled": layer.pool.enabled,
                    "size": layer.pool.size,
                    "stride": layer.pool.stride,
                },
                "thresholds": [
                    {"mode": s.mode, "t": s.threshold, "const_bit": s.const_bit}
                    for s in stored
                ],
                "weights": base64.b64encode(
                    np.ascontiguousarray(layer.weights.words, dtype="<u2").tobytes()
                ).decode("ascii"),
            }
        )
    return {
        "format_tag": FORMAT_TAG,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "layers": layers,
    }


def save_model(model: ModelDescriptor, path) -> None:
    """Write an XBM1 file atomically; the model must validate first."""
    bad = validate_model(model)
    if bad:
        raise ValidationError(bad)
    text = json.dumps(model_to_json(model), indent=1, sort_keys=True)
    _atomic_write(path, text.encode("ascii") + b"\n")


def gen_random_fmap(seed, h: int, w: int, c: int) -> BinaryFeatureMap:
    """Deterministic random bipolar feature map."""
    rng = np.random.default_rng(seed)
    return BinaryFeatureMap.from_values(rng.choice([-1, 1], (c, h, w)))


def _sample_layer(rng, h: int, w: int, c_in: int, max_c: int) -> LayerDescriptor:
    k_h = int(rng.integers(1, min(MAX_KERNEL, h) + 1))
    k_w = int(rng.integers(1, min(MAX_KERNEL, w) + 1))
    geom = ConvGeometry(
        k_h=k_h, k_w=k_w,
        stride_y=int(rng.integers(1, 3)), stride_x=int(rng.integers(1, 3)),
        pad_y=int(rng.integers(0, k_h)), pad_x=int(rng.integers(0, k_w)),
        pad_value=int(rng.choice([-1, 1])),
    )
    c_out = int(rng.integers(1, max_c + 1))
    weights = WeightSet.from_values(rng.choice([-1, 1], (c_out, c_in, k_h, k_w)))
    bound = k_h * k_w * c_in
    specs = []
    for _ in range(c_out):
        # resample until the folded threshold leaves headroom for the
        # channel-padding offset within the 16-bit budget
        spec = None
        for _attempt in range(20):
            gamma = 0.0 if rng.random() < 0.06 else float(rng.normal(0, 1.0))
            beta = float(rng.normal(0, 1.0))
            mu = float(rng.normal(0, max(bound / 4, 1.0)))
            sigma = float(abs(rng.normal(0, max(bound / 4, 1.0)))) + 0.25
            if gamma != 0 and abs(mu - beta * sigma / gamma) > 12000:
                continue
            spec = core.fold_bn_threshold(gamma, beta, mu, sigma)
            break
        specs.append(spec or core.fold_bn_threshold(1.0, 0.0, 0.0, 1.0))
    oh, ow = geom.out_dims(h, w)
    pool = PoolConfig()
    if min(oh, ow) >= 2 and rng.random() < 0.35:
        size = int(rng.integers(2, min(3, oh, ow) + 1))
        pool = PoolConfig(enabled=True, size=size, stride=int(rng.integers(1, size + 1)))
    layer = LayerDescriptor(
        geometry=geom, c_in=c_in, c_out=c_out, weights=weights,
        thresholds=tuple(specs), pool=pool,
    )
    layer.thresholds = shift_thresholds(layer.thresholds, layer.threshold_offset)
    return layer


def gen_random_model(
    seed, depth: int, max_hw: int = 16, max_c: int = 64
) -> ModelDescriptor:
    """Deterministic random model that validates and compiles.

    Candidates are drawn from rng(seed, attempt) and resampled until one
    compiles under the default memory configuration, so generated fixtures
    are always usable end-to-end. Resampling is part of the determinism
    contract: a given seed always yields the same model.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    from . import compiler  # deferred: compiler imports this module

    for attempt in range(1000):
        rng = np.random.default_rng([int(seed), attempt])
        h = int(rng.integers(2, max_hw + 1))
        w = int(rng.integers(2, max_hw + 1))
        c = int(rng.integers(1, max_c + 1))
        model = ModelDescriptor(name=f"random-{seed}", input_shape=(h, w, c), layers=[])
        for _ in range(depth):
            layer = _sample_layer(rng, h, w, c, max_c)
            model.layers.append(layer)
            oh, ow = layer.out_dims(h, w)
            h, w, c = oh, ow, layer.c_out
        assert not validate_model(model)
        try:
            compiler.compile_model(model, compiler.MemoryConfig())
        except CompileError:
            continue
        return model
    raise RuntimeError(f"no compilable model found for seed {seed}")
