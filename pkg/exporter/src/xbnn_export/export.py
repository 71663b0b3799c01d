"""Turn a trained checkpoint plus a layer map into an XBM1 model file.

The checkpoint side of the conversion is a plain torch state dict. The map
is a small YAML file naming, per layer, the conv and batch-norm modules to
read and the geometry the checkpoint does not record (stride, padding,
border fill, pooling). Only the conv -> batch norm -> sign chain with
optional max pooling is expressible on the target, so anything else in the
map is rejected rather than approximated.

Thresholds written to the file are in the true-sum domain: the loader on
the consuming side folds in its own channel-padding constant. Both the
stored value and that shifted image must fit a signed 16-bit register.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch
import yaml

from .errors import (
    CheckpointError,
    InvalidCheckpoint,
    KernelTooLarge,
    MapError,
    ShapeMismatch,
    UnsupportedLayer,
)
from .fold import MODE_CONST, fold_channel
from .packing import (
    CHANNELS_PER_WORD,
    binarize_sign,
    encode_weight_blob,
    pack_weight_bits,
    tiles_for,
)

FORMAT_TAG = "XBM1"
LAYER_TYPE = "conv_bn_sign"
MAX_KERNEL = 7
DEFAULT_EPS = 1e-5
INT16_MIN = -(1 << 15)
INT16_MAX = (1 << 15) - 1

_TOP_KEYS = {"name", "input_shape", "layers"}
_LAYER_KEYS = {"type", "conv", "bn", "eps", "stride", "padding", "pad_value", "pool"}
_POOL_KEYS = {"kind", "size", "stride"}


@dataclasses.dataclass(frozen=True)
class SourceLayer:
    """One mapped layer: checkpoint tensors joined with map geometry."""

    index: int
    weight: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    stride: tuple[int, int]
    padding: tuple[int, int]
    pad_value: int
    pool: tuple[int, int] | None

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _pair(value, name: str, minimum: int):
    if isinstance(value, bool):
        raise MapError(f"{name}: expected an integer or [y, x] pair")
    if isinstance(value, int):
        value = [value, value]
    if not (
        isinstance(value, list)
        and len(value) == 2
        and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise MapError(f"{name}: expected an integer or [y, x] pair")
    if any(v < minimum for v in value):
        raise MapError(f"{name}: values below {minimum} make no sense")
    return int(value[0]), int(value[1])


def _check_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise MapError(f"{where}: expected a mapping")
    extra = obj.keys() - allowed
    if extra:
        raise MapError(f"{where}: unknown keys {sorted(extra)}")
    missing = required - obj.keys()
    if missing:
        raise MapError(f"{where}: missing keys {sorted(missing)}")


def _normalize_layer(i: int, entry) -> dict:
    where = f"layers[{i}]"
    _check_keys(entry, _LAYER_KEYS, {"conv", "bn"}, where)
    kind = entry.get("type", LAYER_TYPE)
    if kind != LAYER_TYPE:
        raise UnsupportedLayer(
            f"{where}: type {kind!r} has no mapping onto the target; only "
            f"{LAYER_TYPE!r} chains are expressible"
        )
    for key in ("conv", "bn"):
        if not isinstance(entry[key], str) or not entry[key]:
            raise MapError(f"{where}.{key}: expected a module name")
    eps = entry.get("eps", DEFAULT_EPS)
    if isinstance(eps, bool) or not isinstance(eps, (int, float)) or eps < 0:
        raise MapError(f"{where}.eps: expected a non-negative number")
    stride = _pair(entry.get("stride", 1), f"{where}.stride", 1)
    padding = _pair(entry.get("padding", 0), f"{where}.padding", 0)
    pad_value = entry.get("pad_value", -1)
    if pad_value not in (-1, 1) or isinstance(pad_value, bool):
        raise MapError(f"{where}.pad_value: border fill must be +1 or -1")
    pool = None
    if "pool" in entry and entry["pool"] is not None:
        pw = f"{where}.pool"
        _check_keys(entry["pool"], _POOL_KEYS, {"size"}, pw)
        kind = entry["pool"].get("kind", "max")
        if kind != "max":
            raise UnsupportedLayer(
                f"{pw}: {kind!r} pooling is not representable; the target "
                "only merges sign bits, which is max pooling"
            )
        size = entry["pool"]["size"]
        p_stride = entry["pool"].get("stride", size)
        for label, v in (("size", size), ("stride", p_stride)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise MapError(f"{pw}.{label}: expected a positive integer")
        pool = (int(size), int(p_stride))
    return {
        "conv": entry["conv"],
        "bn": entry["bn"],
        "eps": float(eps),
        "stride": stride,
        "padding": padding,
        "pad_value": int(pad_value),
        "pool": pool,
    }


def load_map(path) -> dict:
    """Read and normalize a layer-mapping YAML file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as e:
        raise MapError(f"cannot read {path}: {e}") from None
    except yaml.YAMLError as e:
        raise MapError(f"{path} is not valid YAML: {e}") from None
    _check_keys(doc, _TOP_KEYS, {"input_shape", "layers"}, "map")
    name = doc.get("name", "exported-model")
    if not isinstance(name, str) or not name:
        raise MapError("map.name: expected a non-empty string")
    shape = doc["input_shape"]
    if not (
        isinstance(shape, list)
        and len(shape) == 3
        and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in shape)
    ):
        raise MapError("map.input_shape: expected [H, W, C] of positive integers")
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise MapError("map.layers: expected a non-empty list")
    layers = [_normalize_layer(i, e) for i, e in enumerate(doc["layers"])]
    return {"name": name, "input_shape": tuple(shape), "layers": layers}


def load_checkpoint(path) -> dict:
    """Load a torch checkpoint and return its tensors as numpy arrays."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    except Exception as e:
        raise CheckpointError(f"{path} is not a loadable checkpoint: {e}") from None
    if isinstance(blob, dict) and isinstance(blob.get("state_dict"), dict):
        blob = blob["state_dict"]
    if not isinstance(blob, dict):
        raise CheckpointError(f"{path}: expected a state dict, got {type(blob).__name__}")
    state = {}
    for key, value in blob.items():
        if isinstance(value, torch.Tensor):
            state[str(key)] = value.detach().cpu().numpy()
    if not state:
        raise CheckpointError(f"{path}: state dict holds no tensors")
    return state


def _tensor(state: dict, name: str, where: str) -> np.ndarray:
    if name not in state:
        raise ShapeMismatch(f"{where}: checkpoint has no tensor {name!r}")
    return state[name]


def resolve_layers(state: dict, mapcfg: dict) -> list[SourceLayer]:
    """Join checkpoint tensors with map geometry and check every shape."""
    h, w, c_prev = mapcfg["input_shape"]
    layers = []
    for i, entry in enumerate(mapcfg["layers"]):
        where = f"layers[{i}]"
        weight = _tensor(state, f"{entry['conv']}.weight", where)
        if weight.ndim != 4:
            raise ShapeMismatch(
                f"{where}: conv weight is {weight.ndim}-d, expected "
                "(c_out, c_in, k_h, k_w)"
            )
        c_out, c_in, k_h, k_w = weight.shape
        bias_name = f"{entry['conv']}.bias"
        if bias_name in state and np.any(state[bias_name] != 0):
            raise UnsupportedLayer(
                f"{where}: conv carries a non-zero bias; fold it into the "
                "batch-norm mean before export"
            )
        if min(k_h, k_w) < 1:
            raise ShapeMismatch(f"{where}: degenerate kernel {k_h}x{k_w}")
        if max(k_h, k_w) > MAX_KERNEL:
            raise KernelTooLarge(
                f"{where}: kernel {k_h}x{k_w} exceeds the {MAX_KERNEL}x"
                f"{MAX_KERNEL} array; stack several smaller convolutions "
                "instead of one wide window"
            )
        if c_in != c_prev:
            raise ShapeMismatch(
                f"{where}: conv expects {c_in} input channels, the running "
                f"feature map carries {c_prev}"
            )
        bn = {}
        for field in ("weight", "bias", "running_mean", "running_var"):
            t = _tensor(state, f"{entry['bn']}.{field}", where)
            if t.shape != (c_out,):
                raise ShapeMismatch(
                    f"{where}: {entry['bn']}.{field} has shape {t.shape}, "
                    f"conv emits {c_out} channels"
                )
            bn[field] = t.astype(np.float64)
        var_eps = bn["running_var"] + entry["eps"]
        if not np.all(np.isfinite(var_eps)) or np.any(var_eps <= 0):
            raise InvalidCheckpoint(
                f"{where}: running_var + eps must be positive and finite"
            )
        s_y, s_x = entry["stride"]
        p_y, p_x = entry["padding"]
        if p_y >= k_h or p_x >= k_w:
            raise MapError(
                f"{where}.padding: ({p_y}, {p_x}) must stay below the "
                f"kernel ({k_h}, {k_w})"
            )
        out_h = (h + 2 * p_y - k_h) // s_y + 1
        out_w = (w + 2 * p_x - k_w) // s_x + 1
        if out_h < 1 or out_w < 1:
            raise ShapeMismatch(
                f"{where}: {h}x{w} input shrinks below 1x1 under this kernel"
            )
        pool = entry["pool"]
        if pool is not None:
            if pool[0] > out_h or pool[0] > out_w:
                raise ShapeMismatch(
                    f"{where}: pool window {pool[0]} overruns the "
                    f"{out_h}x{out_w} conv output"
                )
            out_h = (out_h - pool[0]) // pool[1] + 1
            out_w = (out_w - pool[0]) // pool[1] + 1
        layers.append(
            SourceLayer(
                index=i,
                weight=weight.astype(np.float64),
                gamma=bn["weight"],
                beta=bn["bias"],
                mu=bn["running_mean"],
                sigma=np.sqrt(var_eps),
                stride=(s_y, s_x),
                padding=(p_y, p_x),
                pad_value=entry["pad_value"],
                pool=pool,
            )
        )
        h, w, c_prev = out_h, out_w, c_out
    return layers


def _layer_document(layer: SourceLayer) -> dict:
    k_h, k_w = layer.kernel
    # the consuming loader shifts ge/le thresholds by this channel-padding
    # constant; both the stored and the shifted value must fit int16
    offset = k_h * k_w * (CHANNELS_PER_WORD * tiles_for(layer.c_in) - layer.c_in)
    thresholds = []
    for ch in range(layer.c_out):
        mode, t, const_bit = fold_channel(
            float(layer.gamma[ch]), float(layer.beta[ch]),
            float(layer.mu[ch]), float(layer.sigma[ch]),
        )
        if mode != MODE_CONST:
            for label, v in (("stored", t), ("loaded", t + offset)):
                if not INT16_MIN <= v <= INT16_MAX:
                    raise InvalidCheckpoint(
                        f"layers[{layer.index}] channel {ch}: {label} "
                        f"threshold {v} leaves the signed 16-bit range"
                    )
        thresholds.append({"mode": mode, "t": t, "const_bit": const_bit})
    pool = layer.pool
    return {
        "c_in": layer.c_in,
        "c_out": layer.c_out,
        "k_h": k_h,
        "k_w": k_w,
        "stride_y": layer.stride[0],
        "stride_x": layer.stride[1],
        "pad_y": layer.padding[0],
        "pad_x": layer.padding[1],
        "pad_value": layer.pad_value,
        "pool": {
            "enabled": pool is not None,
            "size": pool[0] if pool else 1,
            "stride": pool[1] if pool else 1,
        },
        "thresholds": thresholds,
        "weights": encode_weight_blob(pack_weight_bits(binarize_sign(layer.weight))),
    }


def model_document(mapcfg: dict, layers: list[SourceLayer]) -> dict:
    return {
        "format_tag": FORMAT_TAG,
        "name": mapcfg["name"],
        "input_shape": list(mapcfg["input_shape"]),
        "layers": [_layer_document(layer) for layer in layers],
    }


def write_document(doc: dict, path) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(text.encode("ascii") + b"\n")


def export(checkpoint_path, map_path, out_path) -> dict:
    """Full pipeline: read, resolve, fold, pack, write. Returns the document."""
    mapcfg = load_map(map_path)
    state = load_checkpoint(checkpoint_path)
    layers = resolve_layers(state, mapcfg)
    doc = model_document(mapcfg, layers)
    write_document(doc, out_path)
    return doc
