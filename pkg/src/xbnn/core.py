"""Bit-true bipolar arithmetic, packing, and the reference forward pass.

Encoding convention, used everywhere in the package: bit 1 encodes +1 and
bit 0 encodes -1, so the product of two bipolar values is the XNOR of their
bits and a 16-channel dot product collapses to 16 - 2*popcount(a ^ b).
Channel 16*t + i of a feature map sits at bit i of tile word t.

Channels are padded up to a multiple of 16. Padding channels carry bit 0 in
both activations and weights, so every (tap, padding channel) pair adds
exactly +1 to a convolution sum. The constant k_h*k_w*pad_count this adds is
folded into the stored thresholds by the model loader, keeping the packed
path bit-identical to the unpacked math without branches in the hot loop.

Spatial padding uses a per-tile constant word whose real-channel bits encode
the configured pad value and whose padding-channel bits stay 0, preserving
the invariant above. Sign ties binarize to +1 (bit 1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidBatchNorm, InvalidBipolar, ShapeError

WORD_BITS = 16

MODE_GE = "GE"
MODE_LE = "LE"
MODE_CONST = "CONST"
THRESHOLD_MODES = (MODE_GE, MODE_LE, MODE_CONST)

INT16_MIN = -(1 << 15)
INT16_MAX = (1 << 15) - 1

# One entry per 16-bit pattern; 64 KiB, built once at import.
_POPCOUNT = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.uint8)


def popcount16(words):
    """Set-bit count of 16-bit word(s); accepts scalars or uint16 arrays."""
    return _POPCOUNT[words]


def tiles_for(channels: int) -> int:
    """Number of 16-channel tiles needed to hold `channels` channels."""
    return -(-channels // WORD_BITS)


def tile_mask(channels: int, tile: int) -> int:
    """Bit mask of the real (non-padding) channels within one tile word."""
    n = min(channels - tile * WORD_BITS, WORD_BITS)
    return (1 << n) - 1 if n > 0 else 0


def encode_bipolar(values) -> int:
    """Pack 16 values in {-1, +1} into one word, bit i = (v_i + 1) / 2."""
    v = np.asarray(values, dtype=np.int64)
    if v.shape != (WORD_BITS,):
        raise ShapeError(f"expected 16 values, got shape {v.shape}")
    if not np.all((v == 1) | (v == -1)):
        bad = v[(v != 1) & (v != -1)][0]
        raise InvalidBipolar(f"value {bad} is not in {{-1, +1}}")
    bits = (v > 0).astype(np.uint32)
    return int((bits << np.arange(WORD_BITS, dtype=np.uint32)).sum())


def decode_bipolar(word: int) -> np.ndarray:
    """Unpack one word into 16 values in {-1, +1} (channel i at bit i)."""
    bits = (int(word) >> np.arange(WORD_BITS)) & 1
    return (2 * bits - 1).astype(np.int8)


def dot16(a: int, b: int) -> int:
    """Dot product of two packed 16-channel bipolar vectors.

    Equals sum_i decode(a)_i * decode(b)_i = 16 - 2*popcount(a ^ b).
    Always even, in [-16, +16].
    """
    return WORD_BITS - 2 * int(_POPCOUNT[int(a) ^ int(b)])


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel taps, strides, and spatial padding of one convolution layer.

    pad_value is the bipolar value assumed outside the image (+1 or -1);
    padding must stay below the kernel extent so no window is all-padding.
    """

    k_h: int
    k_w: int
    stride_y: int = 1
    stride_x: int = 1
    pad_y: int = 0
    pad_x: int = 0
    pad_value: int = -1

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        out_h = (h + 2 * self.pad_y - self.k_h) // self.stride_y + 1
        out_w = (w + 2 * self.pad_x - self.k_w) // self.stride_x + 1
        return out_h, out_w

    def pad_word(self, channels: int, tile: int) -> int:
        """Constant word used for out-of-bounds taps of one tile.

        Real-channel bits encode pad_value; padding-channel bits stay 0 so
        the channel-padding compensation stays exact.
        """
        return tile_mask(channels, tile) if self.pad_value > 0 else 0


@dataclass
class BinaryFeatureMap:
    """H x W x C bipolar feature map packed 16 channels per word.

    words has shape (tiles, h, w) in C order, i.e. flat index
    (t*h + y)*w + x, matching the serialized layout.
    """

    h: int
    w: int
    c: int
    words: np.ndarray

    @property
    def tiles(self) -> int:
        return tiles_for(self.c)

    @classmethod
    def from_values(cls, values) -> "BinaryFeatureMap":
        """Pack a (c, h, w) array of {-1, +1} values."""
        v = np.asarray(values)
        if v.ndim != 3:
            raise ShapeError(f"expected (c, h, w) values, got shape {v.shape}")
        if not np.all((v == 1) | (v == -1)):
            raise InvalidBipolar("feature map values must be -1 or +1")
        c, h, w = v.shape
        t = tiles_for(c)
        bits = np.zeros((t * WORD_BITS, h, w), dtype=np.uint16)
        bits[:c] = v > 0
        shifts = np.arange(WORD_BITS, dtype=np.uint16).reshape(1, WORD_BITS, 1, 1)
        words = (bits.reshape(t, WORD_BITS, h, w) << shifts).sum(
            axis=1, dtype=np.uint16
        )
        return cls(h=h, w=w, c=c, words=words)

    def decode(self) -> np.ndarray:
        """Unpack to a (c, h, w) array of {-1, +1} int8 values."""
        t = self.tiles
        shifts = np.arange(WORD_BITS, dtype=np.uint16).reshape(1, WORD_BITS, 1, 1)
        bits = (self.words.reshape(t, 1, self.h, self.w) >> shifts) & 1
        full = bits.reshape(t * WORD_BITS, self.h, self.w)
        return (2 * full[: self.c].astype(np.int8)) - 1

    def check(self) -> None:
        """Raise ShapeError if dims, dtype, or padding-bit invariants fail."""
        if self.h < 1 or self.w < 1 or self.c < 1:
            raise ShapeError(f"bad feature map dims {self.h}x{self.w}x{self.c}")
        if self.words.dtype != np.uint16 or self.words.shape != (
            self.tiles,
            self.h,
            self.w,
        ):
            raise ShapeError(
                f"words must be uint16 of shape {(self.tiles, self.h, self.w)}, "
                f"got {self.words.dtype} {self.words.shape}"
            )
        mask = tile_mask(self.c, self.tiles - 1)
        if np.any(self.words[-1] & ~np.uint16(mask)):
            raise ShapeError("padding-channel bits must be 0")

    def same_as(self, other: "BinaryFeatureMap") -> bool:
        return (
            (self.h, self.w, self.c) == (other.h, other.w, other.c)
            and np.array_equal(self.words, other.words)
        )


@dataclass
class WeightSet:
    """Binary filter bank for one layer, packed like the feature maps.

    words has shape (c_out, k_h, k_w, t_in) in C order, i.e. flat index
    ((o*k_h + r)*k_w + c)*t_in + t. Kernels are limited to 7x7 taps.
    """

    c_out: int
    k_h: int
    k_w: int
    c_in: int
    words: np.ndarray

    @property
    def t_in(self) -> int:
        return tiles_for(self.c_in)

    @classmethod
    def from_values(cls, values) -> "WeightSet":
        """Pack a (c_out, c_in, k_h, k_w) array of {-1, +1} values."""
        v = np.asarray(values)
        if v.ndim != 4:
            raise ShapeError(f"expected (c_out, c_in, k_h, k_w), got {v.shape}")
        if not np.all((v == 1) | (v == -1)):
            raise InvalidBipolar("weights must be -1 or +1")
        c_out, c_in, k_h, k_w = v.shape
        t = tiles_for(c_in)
        bits = np.zeros((c_out, t * WORD_BITS, k_h, k_w), dtype=np.uint16)
        bits[:, :c_in] = v > 0
        shifts = np.arange(WORD_BITS, dtype=np.uint16).reshape(1, 1, WORD_BITS, 1, 1)
        words = (bits.reshape(c_out, t, WORD_BITS, k_h, k_w) << shifts).sum(
            axis=2, dtype=np.uint16
        )
        # to (c_out, k_h, k_w, t)
        return cls(c_out=c_out, k_h=k_h, k_w=k_w, c_in=c_in,
                   words=np.ascontiguousarray(words.transpose(0, 2, 3, 1)))

    def decode(self) -> np.ndarray:
        """Unpack to a (c_out, c_in, k_h, k_w) array of {-1, +1} int8."""
        t = self.t_in
        w = self.words.transpose(0, 3, 1, 2)  # (c_out, t, k_h, k_w)
        shifts = np.arange(WORD_BITS, dtype=np.uint16).reshape(1, 1, WORD_BITS, 1, 1)
        bits = (w.reshape(self.c_out, t, 1, self.k_h, self.k_w) >> shifts) & 1
        full = bits.reshape(self.c_out, t * WORD_BITS, self.k_h, self.k_w)
        return (2 * full[:, : self.c_in].astype(np.int8)) - 1


@dataclass(frozen=True)
class ThresholdSpec:
    """Re-binarization rule for one output channel.

    GE: bit = 1 iff s >= threshold. LE: bit = 1 iff s <= threshold.
    CONST: bit = const_bit regardless of s.
    """

    mode: str
    threshold: int = 0
    const_bit: int = 0


def _clamp_threshold(t: int, where: str) -> int:
    if INT16_MIN <= t <= INT16_MAX:
        return t
    clamped = min(max(t, INT16_MIN), INT16_MAX)
    warnings.warn(
        f"{where}: threshold {t} clamped to 16-bit range ({clamped})",
        stacklevel=3,
    )
    return clamped


def fold_bn_threshold(gamma: float, beta: float, mu: float, sigma: float) -> ThresholdSpec:
    """Collapse batch-norm + sign into an integer threshold rule.

    For every integer s the returned spec reproduces
    bit = [gamma*(s - mu)/sigma + beta >= 0] with the tie at 0 mapping to 1.
    Computed in exact rational arithmetic over the given float values, so
    the ceil/floor never suffers rounding at the boundary.
    """
    if not sigma > 0:
        raise InvalidBatchNorm(f"sigma must be > 0, got {sigma}")
    if gamma == 0:
        return ThresholdSpec(MODE_CONST, 0, 1 if beta >= 0 else 0)
    x = Fraction(mu) - Fraction(beta) * Fraction(sigma) / Fraction(gamma)
    if gamma > 0:
        t = -((-x) // 1)  # ceil
        return ThresholdSpec(MODE_GE, _clamp_threshold(int(t), "fold"))
    t = x // 1  # floor
    return ThresholdSpec(MODE_LE, _clamp_threshold(int(t), "fold"))


def apply_threshold(plane, spec: ThresholdSpec) -> np.ndarray:
    """Binarize an integer plane per one channel's threshold rule."""
    s = np.asarray(plane)
    if spec.mode == MODE_GE:
        return (s >= spec.threshold).astype(np.uint8)
    if spec.mode == MODE_LE:
        return (s <= spec.threshold).astype(np.uint8)
    if spec.mode == MODE_CONST:
        return np.full(s.shape, spec.const_bit, dtype=np.uint8)
    raise ValueError(f"unknown threshold mode {spec.mode!r}")


def apply_thresholds(planes: np.ndarray, specs) -> np.ndarray:
    """Binarize (n, h, w) planes with one ThresholdSpec per leading index."""
    out = np.empty(planes.shape, dtype=np.uint8)
    for i, spec in enumerate(specs):
        out[i] = apply_threshold(planes[i], spec)
    return out


def pool_or(plane: np.ndarray, size: int, stride: int) -> np.ndarray:
    """OR-pool a bit plane; windows must lie fully inside (no padding).

    OR over bits equals max-pooling of the decoded bipolar values.
    Supports a leading batch axis: (h, w) or (n, h, w).
    """
    if size < 1 or stride < 1:
        raise ShapeError(f"bad pooling size={size} stride={stride}")
    p = np.asarray(plane)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[None]
    h, w = p.shape[-2:]
    if size > h or size > w:
        raise ShapeError(f"pool window {size} exceeds plane {h}x{w}")
    out_h = (h - size) // stride + 1
    out_w = (w - size) // stride + 1
    out = np.zeros(p.shape[:-2] + (out_h, out_w), dtype=np.uint8)
    for r in range(size):
        for c in range(size):
            win = p[..., r : r + (out_h - 1) * stride + 1 : stride,
                    c : c + (out_w - 1) * stride + 1 : stride]
            out |= win.astype(np.uint8)
    return out[0] if squeeze else out


def _padded_words(fmap: BinaryFeatureMap, geom: ConvGeometry) -> np.ndarray:
    """Input words with spatial padding applied, shape (t, h+2p, w+2p)."""
    t = fmap.tiles
    ph, pw = fmap.h + 2 * geom.pad_y, fmap.w + 2 * geom.pad_x
    padded = np.empty((t, ph, pw), dtype=np.uint16)
    for ti in range(t):
        padded[ti] = geom.pad_word(fmap.c, ti)
    padded[:, geom.pad_y : geom.pad_y + fmap.h, geom.pad_x : geom.pad_x + fmap.w] = (
        fmap.words
    )
    return padded


def _conv_packed(
    padded: np.ndarray, w_words: np.ndarray, geom: ConvGeometry,
    out_h: int, out_w: int,
) -> np.ndarray:
    """Packed-word correlation over pre-padded input.

    padded: (t, ph, pw) input words; w_words: (f, k_h, k_w, t) filter words.
    Returns (f, out_h, out_w) int32 sums over all 16*t packed channels,
    padding channels included.
    """
    f = w_words.shape[0]
    acc = np.zeros((f, out_h, out_w), dtype=np.int32)
    sy, sx = geom.stride_y, geom.stride_x
    for r in range(geom.k_h):
        for c in range(geom.k_w):
            win = padded[:, r : r + (out_h - 1) * sy + 1 : sy,
                         c : c + (out_w - 1) * sx + 1 : sx]
            x = win[None, :, :, :] ^ w_words[:, r, c, :, None, None]
            pc = _POPCOUNT[x].astype(np.int32).sum(axis=1)
            acc += WORD_BITS * padded.shape[0] - 2 * pc
    return acc


def conv2d_ref(
    fmap: BinaryFeatureMap, weights: WeightSet, o: int, geom: ConvGeometry
) -> np.ndarray:
    """Reference packed convolution for one output filter.

    Correlation convention (no kernel flip); out-of-bounds taps read the
    per-tile pad word. Returns the (out_h, out_w) int32 pre-activation
    sums over all packed channels, padding channels included.
    """
    if weights.c_in != fmap.c:
        raise ShapeError(f"weights expect c_in={weights.c_in}, input has {fmap.c}")
    if not 0 <= o < weights.c_out:
        raise ShapeError(f"filter index {o} out of range 0..{weights.c_out - 1}")
    out_h, out_w = geom.out_dims(fmap.h, fmap.w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"kernel {geom.k_h}x{geom.k_w} does not fit {fmap.h}x{fmap.w} input"
        )
    padded = _padded_words(fmap, geom)
    return _conv_packed(padded, weights.words[o : o + 1], geom, out_h, out_w)[0]


def _pack_bits(bits: np.ndarray, c_out: int) -> np.ndarray:
    """Pack (c_out, h, w) bits into (tiles, h, w) words."""
    t = tiles_for(c_out)
    h, w = bits.shape[1:]
    full = np.zeros((t * WORD_BITS, h, w), dtype=np.uint16)
    full[:c_out] = bits
    shifts = np.arange(WORD_BITS, dtype=np.uint16).reshape(1, WORD_BITS, 1, 1)
    return (full.reshape(t, WORD_BITS, h, w) << shifts).sum(axis=1, dtype=np.uint16)


def forward_layer(layer, fmap: BinaryFeatureMap) -> BinaryFeatureMap:
    """Run one layer: packed conv, thresholds, optional OR-pooling, repack."""
    geom = layer.geometry
    if layer.c_in != fmap.c:
        raise ShapeError(
            f"layer expects {layer.c_in} input channels, feature map has {fmap.c}"
        )
    out_h, out_w = geom.out_dims(fmap.h, fmap.w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"layer output would be {out_h}x{out_w}")
    padded = _padded_words(fmap, geom)
    sums = _conv_packed(padded, layer.weights.words, geom, out_h, out_w)
    bits = apply_thresholds(sums, layer.thresholds)
    if layer.pool.enabled:
        bits = pool_or(bits, layer.pool.size, layer.pool.stride)
    words = _pack_bits(bits, layer.c_out)
    return BinaryFeatureMap(h=bits.shape[1], w=bits.shape[2], c=layer.c_out,
                            words=words)


def forward_ref(model, fmap: BinaryFeatureMap, return_layers: bool = False):
    """Sequential reference forward pass over all layers of a model.

    With return_layers, also returns the per-layer output feature maps.
    """
    if (fmap.h, fmap.w, fmap.c) != tuple(model.input_shape):
        raise ShapeError(
            f"model expects input {tuple(model.input_shape)}, "
            f"got {(fmap.h, fmap.w, fmap.c)}"
        )
    outs = []
    cur = fmap
    for layer in model.layers:
        cur = forward_layer(layer, cur)
        outs.append(cur)
    if return_layers:
        return cur, outs
    return cur
