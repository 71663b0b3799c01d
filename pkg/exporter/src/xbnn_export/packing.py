"""Sign binarization and the packed word layout of XBM1 weight blobs.

A word covers 16 consecutive input channels: bit (c mod 16) of tile
c // 16 is 1 for a +1 weight and 0 for a -1 weight. Channels past c_in in
the last tile stay 0. Blobs serialize the (c_out, k_h, k_w, tile) array
as little-endian uint16 in C order.
"""

from __future__ import annotations

import base64

import numpy as np

CHANNELS_PER_WORD = 16


def tiles_for(channels: int) -> int:
    return -(-channels // CHANNELS_PER_WORD)


def binarize_sign(w: np.ndarray) -> np.ndarray:
    """Map real weights onto {0, 1} bit values; exact zero rounds up to +1."""
    return (np.asarray(w, dtype=np.float64) >= 0).astype(np.uint8)


def pack_weight_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (c_out, c_in, k_h, k_w) bit tensor into XBM1 weight words."""
    c_out, c_in, k_h, k_w = bits.shape
    t_in = tiles_for(c_in)
    lanes = np.zeros((c_out, t_in * CHANNELS_PER_WORD, k_h, k_w), dtype=np.uint32)
    lanes[:, :c_in] = bits
    lanes = lanes.reshape(c_out, t_in, CHANNELS_PER_WORD, k_h, k_w)
    place = (np.uint32(1) << np.arange(CHANNELS_PER_WORD, dtype=np.uint32))
    words = (lanes * place[None, None, :, None, None]).sum(axis=2)
    return words.transpose(0, 2, 3, 1).astype(np.uint16)


def encode_weight_blob(words: np.ndarray) -> str:
    raw = np.ascontiguousarray(words, dtype="<u2").tobytes()
    return base64.b64encode(raw).decode("ascii")
