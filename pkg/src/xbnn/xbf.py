"""XBF1 binary activation files.

Layout: 4-byte magic "XBF1", then H, W, C as little-endian uint16, then
H*W*ceil(C/16) packed words as little-endian uint16 in BinaryFeatureMap
index order (t*H + y)*W + x. The format exists so runs can be compared
byte-for-byte.
"""

from __future__ import annotations

import numpy as np

from .core import BinaryFeatureMap, tiles_for
from .errors import ParseError
from .model import _atomic_write

MAGIC = b"XBF1"


def save_fmap(fmap: BinaryFeatureMap, path) -> None:
    fmap.check()
    header = MAGIC + np.array([fmap.h, fmap.w, fmap.c], dtype="<u2").tobytes()
    body = np.ascontiguousarray(fmap.words, dtype="<u2").tobytes()
    _atomic_write(path, header + body)


def load_fmap(path) -> BinaryFeatureMap:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise ParseError(f"{path}: not an XBF1 file")
    h, w, c = (int(v) for v in np.frombuffer(raw[4:10], dtype="<u2"))
    if h < 1 or w < 1 or c < 1:
        raise ParseError(f"{path}: bad dims {h}x{w}x{c}")
    want = tiles_for(c) * h * w
    if len(raw) != 10 + 2 * want:
        raise ParseError(
            f"{path}: body holds {(len(raw) - 10) // 2} words, dims need {want}"
        )
    words = np.frombuffer(raw[10:], dtype="<u2").astype(np.uint16)
    fmap = BinaryFeatureMap(h=h, w=w, c=c, words=words.reshape(tiles_for(c), h, w))
    try:
        fmap.check()
    except Exception as e:
        raise ParseError(f"{path}: {e}") from None
    return fmap
