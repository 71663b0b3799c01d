"""OR-pooling over per-channel bit planes."""

import numpy as np
import pytest

from xbnn import core
from xbnn.errors import ShapeError


def max_pool_decoded(values, size, stride):
    """Oracle: max-pool on the decoded +1/-1 tensor."""
    c, h, w = values.shape
    out_h = (h - size) // stride + 1
    out_w = (w - size) // stride + 1
    out = np.empty((c, out_h, out_w), dtype=values.dtype)
    for oy in range(out_h):
        for ox in range(out_w):
            win = values[:, oy * stride:oy * stride + size, ox * stride:ox * stride + size]
            out[:, oy, ox] = win.max(axis=(1, 2))
    return out


def test_pool_basic_or():
    bits = np.array([[[1, 0], [0, 1]], [[0, 0], [0, 0]]], dtype=np.uint8)
    out = core.pool_or(bits, size=2, stride=2)
    assert out.shape == (2, 1, 1)
    assert out[0, 0, 0] == 1
    assert out[1, 0, 0] == 0


def test_pool_matches_decoded_max():
    rng = np.random.default_rng(71)
    for c, h, w, size, stride in [
        (16, 4, 4, 2, 2),
        (16, 6, 6, 2, 2),
        (32, 6, 6, 3, 3),
        (17, 7, 7, 3, 2),  # overlapping windows
        (48, 9, 9, 3, 2),
        (16, 5, 5, 5, 1),
    ]:
        values = rng.choice([-1, 1], (c, h, w))
        bits = (values > 0).astype(np.uint8)
        pooled_bits = core.pool_or(bits, size, stride)
        want = (max_pool_decoded(values, size, stride) > 0).astype(np.uint8)
        assert np.array_equal(pooled_bits, want)


def test_pool_identity_when_size_one():
    rng = np.random.default_rng(73)
    bits = rng.integers(0, 2, (2, 3, 3)).astype(np.uint8)
    assert np.array_equal(core.pool_or(bits, 1, 1), bits)


def test_pool_accepts_single_plane():
    bits = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    out = core.pool_or(bits, 2, 2)
    assert out.shape == (1, 1)
    assert out[0, 0] == 1


def test_pool_overlapping_windows_share_pixels():
    # 3x3 window stride 2 over 5x5: center pixel feeds all four outputs
    bits = np.zeros((1, 5, 5), dtype=np.uint8)
    bits[0, 2, 2] = 1
    out = core.pool_or(bits, 3, 2)
    assert out.shape == (1, 2, 2)
    assert np.all(out == 1)


def test_pool_rejects_bad_geometry():
    bits = np.zeros((1, 3, 3), dtype=np.uint8)
    with pytest.raises(ShapeError):
        core.pool_or(bits, 4, 2)
    with pytest.raises(ShapeError):
        core.pool_or(bits, 0, 1)
    with pytest.raises(ShapeError):
        core.pool_or(bits, 2, 0)
