"""Deterministic workload fixtures shared by tests and calibration.

The large fixture mirrors the convolutional trunk of a binarized AlexNet
from its second convolution onward (its first convolution needs an input
larger than on-chip memory and an 11x11 kernel, both outside this
machine's envelope, so the table starts where the machine can run). The
weights are random: only the layer geometry matters for capacity, cycle,
and energy accounting.
"""

from __future__ import annotations

import numpy as np

from .compiler import MemoryConfig
from .core import ConvGeometry, ThresholdSpec, WeightSet, fold_bn_threshold, tiles_for
from .model import LayerDescriptor, ModelDescriptor, PoolConfig


def _random_weights(rng, c_out: int, c_in: int, k_h: int, k_w: int) -> WeightSet:
    # direct word sampling; c_in must be a whole number of tiles
    assert c_in % 16 == 0
    words = rng.integers(0, 1 << 16, (c_out, k_h, k_w, tiles_for(c_in))).astype(
        np.uint16
    )
    return WeightSet(c_out=c_out, k_h=k_h, k_w=k_w, c_in=c_in, words=words)


def _random_thresholds(rng, c_out: int, bound: int) -> tuple[ThresholdSpec, ...]:
    specs = []
    for _ in range(c_out):
        # resample draws whose folded threshold would leave the 16-bit range
        spec = None
        for _attempt in range(20):
            gamma = float(rng.normal(0, 1.0)) or 1.0
            beta = float(rng.normal(0, 1.0))
            mu = float(rng.normal(0, max(bound / 4, 1.0)))
            sigma = float(abs(rng.normal(0, max(bound / 4, 1.0)))) + 0.5
            if abs(mu - beta * sigma / gamma) > 12000:
                continue
            spec = fold_bn_threshold(gamma, beta, mu, sigma)
            break
        specs.append(spec or fold_bn_threshold(1.0, 0.0, 0.0, 1.0))
    return tuple(specs)


def _layer(rng, c_in, c_out, k, pad, pool=None) -> LayerDescriptor:
    geom = ConvGeometry(k_h=k, k_w=k, pad_y=pad, pad_x=pad)
    return LayerDescriptor(
        geometry=geom,
        c_in=c_in,
        c_out=c_out,
        weights=_random_weights(rng, c_out, c_in, k, k),
        thresholds=_random_thresholds(rng, c_out, k * k * c_in),
        pool=pool or PoolConfig(),
    )


def alexnet_shaped_model(pool_conv2: bool = True, seed: int = 2024) -> ModelDescriptor:
    """Binarized-AlexNet-shaped trunk, conv2 through the classifier.

    pool_conv2=False drops the first pooling stage, which makes the layer's
    output exceed the sink bank: the canonical capacity-rejection fixture.
    """
    rng = np.random.default_rng(seed)
    pool32 = PoolConfig(enabled=True, size=3, stride=2)
    layers = [
        _layer(rng, 96, 256, 5, 2, pool32 if pool_conv2 else None),
        _layer(rng, 256, 384, 3, 1),
        _layer(rng, 384, 384, 3, 1),
        _layer(rng, 384, 256, 3, 1, pool32),
    ]
    if pool_conv2:
        layers += [
            _layer(rng, 256, 4096, 6, 0),
            _layer(rng, 4096, 4096, 1, 0),
            _layer(rng, 4096, 1000, 1, 0),
        ]
    return ModelDescriptor(
        name="alexnet-shaped-trunk" if pool_conv2 else "alexnet-shaped-nopool",
        input_shape=(27, 27, 96),
        layers=layers,
    )


def peak_rate_model(seed: int = 7) -> ModelDescriptor:
    """One 7x7 layer over a wide row: out_w=1018, the steady-state-rate case."""
    rng = np.random.default_rng(seed)
    return ModelDescriptor(
        name="peak-rate-row",
        input_shape=(7, 1024, 16),
        layers=[_layer(rng, 16, 16, 7, 0)],
    )


def peak_rate_config() -> MemoryConfig:
    """Default machine with a sink bank large enough for a 1018-wide row."""
    return MemoryConfig(bank_b_bits=512 * 1024)


def minimal_model(seed: int = 0) -> ModelDescriptor:
    """Smallest legal model: one 1x1 conv on a single 16-channel pixel."""
    rng = np.random.default_rng(seed)
    return ModelDescriptor(
        name="minimal",
        input_shape=(1, 1, 16),
        layers=[_layer(rng, 16, 16, 1, 0)],
    )
