"""Fold per-channel batch-norm parameters into integer sign thresholds.

The target hardware never evaluates batch norm. For a channel with scale
gamma, shift beta, running mean mu and running deviation sigma, the output
bit is sign(gamma * (s - mu) / sigma + beta) where s is the integer
convolution sum. Solving for s turns the whole affine chain into a single
integer comparison, picked here with exact rational arithmetic so no
rounding step depends on float luck. Ties (the affine value exactly zero)
produce a +1 bit.
"""

from __future__ import annotations

import math
from fractions import Fraction

MODE_GE = "GE"
MODE_LE = "LE"
MODE_CONST = "CONST"


def fold_channel(gamma: float, beta: float, mu: float, sigma: float):
    """Return (mode, threshold, const_bit) for one output channel.

    gamma > 0 keeps the comparison direction, gamma < 0 flips it, and
    gamma == 0 collapses the channel to the constant sign of beta.
    """
    from .errors import InvalidCheckpoint

    vals = (gamma, beta, mu, sigma)
    if not all(math.isfinite(v) for v in vals):
        raise InvalidCheckpoint(f"non-finite batch-norm parameter in {vals}")
    if not sigma > 0:
        raise InvalidCheckpoint(f"sigma must be positive, got {sigma}")
    if gamma == 0:
        return (MODE_CONST, 0, 1 if beta >= 0 else 0)
    # exact crossover point of the affine output
    x = Fraction(mu) - Fraction(beta) * Fraction(sigma) / Fraction(gamma)
    if gamma > 0:
        return (MODE_GE, math.ceil(x), 0)
    return (MODE_LE, math.floor(x), 0)
