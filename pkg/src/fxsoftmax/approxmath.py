"""Fixed-point exponential built from base-2 pieces.

``exp(x) = 2**(x * log2(e))``.  The base-2 argument ``a`` is split into an
integer part ``i = floor(a)`` and a fraction ``y`` in ``[0, 1)``.  ``2**i`` is
the product over the bits ``b_j`` of ``|i|`` of ``(1 - b_j + b_j * 2**(+-2**j))``,
which is exact in fixed point; ``2**y`` is a truncated Taylor series in
``y * ln 2`` evaluated by Horner's rule with one rounding per multiplication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import FixedPoint

LOG2E = 1.0 / math.log(2.0)
LN2 = math.log(2.0)


@dataclass(frozen=True)
class ExpConfig:
    taylor_degree: int = 9
    input_floor: float = -24.0
    input_ceiling: float = 12.0

    def __post_init__(self):
        if self.taylor_degree < 1:
            raise ValueError("taylor_degree must be >= 1")
        if not self.input_floor < 0 < self.input_ceiling:
            raise ValueError("need input_floor < 0 < input_ceiling")

    def check(self, ctx: FixedPoint, classes: int = 10) -> None:
        """Reject ceilings whose power of two summed over classes saturates."""
        if (2.0**self.input_ceiling) * classes * ctx.one > ctx.raw_max:
            raise ValueError(f"2**{self.input_ceiling} * {classes} saturates {ctx!r}")


def taylor_coefficients(degree: int) -> list[float]:
    """Coefficients of ``2**y`` as a polynomial in ``y``: ``ln2**n / n!``."""
    return [LN2**n / math.factorial(n) for n in range(degree + 1)]


def pow2_int(i, ctx: FixedPoint) -> np.ndarray:
    """``2**i`` for integer arrays ``i`` via the bit-decomposition product.

    Exponents above ``k - 2 - f`` saturate (``2**(k-1-f)`` is one past the
    largest raw value), exponents below ``-f`` flush to zero; both are counted
    on ``ctx``.
    """
    i = np.asarray(i, dtype=np.int64)
    hi = ctx.k - 2 - ctx.f
    lo = -ctx.f
    too_big = i > hi
    too_small = i < lo
    if too_big.any():
        ctx.overflows += int(too_big.sum())
    if too_small.any():
        ctx.underflows += int(too_small.sum())
    e = np.clip(i, lo, hi)
    mag = np.abs(e)
    negative = e < 0
    result = np.full(e.shape, ctx.one, dtype=np.int64)
    j = 0
    while (1 << j) <= max(hi, -lo):
        bit = (mag >> j) & 1
        if bit.any():
            step = 1 << j
            up = ctx.one << step if step <= hi else ctx.raw_max
            down = ctx.one >> step
            factor = np.where(negative, down, up)
            # 1 - b + b * 2**(+-2**j)
            factor = ctx.one - bit * ctx.one + bit * factor
            result = ctx.mul(result, factor)
        j += 1
    result = np.where(too_big, ctx.raw_max, result)
    return np.where(too_small, 0, result)


def pow2_frac(y, ctx: FixedPoint, cfg: ExpConfig = ExpConfig()) -> np.ndarray:
    """``2**y`` for raw ``y`` in ``[0, 1)`` by Horner evaluation."""
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= ctx.one):
        raise ValueError("pow2_frac needs 0 <= y < 1")
    coeffs = [ctx.constant(c) for c in taylor_coefficients(cfg.taylor_degree)]
    acc = np.full(y.shape, coeffs[-1], dtype=np.int64)
    for c in reversed(coeffs[:-1]):
        acc = ctx.add(ctx.mul(acc, y), c)
    return acc


def exp_fix(x, ctx: FixedPoint, cfg: ExpConfig = ExpConfig()) -> np.ndarray:
    """Fixed-point ``e**x`` for raw arrays ``x``; total by clamping."""
    x = np.asarray(x, dtype=np.int64)
    a = ctx.mul(x, ctx.constant(LOG2E))
    floor = ctx.constant(cfg.input_floor)
    ceiling = ctx.constant(cfg.input_ceiling)
    below = a < floor
    a = np.clip(a, floor, ceiling)
    whole = a >> ctx.f
    frac = a & (ctx.one - 1)
    out = ctx.mul(pow2_int(np.where(below, 0, whole), ctx), pow2_frac(frac, ctx, cfg))
    if below.any():
        ctx.underflows += int(below.sum())
        out = np.where(below, 0, out)
    return out
