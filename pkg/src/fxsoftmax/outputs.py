"""Output-layer variants in fixed point: probability maps and gradients.

All functions take raw logits of shape ``(..., L)`` and one-hot targets of the
same shape (entries 0/1), and reduce over the last axis.

* softmax: ``p = exp(x - max x) / sum``, gradient ``p - y``.
* ReLU probability: ``ReLU(x) / sum ReLU(x)`` with a uniform fallback; its
  cross-entropy gradient is replaced by an epsilon-guarded flow bounded by
  ``1/eps``.
* smoothed ReLU: ``(ReLU(x) + eps) / sum(ReLU(x) + eps)`` with its exact
  cross-entropy gradient.
* ReLU gradient: the ReLU distribution substituted directly into the softmax
  gradient ``p - y``; there is no loss behind it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .approxmath import ExpConfig, exp_fix
from .fixedpoint import FixedPoint


class OutputVariant(enum.Enum):
    SOFTMAX = "softmax"
    RELU_PROB = "relu-prob"
    RELU_GRAD = "relu-grad"
    SMOOTHED = "smoothed"

    @classmethod
    def parse(cls, value: "str | OutputVariant") -> "OutputVariant":
        if isinstance(value, cls):
            return value
        return cls(value.replace("_", "-").lower())

    @property
    def has_loss(self) -> bool:
        return self is not OutputVariant.RELU_GRAD


@dataclass(frozen=True)
class VariantParams:
    """Thresholds of the ReLU variants.

    ``epsilon_smooth=None`` means one unit in the last place of the
    fixed-point format (10**-8 is not representable at 16 fraction bits);
    the float oracle uses ``oracle_epsilon_smooth``.
    """

    epsilon_flow: float = 0.1
    epsilon_smooth: float | None = None
    oracle_epsilon_smooth: float = 1e-8

    def __post_init__(self):
        if not 0 < self.epsilon_flow < 1:
            raise ValueError("epsilon_flow must lie in (0, 1)")
        if self.epsilon_smooth is not None and self.epsilon_smooth <= 0:
            raise ValueError("epsilon_smooth must be positive")

    def smooth_raw(self, ctx: FixedPoint) -> int:
        if self.epsilon_smooth is None:
            return 1
        return max(1, ctx.constant(self.epsilon_smooth))

    def flow_raw(self, ctx: FixedPoint) -> int:
        return ctx.constant(self.epsilon_flow)


def _onehot_raw(y, ctx: FixedPoint) -> np.ndarray:
    return np.asarray(y, dtype=np.int64) * ctx.one


def softmax_forward(x, ctx: FixedPoint, cfg: ExpConfig = ExpConfig()) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    shifted = ctx.sub(x, x.max(axis=-1, keepdims=True))
    e = exp_fix(shifted, ctx, cfg)
    # exp(0) is exactly one, so the denominator is at least one
    return ctx.div(e, ctx.sum(e, axis=-1, keepdims=True))


def softmax_gradient(p, y, ctx: FixedPoint) -> np.ndarray:
    return ctx.sub(p, _onehot_raw(y, ctx))


def cross_entropy(p, y, ctx: FixedPoint | None = None):
    """``-log p[true]`` in floating point; ``inf`` where ``p[true] == 0``.

    ``p`` is raw when ``ctx`` is given, otherwise already a real array.
    """
    p = ctx.decode(p) if ctx is not None else np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    p_true = np.sum(np.where(y == 1, p, 0.0), axis=-1)
    with np.errstate(divide="ignore"):
        loss = np.where(p_true > 0, -np.log(np.where(p_true > 0, p_true, 1.0)), math.inf)
    return float(loss) if loss.ndim == 0 else loss


def relu_prob_forward(x, ctx: FixedPoint) -> np.ndarray:
    r = ctx.relu(x)
    s = ctx.sum(r, axis=-1, keepdims=True)
    positive = s > 0
    p = ctx.div(r, np.where(positive, s, ctx.one))
    uniform = ctx.constant(1.0 / r.shape[-1])
    return np.where(positive, p, uniform)


def relu_prob_gradient(x, y, ctx: FixedPoint, params: VariantParams = VariantParams()) -> np.ndarray:
    """Gradient flow of the ReLU-probability loss.

    ``0`` where ``y=0, x<eps``; ``-1`` where ``y=1, x<eps``; otherwise
    ``1/sum ReLU(x) - y/x``.  Every entry lies in ``[-1/eps, 1/eps]``.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    small = ctx.lt(x, params.flow_raw(ctx))
    s = ctx.sum(ctx.relu(x), axis=-1, keepdims=True)
    inv_sum = ctx.div(ctx.one, np.where(s > 0, s, ctx.one))
    y_over_x = np.where(y == 1, ctx.div(ctx.one, np.where(small, ctx.one, x)), 0)
    flow = ctx.sub(inv_sum, y_over_x)
    return np.where(small, -y * ctx.one, flow)


def smoothed_relu_forward(x, ctx: FixedPoint, params: VariantParams = VariantParams()) -> np.ndarray:
    num = ctx.add(ctx.relu(x), params.smooth_raw(ctx))
    return ctx.div(num, ctx.sum(num, axis=-1, keepdims=True))


def smoothed_relu_gradient(
    x, y, ctx: FixedPoint, params: VariantParams = VariantParams(), p=None
) -> np.ndarray:
    """``-[x>0] / (x + eps) * (y - p_smooth)``; ``p`` may be passed in."""
    x = np.asarray(x, dtype=np.int64)
    if p is None:
        p = smoothed_relu_forward(x, ctx, params)
    active = x > 0
    diff = ctx.sub(_onehot_raw(y, ctx), p)
    denom = np.where(active, ctx.add(x, params.smooth_raw(ctx)), ctx.one)
    return np.where(active, ctx.neg(ctx.div(diff, denom)), 0)


def relu_gradient_direct(x, y, ctx: FixedPoint) -> np.ndarray:
    """``ReLU(x)/sum ReLU(x) - y``, or ``-y`` when the sum is zero."""
    r = ctx.relu(x)
    s = ctx.sum(r, axis=-1, keepdims=True)
    positive = s > 0
    q = ctx.div(r, np.where(positive, s, ctx.one))
    y_raw = _onehot_raw(y, ctx)
    return np.where(positive, ctx.sub(q, y_raw), -y_raw)


def argmax(x) -> np.ndarray:
    """Index of the largest entry, smallest index on ties."""
    return np.argmax(np.asarray(x), axis=-1)


def output_gradient(
    variant: OutputVariant,
    x,
    y,
    ctx: FixedPoint,
    params: VariantParams = VariantParams(),
    cfg: ExpConfig = ExpConfig(),
):
    """Per-sample gradient at the logits and the distribution, if any.

    Returns ``(grad, p)``; ``p`` is ``None`` for variants whose gradient does
    not evaluate a distribution.
    """
    variant = OutputVariant.parse(variant)
    if variant is OutputVariant.SOFTMAX:
        p = softmax_forward(x, ctx, cfg)
        return softmax_gradient(p, y, ctx), p
    if variant is OutputVariant.RELU_PROB:
        return relu_prob_gradient(x, y, ctx, params), None
    if variant is OutputVariant.SMOOTHED:
        p = smoothed_relu_forward(x, ctx, params)
        return smoothed_relu_gradient(x, y, ctx, params, p=p), p
    return relu_gradient_direct(x, y, ctx), None
