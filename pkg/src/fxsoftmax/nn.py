"""Dense ReLU networks with SGD, in fixed point or in float64.

The arithmetic lives in a *domain*: :class:`FixedDomain` keeps parameters as
raw ``int64`` fixed-point values and rounds after every multiplication,
division and matrix product; :class:`FloatDomain` runs the same steps in
double precision.  Network code is written once against the domain API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .approxmath import ExpConfig
from .data import CLASSES, PIXELS
from .fixedpoint import FixedPoint, RandomStream
from .outputs import OutputVariant, VariantParams, output_gradient

HIDDEN_UNITS = 128

# spawn key of the weight-initialisation substream
INIT_KEY = 2


class FixedDomain:
    precision = "fixed"

    def __init__(self, ctx: FixedPoint, params: VariantParams = VariantParams(), exp_cfg: ExpConfig = ExpConfig()):
        self.ctx = ctx
        self.params = params
        self.exp_cfg = exp_cfg
        self._pixel_lut = ctx.encode(np.arange(256) / 255.0)

    def pixels(self, images: np.ndarray) -> np.ndarray:
        """Encode bytes ``v`` as ``v / 255``."""
        return self._pixel_lut[images]

    def encode(self, x) -> np.ndarray:
        return self.ctx.encode(x)

    def decode(self, x) -> np.ndarray:
        return self.ctx.decode(x)

    def affine(self, a, w, b) -> np.ndarray:
        return self.ctx.add(self.ctx.matmul(a, w.T), b)

    def relu(self, z) -> np.ndarray:
        return self.ctx.relu(z)

    def output_gradient(self, variant, logits, onehot):
        return output_gradient(variant, logits, onehot, self.ctx, self.params, self.exp_cfg)

    def probs_to_float(self, p):
        return None if p is None else self.ctx.decode(p)

    def weight_gradient(self, g, a) -> np.ndarray:
        batch = g.shape[0]
        return self.ctx.div(self.ctx.matmul(g.T, a), batch * self.ctx.one)

    def bias_gradient(self, g) -> np.ndarray:
        return self.ctx.div(self.ctx.sum(g, axis=0), g.shape[0] * self.ctx.one)

    def backprop(self, g, w, active) -> np.ndarray:
        return np.where(active, self.ctx.matmul(g, w), 0)

    def step(self, param, grad, lr: float) -> np.ndarray:
        return self.ctx.sub(param, self.ctx.mul(grad, self.ctx.constant(lr)))

    def counters(self) -> dict:
        return self.ctx.counters()

    def reset_counters(self) -> None:
        self.ctx.reset_counters()


class FloatDomain:
    """Double-precision twin of :class:`FixedDomain`.

    ``truncations`` counts the results that fixed point would round and
    ``overflows`` counts non-finite results, so divergence rules apply to
    both domains.
    """

    precision = "float"

    def __init__(self, params: VariantParams = VariantParams()):
        self.params = params
        self.reset_counters()

    def reset_counters(self) -> None:
        self.overflows = 0
        self.truncations = 0

    def counters(self) -> dict:
        return {"overflows": self.overflows, "underflows": 0, "truncations": self.truncations}

    def _count(self, out: np.ndarray) -> np.ndarray:
        self.truncations += out.size
        bad = ~np.isfinite(out)
        if bad.any():
            self.overflows += int(bad.sum())
        return out

    def pixels(self, images: np.ndarray) -> np.ndarray:
        return images.astype(np.float64) / 255.0

    def encode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def decode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def affine(self, a, w, b) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self._count(a @ w.T + b)

    def relu(self, z) -> np.ndarray:
        return np.maximum(z, 0.0)

    def output_gradient(self, variant, logits, onehot):
        variant = OutputVariant.parse(variant)
        with np.errstate(all="ignore"):
            safe = np.nan_to_num(logits, nan=0.0, posinf=1e300, neginf=-1e300)
            if variant is OutputVariant.SOFTMAX:
                p = oracle.softmax(safe)
                return self._count(p - onehot), p
            if variant is OutputVariant.RELU_PROB:
                return self._count(oracle.relu_prob_flow(safe, onehot, self.params.epsilon_flow)), None
            if variant is OutputVariant.SMOOTHED:
                eps = self.params.oracle_epsilon_smooth
                return self._count(oracle.smoothed_grad(safe, onehot, eps)), oracle.smoothed(safe, eps)
            return self._count(oracle.relu_grad_direct(safe, onehot)), None

    def probs_to_float(self, p):
        return p

    def weight_gradient(self, g, a) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self._count(g.T @ a / g.shape[0])

    def bias_gradient(self, g) -> np.ndarray:
        return self._count(g.mean(axis=0))

    def backprop(self, g, w, active) -> np.ndarray:
        with np.errstate(all="ignore"):
            return np.where(active, self._count(g @ w), 0.0)

    def step(self, param, grad, lr: float) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self._count(param - lr * grad)


@dataclass
class DenseLayer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.w.shape} / {self.b.shape}")


@dataclass
class Network:
    layers: list[DenseLayer] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.layers[0].w.shape[1],) + tuple(layer.w.shape[0] for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.w, layer.b)]


def network_shape(layers: int, inputs: int = PIXELS, hidden: int = HIDDEN_UNITS, classes: int = CLASSES):
    if layers not in (1, 2, 3):
        raise ValueError(f"layer count must be 1, 2 or 3, got {layers}")
    return (inputs,) + (hidden,) * (layers - 1) + (classes,)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init(shape, seed: int, domain) -> Network:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    ``shape`` is a layer count (MNIST dimensions) or a tuple of widths.
    """
    if isinstance(shape, int):
        shape = network_shape(shape)
    gen = RandomStream(seed, (INIT_KEY,)).generator
    layers = []
    for fan_in, fan_out in zip(shape, shape[1:]):
        r = glorot_bound(fan_in, fan_out)
        w = gen.uniform(-r, r, size=(fan_out, fan_in))
        layers.append(DenseLayer(domain.encode(w), domain.encode(np.zeros(fan_out))))
    return Network(layers)


def forward(net: Network, x, domain):
    """Logits and, per layer, the ``(input, pre-activation)`` pair."""
    cache = []
    a = x
    for i, layer in enumerate(net.layers):
        z = domain.affine(a, layer.w, layer.b)
        cache.append((a, z))
        a = domain.relu(z) if i < len(net.layers) - 1 else z
    return a, cache


def backward(net: Network, cache, g, domain) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batch-mean ``(dW, db)`` per layer for output gradient ``g``."""
    grads = []
    for i in reversed(range(len(net.layers))):
        a, _ = cache[i]
        grads.append((domain.weight_gradient(g, a), domain.bias_gradient(g)))
        if i > 0:
            _, z_prev = cache[i - 1]
            g = domain.backprop(g, net.layers[i].w, z_prev > 0)
    return grads[::-1]


def sgd_step(net: Network, grads, learning_rate: float, domain) -> Network:
    layers = [
        DenseLayer(domain.step(layer.w, dw, learning_rate), domain.step(layer.b, db, learning_rate))
        for layer, (dw, db) in zip(net.layers, grads)
    ]
    return Network(layers)


def predict(net: Network, x, domain) -> np.ndarray:
    return forward(net, x, domain)[0]
