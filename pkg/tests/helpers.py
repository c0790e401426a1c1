"""Shared helpers for the test modules."""

import numpy as np

from fxsoftmax import nn, oracle
from fxsoftmax.data import one_hot
from fxsoftmax.nn import DenseLayer, FloatDomain, Network
from fxsoftmax.outputs import OutputVariant

L = 10
EPS = oracle.EPS_FLOW


def random_instance(gen, variant, classes=L):
    """Logits in the smooth region of the variant's loss, and a target."""
    t = int(gen.integers(classes))
    y = np.eye(classes)[t]
    if variant == "softmax":
        return gen.normal(scale=3, size=classes), y
    # keep every coordinate at least 2*eps away from the kinks
    x = gen.uniform(2 * EPS, 3, size=classes) * gen.choice([-1, 1], size=classes)
    x[t] = abs(x[t])
    # a second positive logit keeps the gradient away from ~1e-8, where
    # relative error measures only cancellation noise
    other = (t + 1 + int(gen.integers(classes - 1))) % classes
    x[other] = abs(x[other])
    return x, y


def copy_net(net):
    return Network([DenseLayer(l.w.copy(), l.b.copy()) for l in net.layers])


def mean_loss(net, x, y, domain):
    logits, _ = nn.forward(net, x, domain)
    return float(np.mean(oracle.softmax_loss(logits, y)))


def network_fd_check(shape, seed, batch=5, h=1e-5):
    """Worst relative error of backprop vs central differences."""
    dom = FloatDomain()
    net = nn.init(shape, seed, dom)
    gen = np.random.default_rng(seed)
    x = gen.uniform(0, 1, size=(batch, shape[0]))
    y = one_hot(gen.integers(0, shape[-1], batch), shape[-1])
    logits, cache = nn.forward(net, x, dom)
    g, _ = dom.output_gradient(OutputVariant.SOFTMAX, logits, y)
    grads = nn.backward(net, cache, g, dom)
    worst = 0.0
    for li, (dw, db) in enumerate(grads):
        for name, analytic in (("w", dw), ("b", db)):
            fd = np.zeros_like(analytic)
            for idx in np.ndindex(analytic.shape):
                vals = []
                for sign in (1, -1):
                    probe = copy_net(net)
                    getattr(probe.layers[li], name)[idx] += sign * h
                    vals.append(mean_loss(probe, x, y, dom))
                fd[idx] = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, oracle.relative_error(analytic, fd))
    return worst
