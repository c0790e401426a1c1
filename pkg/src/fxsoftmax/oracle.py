"""Double-precision reference formulas for every output variant.

No clamping, saturation or truncation happens here; the smoothed variant uses
``eps = 1e-8``.  Each fixed-point function in :mod:`fxsoftmax.outputs` has one
twin listed in :data:`TWINS`.

Vectors are ``(..., L)`` float arrays, targets are one-hot arrays.
"""

from __future__ import annotations

import numpy as np

EPS_FLOW = 0.1
EPS_SMOOTH = 1e-8


def _check(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    assert np.all(np.isfinite(x)), "oracle input must be finite"
    return x


def _true_prob(p, y):
    return np.sum(np.where(np.asarray(y) == 1, p, 0.0), axis=-1)


def _nll(p_true):
    with np.errstate(divide="ignore"):
        return np.where(p_true > 0, -np.log(np.where(p_true > 0, p_true, 1.0)), np.inf)


def relu(x):
    return np.maximum(x, 0.0)


# -- softmax -----------------------------------------------------------------

def softmax(x):
    x = _check(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_loss(x, y):
    x = _check(x)
    m = x.max(axis=-1)
    lse = m + np.log(np.exp(x - m[..., None]).sum(axis=-1))
    return lse - np.sum(np.asarray(y) * x, axis=-1)


def softmax_grad(x, y):
    return softmax(x) - np.asarray(y, dtype=np.float64)


# -- ReLU probability --------------------------------------------------------

def relu_prob(x):
    x = _check(x)
    r = relu(x)
    s = r.sum(axis=-1, keepdims=True)
    uniform = np.full_like(r, 1.0 / r.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, r / np.where(s > 0, s, 1.0), uniform)


def relu_prob_loss(x, y):
    return _nll(_true_prob(relu_prob(x), y))


def relu_prob_loss_grad(x, y):
    """Exact derivative of the ReLU-probability loss where it exists."""
    x = _check(x)
    y = np.asarray(y, dtype=np.float64)
    s = relu(x).sum(axis=-1, keepdims=True)
    active = x > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        g = -(y / np.where(active, x, 1.0) - 1.0 / s)
    return np.where(active, g, 0.0)


def relu_prob_flow(x, y, eps=EPS_FLOW):
    """The epsilon-guarded gradient flow used for training."""
    x = _check(x)
    y = np.asarray(y, dtype=np.float64)
    small = x < eps
    s = relu(x).sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = -(y / np.where(small, 1.0, x) - 1.0 / np.where(s > 0, s, 1.0))
    return np.where(small, -y, g)


# -- smoothed ReLU -----------------------------------------------------------

def smoothed(x, eps=EPS_SMOOTH):
    num = relu(_check(x)) + eps
    return num / num.sum(axis=-1, keepdims=True)


def smoothed_loss(x, y, eps=EPS_SMOOTH):
    return _nll(_true_prob(smoothed(x, eps), y))


def smoothed_grad(x, y, eps=EPS_SMOOTH):
    x = _check(x)
    y = np.asarray(y, dtype=np.float64)
    active = x > 0
    return np.where(active, -(y - smoothed(x, eps)) / (np.where(active, x, 0.0) + eps), 0.0)


# -- ReLU gradient (direct substitution) -------------------------------------

def relu_grad_direct(x, y):
    x = _check(x)
    y = np.asarray(y, dtype=np.float64)
    r = relu(x)
    s = r.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, r / np.where(s > 0, s, 1.0) - y, -y)


def relu_grad_surrogate(x, y, x_ref):
    """Linear surrogate whose gradient at any point is the direct gradient
    at ``x_ref``: the distribution is frozen, as in back-propagation.

    The direct gradient is not the gradient of any loss (its Jacobian is not
    symmetric), so this is the only function it can be checked against.
    """
    return np.sum(relu_grad_direct(x_ref, y) * _check(x), axis=-1)


# -- finite differences --------------------------------------------------------

def finite_difference(fn, x, h=1e-5):
    """Central-difference gradient of scalar ``fn`` at the 1-D point ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (fn(x + step) - fn(x - step)) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# fixed-point function name -> float twin
TWINS = {
    "softmax_forward": softmax,
    "softmax_gradient": softmax_grad,
    "cross_entropy": softmax_loss,
    "relu_prob_forward": relu_prob,
    "relu_prob_gradient": relu_prob_flow,
    "smoothed_relu_forward": smoothed,
    "smoothed_relu_gradient": smoothed_grad,
    "relu_gradient_direct": relu_grad_direct,
}

# variant -> (loss, analytic gradient) for finite-difference checks
LOSS_GRADIENTS = {
    "softmax": (softmax_loss, softmax_grad),
    "relu-prob": (relu_prob_loss, relu_prob_flow),
    "smoothed": (smoothed_loss, smoothed_grad),
}
