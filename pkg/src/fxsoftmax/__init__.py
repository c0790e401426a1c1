"""Fixed-point simulation of softmax and its ReLU replacements for MNIST training."""

__version__ = "0.1.0"
