"""Dense float64 helpers shared by the network, training and data code.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Random numbers come from ``numpy.random.Generator`` over the PCG64 bit
generator, which is stable across platforms for a fixed seed.
"""

import numpy as np

from .errors import ShapeError

CE_EPS = 1e-12
_TINY = np.finfo(np.float64).tiny


def make_rng(seed):
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    """Logistic function; never exponentiates a positive number.

    Outputs are floored at the smallest normal float so that ``log(sigmoid(x))``
    stays finite where ``exp(x)`` underflows.
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.maximum(out, _TINY)


def tanh_act(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(probs, target_class):
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target_class < probs.shape[-1]:
        raise IndexError(f"target class {target_class} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[target_class], CE_EPS)))


def batch_cross_entropy(probs, targets):
    """Per-row clamped cross-entropy for a (B, C) probability matrix."""
    picked = probs[np.arange(probs.shape[0]), targets]
    return -np.log(np.maximum(picked, CE_EPS))


def glorot_uniform(rng, rows, cols):
    if rows < 1 or cols < 1:
        raise ShapeError(f"glorot_uniform needs positive dims, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))
