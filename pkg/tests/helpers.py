"""Shared test oracles, independent of the library's differentiation path."""

import numpy as np

from loopkit import tensor as T


def finite_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at x (same shape as x)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-6):
    """Worst-case relative error with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def tape_gradient(f, x):
    """Gradient of scalar-valued f built from loopkit tensor ops, at leaf x."""
    leaf = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        loss = f(leaf)
        tape.backward(loss)
    return leaf.grad
