"""Central finite-difference gradient checking used across the test suite.

Everything runs in float64: the forward map is evaluated at x +- eps for every
input entry against a fixed random upstream weighting, and the worst relative
error against the analytic gradient is returned.
"""

import numpy as np

EPS = 1e-3
TOL = 1e-4


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
    return float((np.abs(numeric - analytic) / scale).max())


def central_diff(loss_fn, array: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Numeric d loss / d array, perturbing one entry at a time in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return grad


def check_grad(loss_fn, array: np.ndarray, analytic: np.ndarray, eps: float = EPS) -> float:
    return relative_error(central_diff(loss_fn, array, eps), analytic)
