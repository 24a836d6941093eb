"""
Finite-difference helpers for checking analytic gradients.
"""
from typing import Callable

import numpy as np

# Below this magnitude gradients are compared absolutely rather than relatively.
RELATIVE_FLOOR = 1e-3


def central_difference(f: Callable[[], float], values: np.ndarray, index, step: float = 1e-6) -> float:
    """(f(x + h) − f(x − h)) / 2h for one entry of `values`, restored afterwards."""
    original = values[index]
    try:
        values[index] = original + step
        f_plus = f()
        values[index] = original - step
        f_minus = f()
    finally:
        values[index] = original
    return (f_plus - f_minus) / (2.0 * step)


def numerical_gradient(f: Callable[[], float], values: np.ndarray, step: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        grad[index] = central_difference(f, values, index, step)
    return grad


def relative_error(analytic, numeric, floor: float = RELATIVE_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def is_smooth_at(f: Callable[[], float], values: np.ndarray, index, step: float = 1e-6, tol: float = 1e-5) -> bool:
    """
    True when two step sizes agree, i.e. no kink lies within `step` of the point.
    """
    coarse = central_difference(f, values, index, step)
    fine = central_difference(f, values, index, step / 10.0)
    return bool(relative_error(coarse, fine) < tol)
