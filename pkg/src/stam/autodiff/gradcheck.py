from __future__ import annotations

from typing import Callable

import numpy as np

from stam.autodiff.tensor import Tensor, backward
from stam.errors import ParameterError


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of df/dx, perturbing ``x.data`` in place."""
    if step <= 0:
        raise ParameterError("step must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1e-8, |numeric|) over all coordinates."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Compare reverse-mode and central-difference gradients of a scalar ``f`` at ``x``.

    Returns the maximum relative error over the coordinates of ``x``.
    """
    if step <= 0:
        raise ParameterError("step must be positive")
    probe = Tensor(x.data, requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros(probe.shape)
    numeric = numerical_gradient(f, Tensor(x.data), step)
    return relative_error(analytic, numeric)


def norm_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||analytic - numeric|| / max(1e-8, ||numeric||) over a whole gradient array.

    Unlike :func:`relative_error` this is not dominated by near-zero
    coordinates, where central differences only resolve about 1e-9.
    """
    if analytic.size == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(1e-8, np.linalg.norm(numeric)))
