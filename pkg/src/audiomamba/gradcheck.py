"""Finite-difference gradient verification.

Checks are run in 64-bit mode with central differences; the comparison is
the infinity-norm relative error between the analytic and numeric gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, no_grad


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn() wrt one parameter tensor."""
    if param.dtype != np.float64:
        raise ValueError("finite differences require float64 parameters")
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5, tol: float = 1e-4,
                    corrupt: bool = False) -> dict[str, float]:
    """Compare analytic grads of scalar fn() against central differences.

    Returns {param index: rel err}; raises AssertionError past tolerance.
    ``corrupt`` is a negative-control hook that perturbs one analytic grad,
    which must make the check fail.
    """
    for p in params:
        p.zero_grad()
    get_tape().clear()
    loss = fn()
    backward(loss)
    errors: dict[str, float] = {}
    for idx, p in enumerate(params):
        if p.grad is None:
            raise AssertionError(f"param {idx} received no gradient")
        analytic = p.grad.copy()
        if corrupt and idx == 0:
            analytic = analytic + 1.0
        numeric = finite_difference_grad(fn, p, h=h)
        err = relative_error(analytic, numeric)
        errors[str(idx)] = err
        if err > tol:
            raise AssertionError(f"gradient mismatch on param {idx}: rel err {err:.3e} > {tol:.0e}")
    return errors
