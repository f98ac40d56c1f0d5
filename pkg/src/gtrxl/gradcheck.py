"""Central finite differences used as an independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0])
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate df/dx coordinate by coordinate with (f(x+h) - f(x-h)) / 2h.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = _scalar(f(x))
        flat[i] = orig - h
        minus = _scalar(f(x))
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|), guarded against all-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Relative error between backward() and finite differences per parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_diff_grad(lambda _: loss_fn(), p, h)
        errors[name] = relative_error(analytic, numeric)
    return errors
