"""Central finite-difference gradient checking.

Used by the test-suite in 64-bit mode:

    with precision("float64"):
        model = ...
        errors = check_gradients(lambda: loss_fn(model), model.named_parameters())
    assert max(errors.values()) < 1e-5
"""

from typing import Callable

import numpy as np

from ravenforge.lib.tensor import Tensor, backward


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate d f() / d param by central differences, one element at a time."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f().item()
        flat[i] = original - h
        minus = f().item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7) -> float:
    """Largest elementwise error, relative to the larger of the two gradients' scales.

    When both gradients are below `atol` everywhere (e.g. a conv bias feeding
    batch norm, whose true gradient is 0), the absolute difference is returned
    instead, since central-difference noise has no scale to be relative to.
    """
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < atol:
        return diff
    return diff / float(scale)


def check_gradients(
    f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5, atol: float = 1e-7
) -> dict[str, float]:
    """Compare reverse-mode gradients of `f` with central differences for each param."""
    for param in params.values():
        param.zero_grad()
    backward(f())
    errors = {}
    for name, param in params.items():
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        errors[name] = relative_error(analytic, numerical_gradient(f, param, h), atol)
    return errors
