"""ADAM with bias correction.

`adam_step` is the pure update rule over explicit (params, grads, state);
`Adam` binds it to a model's parameter list and reads gradients from
`Tensor.grad`. Gradients are never zeroed implicitly: call `zero_grad()`
before each backward pass.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ravenforge.errors import ParameterError, ShapeError
from ravenforge.lib.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment estimates and hyperparameters of one ADAM optimizer."""

    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")

    @classmethod
    def fresh(cls, params: Sequence[Tensor], **hyper: float) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState
) -> list[Tensor]:
    """Apply one bias-corrected ADAM update to `params`.

    Each parameter's `data` is replaced by a new array, so arrays captured by an
    earlier forward graph are left untouched.

    Raises:
        ShapeError: If params, grads and moment stores are not aligned
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads and "
            f"{len(state.first_moment)} moment stores"
        )
    state.step_count += 1
    bias1 = 1.0 - state.beta1**state.step_count
    bias2 = 1.0 - state.beta2**state.step_count
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad.shape != param.shape or state.first_moment[i].shape != param.shape:
            raise ShapeError(f"parameter {i}: shape {param.shape}, gradient {grad.shape}")
        m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * grad * grad
        state.first_moment[i], state.second_moment[i] = m, v
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        param.data = (param.data - update).astype(param.data.dtype)
    return list(params)


class Adam:
    """ADAM over a fixed list of parameters.

    Parameters whose `grad` is None take a zero-gradient step (their moments
    still decay).
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.params = list(params)
        self.state = AdamState.fresh(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)
