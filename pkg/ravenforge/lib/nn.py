"""Parameter containers on top of the functional layers.

A `Module` discovers its parameters, buffers and sub-modules from its
attributes, in assignment order, so `state_dict()` keys are stable across runs
and can be written straight into an `RVF1` checkpoint:

    encoder.convs.0.weight, encoder.convs.0.bias, encoder.norms.0.gamma,
    encoder.norms.0.running.mean, ...

Weights use uniform He fan-in initialization; biases and batch-norm shifts
start at zero, batch-norm scales at one.
"""

import logging
from typing import Any, Iterator

import numpy as np

from ravenforge.errors import ShapeError
from ravenforge.lib import functional as F
from ravenforge.lib.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Base class for layers and models."""

    training: bool = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    @property
    def mode(self) -> F.Mode:
        return "train" if self.training else "eval"

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item
            elif isinstance(value, (Tensor, Module, F.RunningStats)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor):
                params[prefix + name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{name}."))
        return params

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        for name, value in self._children():
            if isinstance(value, F.RunningStats):
                buffers[f"{prefix}{name}.mean"] = value.mean
                buffers[f"{prefix}{name}.var"] = value.var
            elif isinstance(value, Module):
                buffers.update(value.named_buffers(f"{prefix}{name}."))
        return buffers

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays from `state` into this module's parameters and buffers.

        Raises:
            ShapeError: If a key is missing, unexpected, or has the wrong shape
        """
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            unexpected = sorted(set(state) - expected)
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {param.shape}")
            param.data = np.array(state[name], dtype=param.data.dtype)
        for name, buffer in buffers.items():
            if state[name].shape != buffer.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {buffer.shape}")
            buffer[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for param in self.parameters():
            param.requires_grad = flag
            if not flag:
                param.grad = None
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = he_uniform((out_features, in_features), in_features, rng)
        self.bias = zeros((out_features,))

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = he_uniform((out_channels, in_channels, kernel_size, kernel_size), fan_in, rng)
        self.bias = zeros((out_channels,))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        output_padding: int = 0,
    ):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = he_uniform((in_channels, out_channels, kernel_size, kernel_size), fan_in, rng)
        self.bias = zeros((out_channels,))
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            output_padding=self.output_padding,
        )


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta_shift = zeros((channels,))
        self.running = F.RunningStats.fresh(channels, default_dtype())
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(
            x,
            self.gamma,
            self.beta_shift,
            self.running,
            mode=self.mode,
            momentum=self.momentum,
            eps=self.eps,
        )
