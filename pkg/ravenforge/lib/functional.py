"""Differentiable layer operations used by the VAE and the relation network.

Convolutions follow the NCHW / OIKK layout. `conv2d` lowers to a single matrix
product over strided windows; `conv_transpose2d` is its exact adjoint, so the
backward pass of one is the forward pass of the other.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ravenforge.errors import ContractError, ParameterError, ShapeError
from ravenforge.lib.tensor import Function, Tensor

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(
    size: int, kernel: int, stride: int, padding: int, output_padding: int = 0
) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _windows(padded: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """View `padded` (N, C, H, W) as strided windows (N, C, out_h, out_w, K, K)."""
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def _scatter_windows(cols: np.ndarray, stride: int, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of `_windows`: sum window values (N, C, H, W, K, K) back into `shape`."""
    _, _, h, w, kernel, _ = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[..., i, j]
    return out


class Conv2d(Function):
    def forward(
        self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int
    ) -> np.ndarray:
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(
                f"conv2d expects NCHW input and OIKK weight, got {x.shape} and {weight.shape}"
            )
        n, c, h, w = x.shape
        out_c, in_c, kernel, kernel_w = weight.shape
        if in_c != c or kernel != kernel_w or bias.shape != (out_c,):
            raise ShapeError(
                f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}, "
                f"bias {bias.shape}"
            )
        out_h = conv_output_size(h, kernel, stride, padding)
        out_w = conv_output_size(w, kernel, stride, padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"kernel {kernel} does not fit input {h}x{w} with padding {padding}")

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _windows(padded, kernel, stride, out_h, out_w)
        self.cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kernel * kernel)
        self.weight, self.stride, self.padding = weight, stride, padding
        self.x_shape, self.padded_shape = x.shape, padded.shape
        self.window_shape = (n, out_h, out_w, c, kernel, kernel)

        out = self.cols @ weight.reshape(out_c, -1).T + bias
        return out.reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out_c = self.weight.shape[0]
        grad2 = grad.transpose(0, 2, 3, 1).reshape(-1, out_c)
        d_weight = (grad2.T @ self.cols).reshape(self.weight.shape)
        d_bias = grad2.sum(axis=0)
        d_cols = (grad2 @ self.weight.reshape(out_c, -1)).reshape(self.window_shape)
        d_cols = d_cols.transpose(0, 3, 1, 2, 4, 5)
        d_padded = _scatter_windows(d_cols, self.stride, self.padded_shape)
        _, _, h, w = self.x_shape
        p = self.padding
        return d_padded[:, :, p : p + h, p : p + w], d_weight, d_bias


class ConvTranspose2d(Function):
    def forward(
        self,
        x: np.ndarray,
        weight: np.ndarray,
        bias: np.ndarray,
        stride: int,
        padding: int,
        output_padding: int,
    ) -> np.ndarray:
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(
                f"conv_transpose2d expects NCHW input and IOKK weight, "
                f"got {x.shape} and {weight.shape}"
            )
        if output_padding < 0 or output_padding >= max(stride, 1):
            raise ParameterError(
                f"output_padding {output_padding} must be smaller than stride {stride}"
            )
        n, c, h, w = x.shape
        in_c, out_c, kernel, kernel_w = weight.shape
        if in_c != c or kernel != kernel_w or bias.shape != (out_c,):
            raise ShapeError(
                f"conv_transpose2d channel mismatch: input {x.shape}, weight {weight.shape}, "
                f"bias {bias.shape}"
            )
        out_h = conv_transpose_output_size(h, kernel, stride, padding, output_padding)
        out_w = conv_transpose_output_size(w, kernel, stride, padding, output_padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv_transpose2d output would be empty for input {h}x{w}")

        self.x2 = x.transpose(0, 2, 3, 1).reshape(-1, c)
        self.weight, self.stride, self.padding = weight, stride, padding
        self.x_shape = x.shape

        cols = (self.x2 @ weight.reshape(in_c, -1)).reshape(n, h, w, out_c, kernel, kernel)
        full_shape = (n, out_c, out_h + 2 * padding, out_w + 2 * padding)
        full = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), stride, full_shape)
        out = full[:, :, padding : padding + out_h, padding : padding + out_w]
        return out + bias[None, :, None, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, c, h, w = self.x_shape
        in_c, out_c, kernel, _ = self.weight.shape
        p = self.padding
        padded = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _windows(padded, kernel, self.stride, h, w)
        cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, out_c * kernel * kernel)
        d_x = (cols2 @ self.weight.reshape(in_c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        d_weight = (self.x2.T @ cols2).reshape(self.weight.shape)
        return d_x, d_weight, grad.sum(axis=(0, 2, 3))


@dataclass
class RunningStats:
    """Per-channel running mean and (unbiased) variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype: type[np.floating]) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


class BatchNormTrain(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
        self.axes = (0, 2, 3)
        self.mean = x.mean(axis=self.axes)
        self.var = x.var(axis=self.axes)
        self.inv_std = 1.0 / np.sqrt(self.var + eps)
        self.x_hat = (x - self.mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        return gamma[None, :, None, None] * self.x_hat + beta[None, :, None, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        count = grad.size // grad.shape[1]
        d_gamma = (grad * self.x_hat).sum(axis=self.axes)
        d_beta = grad.sum(axis=self.axes)
        d_x_hat = grad * self.gamma[None, :, None, None]
        d_x = (
            count * d_x_hat
            - d_x_hat.sum(axis=self.axes, keepdims=True)
            - self.x_hat * (d_x_hat * self.x_hat).sum(axis=self.axes, keepdims=True)
        ) * (self.inv_std[None, :, None, None] / count)
        return d_x, d_gamma, d_beta


class BatchNormEval(Function):
    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        mean: np.ndarray,
        var: np.ndarray,
        eps: float,
    ) -> np.ndarray:
        self.scale = (gamma / np.sqrt(var + eps))[None, :, None, None]
        self.x_hat = (x - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
        return self.scale * (x - mean[None, :, None, None]) + beta[None, :, None, None]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return grad * self.scale, (grad * self.x_hat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))


class Linear(Function):
    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"dense shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
            )
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad2 = grad.reshape(-1, grad.shape[-1])
        x2 = self.x.reshape(-1, self.x.shape[-1])
        return grad @ self.weight, grad2.T @ x2, grad2.sum(axis=0)


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return self.out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self.out * (1.0 - self.out)


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.out * (grad - (grad * self.out).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad - self.softmax * grad.sum(axis=self.axis, keepdims=True)


def conv2d(
    input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation over an NCHW batch.

    Output spatial size is floor((H + 2*padding - K) / stride) + 1 per dimension.

    Raises:
        ShapeError: If the kernel does not fit or channel counts disagree
        NumericError: If the output is non-finite
    """
    return Conv2d.apply(input, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(
    input: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution, the adjoint of `conv2d` with the same weight array.

    `weight` has layout (in_channels, out_channels, K, K). Output spatial size is
    (H - 1)*stride - 2*padding + K + output_padding.
    """
    return ConvTranspose2d.apply(
        input, weight, bias, stride=stride, padding=padding, output_padding=output_padding
    )


def batch_norm2d(
    input: Tensor,
    gamma: Tensor,
    beta_shift: Tensor,
    running_stats: RunningStats,
    mode: Mode = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the batch statistics and updates `running_stats`
    in place (unbiased variance); eval mode normalizes with `running_stats`.

    Raises:
        ContractError: If train mode receives a batch of one
    """
    if input.ndim != 4 or input.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm2d got input {input.shape} for {gamma.shape[0]} channels")
    if mode == "eval":
        return BatchNormEval.apply(
            input, gamma, beta_shift, mean=running_stats.mean, var=running_stats.var, eps=eps
        )
    if input.shape[0] < 2:
        raise ContractError("batch_norm2d in train mode needs a batch of at least 2")

    out = BatchNormTrain.apply(input, gamma, beta_shift, eps=eps)
    count = input.size // input.shape[1]
    batch_mean = input.data.mean(axis=(0, 2, 3))
    unbiased = input.data.var(axis=(0, 2, 3)) * count / (count - 1)
    running_stats.mean[...] = (1 - momentum) * running_stats.mean + momentum * batch_mean
    running_stats.var[...] = (1 - momentum) * running_stats.var + momentum * unbiased
    return out


def dense(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: input @ weight.T + bias."""
    return Linear.apply(input, weight, bias)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def dropout(x: Tensor, p: float, mode: Mode, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each unit with probability `p`, rescale survivors by 1/(1-p).

    Eval mode returns `x` itself.

    Raises:
        ParameterError: If p is not in [0, 1)
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(keep, dtype=x.data.dtype)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits) along the last axis."""
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(f"cross_entropy got logits {logits.shape} for {len(targets)} targets")
    log_probs = log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return -picked.mean()
