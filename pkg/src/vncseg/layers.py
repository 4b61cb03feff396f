"""Differentiable building blocks with exact analytic backward passes.

Tensors are numpy arrays shaped ``(batch, channels, height, width)``. Every
op works in the dtype of its input, so float64 inputs and parameters give a
float64 build suitable for finite-difference checks.

Convolutions split work per batch item on the shared worker pool. Each task
owns its output slice and the parameter-gradient reduction runs afterwards in
item order, which keeps results bitwise identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from .exceptions import ShapeError
from .parallel import WorkerPool, get_pool

Array = NDArray[Any]

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _sum_in_order(parts: list[Array]) -> Array:
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total


# =============================================================================
# Convolution
# =============================================================================


@dataclass
class ConvCache:
    """State saved by :func:`conv2d_forward` for the backward pass."""

    input_shape: tuple[int, ...]
    cols: list[Array]
    weight: Array
    stride: int
    pad: int
    out_hw: tuple[int, int]
    has_bias: bool


def _im2col(x_item: Array, k: int, stride: int, pad: int, ho: int, wo: int) -> Array:
    padded = np.pad(x_item, ((0, 0), (pad, pad), (pad, pad))) if pad else x_item
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :ho, :wo]
    c = x_item.shape[0]
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)


def conv2d_forward(
    x: Array,
    weight: Array,
    bias: Array | None,
    stride: int = 1,
    pad: int = 0,
    pool: WorkerPool | None = None,
) -> tuple[Array, ConvCache]:
    """2D cross-correlation with zero padding.

    Args:
        x: Input ``(B, C, H, W)``.
        weight: Kernels ``(O, C, k, k)``.
        bias: Per-output-channel bias ``(O,)`` or None.
        stride: Step between output samples.
        pad: Zero padding on each border.
        pool: Worker pool for per-item parallelism.

    Returns:
        Output ``(B, O, Ho, Wo)`` and the cache needed by :func:`conv2d_backward`.

    Raises:
        ShapeError: If channel counts or kernel shapes disagree.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4D input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d expects square (O, C, k, k) weights, got {weight.shape}")
    b, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if c != wc:
        raise ShapeError(f"conv2d input has {c} channels, weights expect {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k} does not fit input {h}x{w} with pad {pad}")

    w2 = weight.reshape(o, -1)

    def run(item: int) -> tuple[Array, Array]:
        cols = _im2col(x[item], k, stride, pad, ho, wo)
        out = w2 @ cols
        if bias is not None:
            out += bias[:, None]
        return out.reshape(o, ho, wo), cols

    results = (pool or get_pool()).map(run, range(b))
    out = np.stack([r[0] for r in results]).astype(x.dtype, copy=False)
    cache = ConvCache(
        input_shape=x.shape,
        cols=[r[1] for r in results],
        weight=weight,
        stride=stride,
        pad=pad,
        out_hw=(ho, wo),
        has_bias=bias is not None,
    )
    return out, cache


def conv2d_backward(
    grad_out: Array, cache: ConvCache, pool: WorkerPool | None = None
) -> tuple[Array, Array, Array | None]:
    """Gradients of :func:`conv2d_forward`.

    Args:
        grad_out: Upstream gradient ``(B, O, Ho, Wo)``.
        cache: Cache returned by the forward pass.
        pool: Worker pool for per-item parallelism.

    Returns:
        ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None for
        bias-free convolutions.
    """
    b, c, h, w = cache.input_shape
    o, _, k, _ = cache.weight.shape
    ho, wo = cache.out_hw
    if grad_out.shape != (b, o, ho, wo):
        raise ShapeError(f"conv2d grad has shape {grad_out.shape}, expected {(b, o, ho, wo)}")
    stride, pad = cache.stride, cache.pad
    w2 = cache.weight.reshape(o, -1)

    def run(item: int) -> tuple[Array, Array, Array]:
        g2 = grad_out[item].reshape(o, ho * wo)
        grad_w = g2 @ cache.cols[item].T
        grad_b = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(c, k, k, ho, wo)
        dpad = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
        for ki in range(k):
            for kj in range(k):
                dpad[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                    :, ki, kj
                ]
        grad_x = dpad[:, pad : pad + h, pad : pad + w] if pad else dpad
        return grad_x, grad_w, grad_b

    results = (pool or get_pool()).map(run, range(b))
    grad_input = np.stack([r[0] for r in results])
    grad_weight = _sum_in_order([r[1] for r in results]).reshape(cache.weight.shape)
    grad_bias = _sum_in_order([r[2] for r in results]) if cache.has_bias else None
    return grad_input, grad_weight, grad_bias


# =============================================================================
# Batch normalization
# =============================================================================


@dataclass
class BatchNormCache:
    """State saved by :func:`batch_norm_forward`."""

    x_hat: Array
    inv_std: Array
    gamma: Array
    training: bool


def batch_norm_forward(
    x: Array,
    gamma: Array,
    beta: Array,
    running_mean: Array,
    running_var: Array,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> tuple[Array, BatchNormCache]:
    """Per-channel batch normalization.

    In training mode the batch statistics over ``(B, H, W)`` normalize the
    input and the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``. In evaluation
    mode the running statistics are used.

    Args:
        x: Input ``(B, C, H, W)``.
        gamma: Scale ``(C,)``.
        beta: Shift ``(C,)``.
        running_mean: Running mean ``(C,)``, updated in training mode.
        running_var: Running variance ``(C,)``, updated in training mode.
        training: Use batch statistics when True.
        eps: Variance floor.
        momentum: Running-statistics momentum.

    Returns:
        Normalized output and backward cache.

    Raises:
        ShapeError: If parameter lengths differ from the channel count.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4D input, got shape {x.shape}")
    channels = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean)):
        if arr.shape != (channels,):
            raise ShapeError(f"batch_norm {name} must have shape ({channels},), got {arr.shape}")
    if running_var.shape != (channels,):
        raise ShapeError(f"batch_norm running_var must have shape ({channels},)")

    axes = (0, 2, 3)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = x_hat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std, gamma, training)


def batch_norm_backward(grad_out: Array, cache: BatchNormCache) -> tuple[Array, Array, Array]:
    """Gradients of :func:`batch_norm_forward`.

    Args:
        grad_out: Upstream gradient ``(B, C, H, W)``.
        cache: Forward cache.

    Returns:
        ``(grad_input, grad_gamma, grad_beta)``.
    """
    axes = (0, 2, 3)
    x_hat = cache.x_hat
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_x_hat = grad_out * cache.gamma[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]
    if not cache.training:
        return grad_x_hat * inv_std, grad_gamma, grad_beta

    n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    sum_g = grad_x_hat.sum(axis=axes, keepdims=True)
    sum_gx = (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
    grad_x = (inv_std / n) * (n * grad_x_hat - sum_g - x_hat * sum_gx)
    return grad_x, grad_gamma, grad_beta


# =============================================================================
# Elementwise and resampling ops
# =============================================================================


def relu_forward(x: Array) -> tuple[Array, Array]:
    """Rectified linear unit; returns output and the positive mask."""
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(grad_out: Array, mask: Array) -> Array:
    """Gradient of ReLU; the subgradient at 0 is 0."""
    return np.where(mask, grad_out, np.zeros((), dtype=grad_out.dtype))


def upsample_nearest2x_forward(x: Array) -> Array:
    """Replicate every pixel into a 2x2 block."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_backward(grad_out: Array) -> Array:
    """Sum the gradient over every 2x2 block."""
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def softmax_channels(logits: Array) -> Array:
    """Softmax over the channel axis of ``(B, C, H, W)`` logits.

    The per-voxel maximum is subtracted first, so adding a constant to all
    logits of a voxel leaves the probabilities unchanged.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_channels_backward(probs: Array, grad_probs: Array) -> Array:
    """Vector-Jacobian product of :func:`softmax_channels`."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


# =============================================================================
# Layers
# =============================================================================


class Layer:
    """Stateful differentiable layer.

    ``forward`` caches what ``backward`` needs; ``backward`` returns the input
    gradient and stores parameter gradients, retrievable via ``gradients()``.
    """

    name: str = ""

    def forward(self, x: Array, training: bool = True) -> Array:
        """Compute the layer output."""
        raise NotImplementedError

    def backward(self, grad_out: Array) -> Array:
        """Propagate the gradient of the last forward call."""
        raise NotImplementedError

    def parameters(self) -> dict[str, Array]:
        """Trainable arrays by qualified name."""
        return {}

    def gradients(self) -> dict[str, Array]:
        """Gradients from the last backward call, keyed like ``parameters()``."""
        return {}

    def buffers(self) -> dict[str, Array]:
        """Non-trainable state (running statistics) by qualified name."""
        return {}

    def astype(self, dtype: np.dtype[Any] | type) -> None:
        """Convert parameters and buffers in place to ``dtype``."""


class Conv2d(Layer):
    """Convolution layer holding its weight and optional bias."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        bias: bool = True,
        dtype: type = np.float32,
    ) -> None:
        """Initialize a zero-weight convolution.

        Args:
            name: Qualified layer name.
            in_channels: Input channels.
            out_channels: Output channels.
            kernel_size: Odd square kernel size; padding keeps "same" size at stride 1.
            stride: Convolution stride.
            bias: Whether the layer has a bias.
            dtype: Parameter dtype.
        """
        self.name = name
        self.stride = stride
        self.pad = kernel_size // 2
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None
        self._cache: ConvCache | None = None
        self._grads: dict[str, Array] = {}

    @property
    def fan_in(self) -> int:
        """Number of inputs feeding one output unit."""
        _, c, k, _ = self.weight.shape
        return int(c * k * k)

    def forward(self, x: Array, training: bool = True) -> Array:
        """Apply the convolution."""
        out, self._cache = conv2d_forward(x, self.weight, self.bias, self.stride, self.pad)
        return out

    def backward(self, grad_out: Array) -> Array:
        """Backpropagate and store weight/bias gradients."""
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        grad_x, grad_w, grad_b = conv2d_backward(grad_out, self._cache)
        self._grads = {f"{self.name}.weight": grad_w}
        if grad_b is not None:
            self._grads[f"{self.name}.bias"] = grad_b
        return grad_x

    def parameters(self) -> dict[str, Array]:
        """Weight and bias."""
        params = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            params[f"{self.name}.bias"] = self.bias
        return params

    def gradients(self) -> dict[str, Array]:
        """Gradients of the last backward call."""
        return dict(self._grads)

    def astype(self, dtype: np.dtype[Any] | type) -> None:
        """Convert parameters in place."""
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)


class BatchNorm2d(Layer):
    """Batch normalization with learnable scale/shift and running statistics."""

    def __init__(self, name: str, channels: int, dtype: type = np.float32) -> None:
        """Initialize with gamma 1, beta 0, running mean 0 and running variance 1."""
        self.name = name
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache: BatchNormCache | None = None
        self._grads: dict[str, Array] = {}

    def forward(self, x: Array, training: bool = True) -> Array:
        """Normalize with batch (training) or running (evaluation) statistics."""
        out, self._cache = batch_norm_forward(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )
        return out

    def backward(self, grad_out: Array) -> Array:
        """Backpropagate and store gamma/beta gradients."""
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward called before forward")
        grad_x, grad_gamma, grad_beta = batch_norm_backward(grad_out, self._cache)
        self._grads = {f"{self.name}.gamma": grad_gamma, f"{self.name}.beta": grad_beta}
        return grad_x

    def parameters(self) -> dict[str, Array]:
        """Scale and shift."""
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def gradients(self) -> dict[str, Array]:
        """Gradients of the last backward call."""
        return dict(self._grads)

    def buffers(self) -> dict[str, Array]:
        """Running statistics."""
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def astype(self, dtype: np.dtype[Any] | type) -> None:
        """Convert parameters and buffers in place."""
        self.gamma = self.gamma.astype(dtype)
        self.beta = self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


class ReLU(Layer):
    """Rectified linear unit."""

    def __init__(self) -> None:
        """Initialize without state."""
        self._mask: Array | None = None

    def forward(self, x: Array, training: bool = True) -> Array:
        """Apply ``max(x, 0)``."""
        out, self._mask = relu_forward(x)
        return out

    def backward(self, grad_out: Array) -> Array:
        """Mask the gradient by ``x > 0``."""
        if self._mask is None:
            raise ShapeError("relu: backward called before forward")
        return relu_backward(grad_out, self._mask)


class Upsample2x(Layer):
    """Nearest-neighbour upsampling by a factor of two."""

    def forward(self, x: Array, training: bool = True) -> Array:
        """Replicate pixels 2x2."""
        return upsample_nearest2x_forward(x)

    def backward(self, grad_out: Array) -> Array:
        """Sum gradients per 2x2 block."""
        return upsample_nearest2x_backward(grad_out)


class Sequential(Layer):
    """Container running layers in order and backpropagating in reverse."""

    def __init__(self, name: str, layers: list[Layer]) -> None:
        """Initialize with an ordered layer list."""
        self.name = name
        self.layers = layers

    def forward(self, x: Array, training: bool = True) -> Array:
        """Run every layer in order."""
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad_out: Array) -> Array:
        """Backpropagate through every layer in reverse order."""
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self) -> dict[str, Array]:
        """Parameters of all children in layer order."""
        return {k: v for layer in self.layers for k, v in layer.parameters().items()}

    def gradients(self) -> dict[str, Array]:
        """Gradients of all children in layer order."""
        return {k: v for layer in self.layers for k, v in layer.gradients().items()}

    def buffers(self) -> dict[str, Array]:
        """Buffers of all children in layer order."""
        return {k: v for layer in self.layers for k, v in layer.buffers().items()}

    def astype(self, dtype: np.dtype[Any] | type) -> None:
        """Convert all children in place."""
        for layer in self.layers:
            layer.astype(dtype)


def conv_bn_relu(
    name: str,
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    stride: int = 1,
    upsample: bool = False,
    dtype: type = np.float32,
) -> Sequential:
    """Convolution (bias folded into BN) + batch norm + ReLU, optionally after 2x upsampling."""
    layers: list[Layer] = [Upsample2x()] if upsample else []
    layers += [
        Conv2d(f"{name}.conv", in_channels, out_channels, kernel_size, stride, False, dtype),
        BatchNorm2d(f"{name}.bn", out_channels, dtype),
        ReLU(),
    ]
    return Sequential(name, layers)


class ResidualBlock(Layer):
    """``out = x + BN(conv3x3(ReLU(BN(conv3x3(x)))))`` with an identity skip."""

    def __init__(self, name: str, channels: int, dtype: type = np.float32) -> None:
        """Initialize the two convolution/normalization pairs."""
        self.name = name
        self.channels = channels
        self.branch = Sequential(
            name,
            [
                Conv2d(f"{name}.conv1", channels, channels, 3, 1, False, dtype),
                BatchNorm2d(f"{name}.bn1", channels, dtype),
                ReLU(),
                Conv2d(f"{name}.conv2", channels, channels, 3, 1, False, dtype),
                BatchNorm2d(f"{name}.bn2", channels, dtype),
            ],
        )

    def forward(self, x: Array, training: bool = True) -> Array:
        """Add the residual branch to the input."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: expected {self.channels} channels, got input shape {x.shape}"
            )
        return x + self.branch.forward(x, training)

    def backward(self, grad_out: Array) -> Array:
        """Sum skip and branch gradients."""
        return grad_out + self.branch.backward(grad_out)

    def parameters(self) -> dict[str, Array]:
        """Branch parameters."""
        return self.branch.parameters()

    def gradients(self) -> dict[str, Array]:
        """Branch gradients."""
        return self.branch.gradients()

    def buffers(self) -> dict[str, Array]:
        """Branch running statistics."""
        return self.branch.buffers()

    def astype(self, dtype: np.dtype[Any] | type) -> None:
        """Convert the branch in place."""
        self.branch.astype(dtype)
