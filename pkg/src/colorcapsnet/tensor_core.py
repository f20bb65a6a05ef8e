# tensor_core.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

# Dense layer primitives with hand-written forward/backward passes.
# A Tensor is a plain C-contiguous numpy array. Every primitive keeps the dtype
# of its inputs, so the float32 training path and the float64 gradient checks
# run the same code.

import dataclasses
import logging
from typing import Callable, Literal, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from colorcapsnet.errors import ConfigurationError, EmptyBatchError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Mode = Literal["train", "infer"]

DEFAULT_DTYPE = np.float32


def check_finite(x: Tensor, name: str = "tensor") -> Tensor:
    """Raises ValueError when `x` holds NaN or Inf values."""
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


# --- convolution ---

@dataclasses.dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ConfigurationError(f"kernel and stride must be >= 1, got {self.kernel}/{self.stride}")
        if min(self.in_channels, self.out_channels) < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid convolution spec {self}")

    def output_extent(self, height: int, width: int) -> tuple[int, int]:
        out_h = (height + 2 * self.padding - self.kernel) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"input {height}x{width} is too small for kernel {self.kernel} "
                f"with padding {self.padding} and stride {self.stride}")
        return out_h, out_w


def _check_conv_shapes(x: Tensor, weights: Tensor, spec: ConvSpec) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if weights.shape != expected:
        raise ShapeError(f"conv2d weights have shape {weights.shape}, spec expects {expected}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    return spec.output_extent(x.shape[2], x.shape[3])


def _im2col(x: Tensor, spec: ConvSpec) -> tuple[Tensor, int, int]:
    """Lowers [N,C,H,W] into rows of receptive fields, shape [N*H'*W', C*k*k]."""
    p, k, s = spec.padding, spec.kernel, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)
    return cols, out_h, out_w


def conv2d_forward(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-padded cross-correlation.

    Args:
        x (Tensor): Input of shape [N, C, H, W].
        weights (Tensor): Kernels of shape [F, C, k, k].
        bias (Tensor): One value per filter, shape [F].
        spec (ConvSpec): Geometry of the layer.

    Returns:
        Tensor: Output of shape [N, F, H', W'].
    """
    _check_conv_shapes(x, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias has shape {bias.shape}, expected ({spec.out_channels},)")
    cols, out_h, out_w = _im2col(x, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T + bias
    out = out.reshape(x.shape[0], out_h, out_w, spec.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out: Tensor, x: Tensor, weights: Tensor,
                    spec: ConvSpec) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_weights, grad_bias) of sum(grad_out * conv2d_forward(...))."""
    out_h, out_w = _check_conv_shapes(x, weights, spec)
    expected = (x.shape[0], spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out has shape {grad_out.shape}, expected {expected}")

    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    cols, _, _ = _im2col(x, spec)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)

    grad_weights = (g.T @ cols).reshape(weights.shape)
    grad_bias = g.sum(axis=0)

    dcols = (g @ weights.reshape(spec.out_channels, -1)).reshape(n, out_h, out_w, c, k, k)
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            grad_padded[:, :, ki:ki + s * out_h:s, kj:kj + s * out_w:s] += \
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(grad_input), grad_weights, grad_bias


def naive_conv2d(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Quadruple-loop reference used to validate the im2col path."""
    out_h, out_w = _check_conv_shapes(x, weights, spec)
    p, k, s = spec.padding, spec.kernel, spec.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((x.shape[0], spec.out_channels, out_h, out_w), dtype=np.float64)
    for b in range(x.shape[0]):
        for f in range(spec.out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    region = xp[b, :, i * s:i * s + k, j * s:j * s + k]
                    out[b, f, i, j] = np.sum(region * weights[f]) + bias[f]
    return out.astype(x.dtype)


# --- batch normalization ---

@dataclasses.dataclass(frozen=True)
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError(f"batchnorm epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ConfigurationError("batchnorm running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, **kwargs) -> "BatchNormState":
        return cls(gamma=np.ones(channels, dtype=dtype), beta=np.zeros(channels, dtype=dtype),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype), **kwargs)


@dataclasses.dataclass(frozen=True)
class BatchNormCache:
    """What batchnorm_backward needs, plus the state after this forward pass.

    `next_state` carries refreshed running statistics in train mode and is
    the unchanged input state in infer mode.
    """
    mode: str
    x_hat: Tensor
    inv_std: Tensor
    next_state: BatchNormState


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: Mode = "train") -> tuple[Tensor, BatchNormCache]:
    """Normalizes per channel over the batch and every trailing axis.

    Train mode uses the batch mean and the population (divide-by-count)
    variance, then folds them into the running statistics with
    `running = momentum * running + (1 - momentum) * batch`. Infer mode uses
    the running statistics only.
    """
    if x.ndim < 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm input {x.shape} does not match {state.gamma.shape[0]} channels")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"unknown batchnorm mode '{mode}'")
    axes = (0,) + tuple(range(2, x.ndim))

    if mode == "train":
        if x.shape[0] == 0:
            raise EmptyBatchError("batchnorm in train mode needs at least one sample")
        mean = x.mean(axis=axes)
        var = ((x - _channel_view(mean, x.ndim)) ** 2).mean(axis=axes)
        m = state.momentum
        next_state = dataclasses.replace(
            state,
            running_mean=(m * state.running_mean + (1.0 - m) * mean).astype(state.running_mean.dtype),
            running_var=(m * state.running_var + (1.0 - m) * var).astype(state.running_var.dtype))
    else:
        mean, var = state.running_mean, state.running_var
        next_state = state

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
    y = _channel_view(state.gamma, x.ndim) * x_hat + _channel_view(state.beta, x.ndim)
    return y.astype(x.dtype, copy=False), BatchNormCache(mode, x_hat, inv_std, next_state)


def batchnorm_backward(grad_out: Tensor, cache: BatchNormCache,
                       state: BatchNormState) -> tuple[Tensor, Tensor, Tensor]:
    """Exact gradients of the train-mode forward: (grad_x, grad_gamma, grad_beta)."""
    if cache.mode != "train":
        raise ConfigurationError("batchnorm_backward requires a cache produced in train mode")
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"batchnorm grad_out {grad_out.shape} does not match cached {cache.x_hat.shape}")
    ndim = grad_out.ndim
    axes = (0,) + tuple(range(2, ndim))
    count = grad_out.size // grad_out.shape[1]

    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=axes)
    dx_hat = grad_out * _channel_view(state.gamma, ndim)
    sum_dx_hat = _channel_view(dx_hat.sum(axis=axes), ndim)
    sum_dx_hat_xhat = _channel_view((dx_hat * cache.x_hat).sum(axis=axes), ndim)
    grad_x = (_channel_view(cache.inv_std, ndim) / count) * (
        count * dx_hat - sum_dx_hat - cache.x_hat * sum_dx_hat_xhat)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# --- activations ---

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x| and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_backward(grad_out: Tensor, y: Tensor) -> Tensor:
    """`y` is the sigmoid output of the forward pass."""
    return grad_out * y * (1.0 - y)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    """`y` is the softmax output of the forward pass."""
    return y * (grad_out - (grad_out * y).sum(axis=axis, keepdims=True))


# --- dense ---

def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weights.shape}")
    return x @ weights + bias


def dense_backward(grad_out: Tensor, x: Tensor, weights: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_x, grad_weights, grad_bias)."""
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"dense grad_out {grad_out.shape} expected {(x.shape[0], weights.shape[1])}")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


# --- initialization ---

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=DEFAULT_DTYPE) -> Tensor:
    # uniform(-a, a) has variance a^2/3 = 2/(fan_in + fan_out)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --- optimizer ---

@dataclasses.dataclass(frozen=True)
class AdamState:
    m: Tensor
    v: Tensor
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)


def adam_step(param: Tensor, grad: Tensor, state: AdamState) -> tuple[Tensor, AdamState]:
    """One bias-corrected Adam update. Returns the new parameter and state; inputs are untouched."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(f"adam shapes differ: param {param.shape}, grad {grad.shape}, moment {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = dataclasses.replace(state, m=m.astype(param.dtype, copy=False),
                                    v=v.astype(param.dtype, copy=False), t=t)
    return new_param.astype(param.dtype, copy=False), new_state


# --- gradient oracle ---

def gradcheck(f: Callable[[dict[str, Tensor]], tuple[float, Mapping[str, Tensor]]],
              point: Mapping[str, Tensor], step: float = 1e-3, floor: float = 1e-6,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Compares analytic gradients with central finite differences.

    Args:
        f: Maps a dict of named tensors to (scalar value, dict of gradients).
        point: Where to evaluate; copied to float64 before use.
        step (float): Central difference half-width.
        floor (float): Lower bound of the relative-error denominator, so
            coordinates whose true gradient is ~0 compare absolutely.
        max_coords (int): If set, checks at most this many coordinates per
            tensor, chosen deterministically from `seed`.

    Returns:
        float: Worst relative error |a - n| / max(|a|, |n|, floor).
    """
    params = {name: np.array(value, dtype=np.float64, copy=True) for name, value in point.items()}
    _, analytic = f(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        if name not in analytic:
            continue
        flat = value.reshape(-1)
        grad = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            plus = float(f(params)[0])
            flat[i] = original - step
            minus = float(f(params)[0])
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad[i]), abs(numeric), floor)
            error = abs(grad[i] - numeric) / denom
            if error > worst:
                logger.debug(f"gradcheck {name}[{i}]: analytic={grad[i]:.6e} numeric={numeric:.6e}")
                worst = error
    return worst
