"""Learnable layers: direct 3D convolution, shared pointwise MLP, batch
normalization, activations, cross-entropy, and the small tape ops the
segmentation head needs (concat, global max-pool, broadcast).

Every op registers a hand-derived backward rule on the active tape; all of
them are checked against central finite differences in the test suite.
Weights initialize uniformly in +-sqrt(1/fan_in), biases at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Array, Tensor, parameter, record_op
from .errors import ContractViolation


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Array:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# 3D convolution (stride 1; padding 1 for k=3, 0 for k=1).


@dataclass
class Conv3dParams:
    weight: Tensor  # [Cout, Cin, k, k, k]
    bias: Tensor  # [Cout]
    kernel_size: int

    @classmethod
    def create(cls, c_in: int, c_out: int, kernel_size: int, rng, dtype=np.float64):
        if kernel_size not in (1, 3):
            raise ContractViolation(f"kernel size must be 1 or 3, got {kernel_size}")
        k = kernel_size
        weight = parameter(_uniform_init(rng, (c_out, c_in, k, k, k), c_in * k**3, dtype))
        bias = parameter(np.zeros(c_out, dtype=dtype))
        return cls(weight, bias, k)

    @property
    def padding(self) -> int:
        return 1 if self.kernel_size == 3 else 0


def _im2col(x: Array, k: int, pad: int) -> Array:
    """Patches [B, r^3, Cin*k^3] for a stride-1 same-size convolution."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    b, c = win.shape[:2]
    r = win.shape[2]
    patches = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b, r**3, c * k**3)
    return np.ascontiguousarray(patches)


def conv3d(x: Tensor, params: Conv3dParams) -> Tensor:
    """Direct 3D cross-correlation plus bias on a cubic grid [B, C, r, r, r]."""
    k = params.kernel_size
    c_out, c_in = params.weight.shape[:2]
    if x.data.ndim != 5 or len(set(x.shape[2:])) != 1:
        raise ContractViolation(f"conv3d input must be [B, C, r, r, r], got {x.shape}")
    if x.shape[1] != c_in:
        raise ContractViolation(f"conv3d: input has {x.shape[1]} channels, weight wants {c_in}")
    b, _, r = x.shape[:3]
    patches = _im2col(x.data, k, params.padding)
    w_mat = params.weight.data.reshape(c_out, c_in * k**3)
    out_flat = patches @ w_mat.T + params.bias.data[None, None, :]
    out = Tensor(out_flat.transpose(0, 2, 1).reshape(b, c_out, r, r, r))

    def backward(g: Array):
        g_mat = g.reshape(b, c_out, r**3).transpose(0, 2, 1)  # [B, r^3, Cout]
        g_weight = (
            np.matmul(g_mat.transpose(0, 2, 1), patches).sum(axis=0)
        ).reshape(params.weight.shape)
        g_bias = g_mat.sum(axis=(0, 1))
        g_patches = (g_mat @ w_mat).reshape(b, r, r, r, c_in, k, k, k)
        pad = params.padding
        g_padded = np.zeros(
            (b, c_in, r + 2 * pad, r + 2 * pad, r + 2 * pad), dtype=g.dtype
        )
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    g_padded[:, :, i : i + r, j : j + r, l : l + r] += (
                        g_patches[..., i, j, l].transpose(0, 4, 1, 2, 3)
                    )
        g_x = g_padded[:, :, pad : pad + r, pad : pad + r, pad : pad + r] if pad else g_padded
        return np.ascontiguousarray(g_x), g_weight, g_bias

    return record_op("conv3d", (x, params.weight, params.bias), out, backward)


# --------------------------------------------------------------------------
# Shared pointwise MLP (kernel-1 1D convolution).


@dataclass
class PointwiseMlpParams:
    weight: Tensor  # [Cout, Cin]
    bias: Tensor  # [Cout]

    @classmethod
    def create(cls, c_in: int, c_out: int, rng, dtype=np.float64):
        weight = parameter(_uniform_init(rng, (c_out, c_in), c_in, dtype))
        bias = parameter(np.zeros(c_out, dtype=dtype))
        return cls(weight, bias)


def pointwise_mlp(x: Tensor, params: PointwiseMlpParams) -> Tensor:
    """The identical linear map applied independently to every point."""
    c_out, c_in = params.weight.shape
    if x.data.ndim != 3:
        raise ContractViolation(f"pointwise_mlp input must be [B, C, N], got {x.shape}")
    if x.shape[1] != c_in:
        raise ContractViolation(
            f"pointwise_mlp: input has {x.shape[1]} channels, weight wants {c_in}"
        )
    out = Tensor(params.weight.data @ x.data + params.bias.data[None, :, None])

    def backward(g: Array):
        g_w = np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0)
        g_b = g.sum(axis=(0, 2))
        g_x = params.weight.data.T @ g
        return g_x, g_w, g_b

    return record_op("pointwise_mlp", (x, params.weight, params.bias), out, backward)


# --------------------------------------------------------------------------
# Batch normalization over batch plus all spatial/point axes.


@dataclass
class BatchNormParams:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    running_mean: Array
    running_var: Array
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float64, eps=1e-5, momentum=0.1):
        return cls(
            gamma=parameter(np.ones(channels, dtype=dtype)),
            beta=parameter(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )


def batchnorm(x: Tensor, params: BatchNormParams) -> Tensor:
    """Normalize per channel; biased variance in train mode, running stats in eval.

    Train mode updates the running statistics in place with the configured
    momentum; that side effect never influences the train-mode output.
    """
    if x.data.ndim < 3:
        raise ContractViolation(f"batchnorm input must be [B, C, ...], got {x.shape}")
    channels = x.shape[1]
    if channels != params.gamma.shape[0]:
        raise ContractViolation(
            f"batchnorm: {channels} channels vs {params.gamma.shape[0]} parameters"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, channels) + (1,) * (x.data.ndim - 2)
    gamma = params.gamma.data.reshape(shape)
    beta = params.beta.data.reshape(shape)

    if params.training:
        m = x.data.size // channels
        if m < 2:
            raise ContractViolation(
                "batchnorm train mode needs >= 2 elements per channel"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased
        params.running_mean *= 1.0 - params.momentum
        params.running_mean += params.momentum * mean
        params.running_var *= 1.0 - params.momentum
        params.running_var += params.momentum * var
    else:
        mean = params.running_mean.astype(x.dtype)
        var = params.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = Tensor(gamma * x_hat + beta)

    if params.training:
        m_count = x.data.size // channels

        def backward(g: Array):
            g_beta = g.sum(axis=axes)
            g_gamma = (g * x_hat).sum(axis=axes)
            g_hat = g * gamma
            term = (
                m_count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
            g_x = term * inv_std.reshape(shape) / m_count
            return g_x, g_gamma, g_beta

    else:

        def backward(g: Array):
            g_beta = g.sum(axis=axes)
            g_gamma = (g * x_hat).sum(axis=axes)
            g_x = g * gamma * inv_std.reshape(shape)
            return g_x, g_gamma, g_beta

    return record_op("batchnorm", (x, params.gamma, params.beta), out, backward)


# --------------------------------------------------------------------------
# Activations and loss.


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """x for x >= 0, slope*x below; the derivative at 0 is taken as 1."""
    if not 0.0 <= slope < 1.0:
        raise ContractViolation(f"leaky_relu slope must be in [0, 1), got {slope}")
    keep = x.data >= 0
    out = Tensor(np.where(keep, x.data, x.data * slope))

    def backward(g: Array):
        return (np.where(keep, g, g * slope),)

    return record_op("leaky_relu", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean negative log-softmax of the labeled class over all B*N points.

    Computed with max subtraction so finite logits always yield a finite
    loss; the gradient is (softmax - onehot) / (B*N).
    """
    if logits.data.ndim != 3:
        raise ContractViolation(f"logits must be [B, K, N], got {logits.shape}")
    lab = np.asarray(labels)
    b, k, n = logits.shape
    if lab.shape != (b, n):
        raise ContractViolation(f"labels shape {lab.shape} != {(b, n)}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ContractViolation(f"labels out of range [0, {k})")
    lab = lab.astype(np.int64)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))  # [B, N]
    b_idx = np.arange(b)[:, None]
    n_idx = np.arange(n)[None, :]
    picked = shifted[b_idx, lab, n_idx]  # [B, N]
    total = float(b * n)
    out = Tensor(np.array((log_z - picked).sum() / total, dtype=logits.dtype))

    def backward(g: Array):
        softmax = np.exp(shifted - log_z[:, None, :])
        softmax[b_idx, lab, n_idx] -= 1.0
        softmax *= g.reshape(())[()] / total
        return (softmax,)

    return record_op("cross_entropy", (logits,), out, backward)


# --------------------------------------------------------------------------
# Segmentation-head plumbing ops.


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [B, C_i, N] tensors along the channel axis."""
    if not tensors:
        raise ContractViolation("concat_channels needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    sizes = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array):
        return tuple(
            np.ascontiguousarray(g[:, offsets[i] : offsets[i + 1]])
            for i in range(len(sizes))
        )

    return record_op("concat", tuple(tensors), out, backward)


def max_over_points(x: Tensor) -> Tensor:
    """Global max-pool over the point axis: [B, C, N] -> [B, C, 1].

    The gradient routes to the first index attaining the maximum.
    """
    if x.data.ndim != 3:
        raise ContractViolation(f"max_over_points input must be [B, C, N], got {x.shape}")
    arg = x.data.argmax(axis=2)
    out = Tensor(np.take_along_axis(x.data, arg[:, :, None], axis=2))

    def backward(g: Array):
        g_x = np.zeros_like(x.data)
        np.put_along_axis(g_x, arg[:, :, None], g, axis=2)
        return (g_x,)

    return record_op("max_over_points", (x,), out, backward)


def broadcast_over_points(x: Tensor, n_points: int) -> Tensor:
    """Tile [B, C, 1] to [B, C, N]; the gradient sums back over points."""
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ContractViolation(f"broadcast input must be [B, C, 1], got {x.shape}")
    out = Tensor(np.repeat(x.data, n_points, axis=2))

    def backward(g: Array):
        return (g.sum(axis=2, keepdims=True),)

    return record_op("broadcast_over_points", (x,), out, backward)
