"""Layer primitives with exact backward passes.

Tensors are plain C-contiguous numpy arrays.  Storage is float32 by
default; every dot product accumulates in float64 before rounding back,
which keeps finite-difference gradient checks stable.  All operations are
pure functions of their arguments except :func:`sgd_update`, which mutates
its parameter array in place.

Feature maps are laid out ``[channels, height, width]`` (row-major), with
an optional leading batch axis.
"""
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ShapeMismatchError

__all__ = [
    "ConvParams", "FcParams", "LayerGrads", "ArgmaxRecord",
    "conv2d", "conv2d_grad", "maxpool2x2", "maxpool2x2_grad",
    "tanh_activation", "tanh_grad", "fully_connected", "fc_grad",
    "sgd_update", "numeric_gradient",
]

_FLOAT_DTYPES = (np.float32, np.float64)


def _common_dtype(*arrays):
    dt = np.result_type(*arrays)
    return np.float64 if dt == np.float64 else np.float32


@dataclass
class ConvParams:
    """Weights [out_channels, in_channels, k, k], bias [out_channels]."""
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weights.ndim != 4:
            raise ShapeMismatchError(
                f"conv weights must be 4-d [out, in, k, k], got shape {self.weights.shape}")
        if self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeMismatchError(
                f"conv kernel must be square, got {self.weights.shape[2]}x{self.weights.shape[3]}")
        if self.kernel_size < 1:
            raise ShapeMismatchError(f"kernel size must be >= 1, got {self.kernel_size}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeMismatchError(
                f"stride must be >= 1 and padding >= 0, got stride={self.stride}, "
                f"padding={self.padding}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match out_channels={self.out_channels}")

    @property
    def kernel_size(self):
        return self.weights.shape[2]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]


@dataclass
class FcParams:
    """Weights [out_dim, in_dim], bias [out_dim]."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights)
        self.bias = np.ascontiguousarray(self.bias)
        if self.weights.ndim != 2:
            raise ShapeMismatchError(
                f"fc weights must be 2-d [out, in], got shape {self.weights.shape}")
        if self.bias.shape != (self.out_dim,):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match out_dim={self.out_dim}")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


@dataclass
class LayerGrads:
    """Adjoints of a parameterized layer: shaped like params and input."""
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


@dataclass
class ArgmaxRecord:
    """Winner bookkeeping for maxpool backward.

    ``indices[..., oy, ox]`` is the flat row-major spatial index (iy*W+ix)
    of the window winner; ties went to the lowest index.
    """
    indices: np.ndarray
    input_shape: tuple


def _to_batched_maps(x, expected_channels=None, op="conv2d"):
    """Accept [H,W], [C,H,W] or [B,C,H,W]; return 4-d plus the original rank."""
    x = np.asarray(x)
    if x.dtype not in _FLOAT_DTYPES:
        x = x.astype(np.float32)
    rank = x.ndim
    if rank == 2:
        x = x[None, None]
    elif rank == 3:
        x = x[None]
    elif rank != 4:
        raise ShapeMismatchError(f"{op}: input must be 2-d, 3-d or 4-d, got {x.ndim}-d")
    if expected_channels is not None and x.shape[1] != expected_channels:
        raise ShapeMismatchError(
            f"{op}: input has {x.shape[1]} channels but the layer expects {expected_channels}")
    return np.ascontiguousarray(x), rank


def _restore_rank(y, rank):
    if rank == 2:
        return y[0, 0]
    if rank == 3:
        return y[0]
    return y


def _conv_out_side(side, k, stride, padding, axis):
    span = side + 2 * padding - k
    if span < 0:
        raise ShapeMismatchError(
            f"conv2d: {axis}={side} with padding {padding} is smaller than kernel {k}")
    if span % stride:
        raise ShapeMismatchError(
            f"conv2d: ({axis}={side} + 2*{padding} - {k}) is not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x, params: ConvParams):
    """2-d cross-correlation: out[o] = bias[o] + sum_i kernel[o,i] * window(x[i])."""
    x4, rank = _to_batched_maps(x, params.in_channels)
    _conv_out_side(x4.shape[2], params.kernel_size, params.stride, params.padding, "height")
    _conv_out_side(x4.shape[3], params.kernel_size, params.stride, params.padding, "width")
    dt = _common_dtype(x4, params.weights)
    w = params.weights.astype(dt, copy=False)
    b = params.bias.astype(dt, copy=False)
    y = backend.active().conv2d_forward(x4.astype(dt, copy=False), w, b,
                                        params.stride, params.padding)
    return _restore_rank(y, rank)


def conv2d_grad(x, params: ConvParams, upstream):
    """Exact adjoints of :func:`conv2d` for the given upstream gradient."""
    x4, rank = _to_batched_maps(x, params.in_channels)
    dy4, _ = _to_batched_maps(upstream, params.out_channels, op="conv2d_grad")
    ho = _conv_out_side(x4.shape[2], params.kernel_size, params.stride, params.padding, "height")
    wo = _conv_out_side(x4.shape[3], params.kernel_size, params.stride, params.padding, "width")
    if dy4.shape != (x4.shape[0], params.out_channels, ho, wo):
        raise ShapeMismatchError(
            f"conv2d_grad: upstream shape {dy4.shape} does not match the forward "
            f"output shape {(x4.shape[0], params.out_channels, ho, wo)}")
    dt = _common_dtype(x4, params.weights, dy4)
    dx, dw, db = backend.active().conv2d_backward(
        x4.astype(dt, copy=False), params.weights.astype(dt, copy=False),
        params.stride, params.padding, dy4.astype(dt, copy=False))
    return LayerGrads(d_weights=dw, d_bias=db, d_input=_restore_rank(dx, rank))


def maxpool2x2(x):
    """2x2 stride-2 max pooling.  Odd trailing rows/cols are ignored (treated
    as -inf padding) so the winner is always a real input cell."""
    x4, rank = _to_batched_maps(x, op="maxpool2x2")
    y, idx = backend.active().maxpool2x2_forward(x4)
    return _restore_rank(y, rank), ArgmaxRecord(indices=idx, input_shape=x4.shape)


def maxpool2x2_grad(record: ArgmaxRecord, upstream):
    dy4, rank = _to_batched_maps(upstream, op="maxpool2x2_grad")
    if dy4.shape != record.indices.shape:
        raise ShapeMismatchError(
            f"maxpool2x2_grad: upstream shape {dy4.shape} does not match the "
            f"pooled shape {record.indices.shape}")
    dx = backend.active().maxpool2x2_backward(record.indices, record.input_shape, dy4)
    if rank == 2:
        return dx[0, 0]
    if rank == 3:
        return dx[0]
    return dx


def tanh_activation(x):
    """Elementwise tanh(z) = (e^z - e^-z)/(e^z + e^-z); saturates without overflow."""
    x = np.asarray(x)
    if x.dtype not in _FLOAT_DTYPES:
        x = x.astype(np.float32)
    return np.tanh(x)


def tanh_grad(output, upstream):
    """d_input = upstream * (1 - output^2), output being the forward result."""
    output = np.asarray(output)
    upstream = np.asarray(upstream)
    if output.shape != upstream.shape:
        raise ShapeMismatchError(
            f"tanh_grad: output shape {output.shape} != upstream shape {upstream.shape}")
    return upstream * (1.0 - np.square(output))


def fully_connected(x, params: FcParams):
    """out = weights @ x + bias; accepts a flat vector or a batch [B, in_dim]."""
    x = np.asarray(x)
    if x.dtype not in _FLOAT_DTYPES:
        x = x.astype(np.float32)
    if x.shape[-1] != params.in_dim:
        raise ShapeMismatchError(
            f"fully_connected: input length {x.shape[-1]} != in_dim {params.in_dim}")
    dt = _common_dtype(x, params.weights)
    y = x.astype(np.float64, copy=False) @ params.weights.astype(np.float64).T
    y += params.bias.astype(np.float64)
    return np.ascontiguousarray(y.astype(dt))


def fc_grad(x, params: FcParams, upstream):
    x = np.asarray(x)
    dy = np.asarray(upstream)
    if x.shape[-1] != params.in_dim:
        raise ShapeMismatchError(
            f"fc_grad: input length {x.shape[-1]} != in_dim {params.in_dim}")
    if dy.shape[-1] != params.out_dim:
        raise ShapeMismatchError(
            f"fc_grad: upstream length {dy.shape[-1]} != out_dim {params.out_dim}")
    dt = _common_dtype(x, params.weights, dy)
    x2 = np.atleast_2d(x).astype(np.float64, copy=False)
    dy2 = np.atleast_2d(dy).astype(np.float64, copy=False)
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx2 = dy2 @ params.weights.astype(np.float64)
    dx = dx2 if x.ndim == 2 else dx2[0]
    return LayerGrads(d_weights=dw.astype(dt), d_bias=db.astype(dt),
                      d_input=np.ascontiguousarray(dx.astype(dt)))


def sgd_update(params, grads, lr):
    """params <- params - lr * grads, in place; returns params."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ShapeMismatchError(
            f"sgd_update: params shape {params.shape} != grads shape {grads.shape}")
    if not lr >= 0:
        raise ValueError(f"sgd_update: lr must be nonnegative, got {lr!r}")
    params -= (lr * grads).astype(params.dtype, copy=False)
    return params


def numeric_gradient(f, x, eps=1e-3):
    """Central-difference estimate of df/dx for scalar-valued f, per element."""
    if not eps > 0:
        raise ValueError(f"numeric_gradient: eps must be positive, got {eps!r}")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
