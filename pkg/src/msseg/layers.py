"""Differentiable layer primitives with explicit forward and gradient passes.

Each stateful layer caches what its gradient pass needs during ``forward`` and
writes parameter gradients into its :class:`LayerParams` during ``backward``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, tensor
from .errors import ConfigurationError, DimensionError, InputError, UsageError

LOG_EPS = 1e-12


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_biases: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_biases is None:
            self.grad_biases = np.zeros_like(self.biases)

    def astype(self, dtype):
        return LayerParams(self.weights.astype(dtype), self.biases.astype(dtype))


def init_params(weight_shape, fan_in, rng, dtype=tensor.TRAIN_DTYPE):
    """He-normal weights (variance ``2 / fan_in``) and zero biases.

    The bias length is the last axis of ``weight_shape`` for dense weights
    ``[F_in, F_out]`` and the first axis for kernels ``[C_out, C_in, k, k]``.
    """
    if fan_in < 1:
        raise ConfigurationError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    weights = (rng.standard_normal(weight_shape) * std).astype(dtype)
    n_out = weight_shape[0] if len(weight_shape) == 4 else weight_shape[-1]
    return LayerParams(weights, np.zeros(n_out, dtype=dtype))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, out):
    """Gradient of ReLU given its forward output; zero where the output is zero."""
    return grad * (out > 0)


class Dropout:
    """Inverted dropout: kept units are scaled by ``1 / keep_prob`` while training."""

    def __init__(self, keep_prob=0.5):
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigurationError(f"keep probability must be in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self.mask = None

    def forward(self, x, training, rng=None):
        if not training:
            self.mask = None
            return x
        if self.keep_prob == 1.0:
            self.mask = np.ones(x.shape, dtype=x.dtype)
            return x
        if rng is None:
            raise UsageError("dropout in training mode needs a random generator")
        self.mask = (rng.random(x.shape) < self.keep_prob).astype(x.dtype)
        return x * self.mask * x.dtype.type(1.0 / self.keep_prob)

    def backward(self, grad):
        if self.mask is None:
            return grad
        return grad * self.mask * grad.dtype.type(1.0 / self.keep_prob)


def dropout_forward(x, keep_prob, training, rng=None):
    """Functional form of :class:`Dropout`; returns ``(out, mask)``."""
    layer = Dropout(keep_prob)
    return layer.forward(x, training, rng), layer.mask


class Dense:
    """Fully connected layer ``out = x @ W + b`` on ``[B, F_in]`` inputs."""

    def __init__(self, params):
        self.params = params
        self._x = None

    def forward(self, x):
        w = self.params.weights
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise DimensionError(
                f"dense layer expects [B, {w.shape[0]}] input, got shape {x.shape}")
        self._x = x
        return tensor.matmul(x, w) + self.params.biases

    def backward(self, grad):
        if self._x is None:
            raise UsageError("backward called before forward")
        p = self.params
        p.grad_weights = self._x.T @ grad
        p.grad_biases = grad.sum(axis=0)
        return grad @ p.weights.T


def dense_forward(x, params):
    return Dense(params).forward(x)


class ConvBlock:
    """Valid convolution, ReLU, then optional mirror-padded 2x2 max-pooling.

    Operates on ``[C, B, H, W]`` feature maps.
    """

    def __init__(self, params, pool, need_input_grad=True):
        self.params = params
        self.pool = pool
        self.need_input_grad = need_input_grad
        self._cache = None

    def forward(self, x):
        out, conv_cache = tensor.conv2d_valid_batch(
            x, self.params.weights, self.params.biases, return_cache=True)
        out = np.maximum(out, 0, out=out)
        argmax = None
        pooled = out
        if self.pool:
            pooled, argmax = _kernels.maxpool_stack(out)
        self._cache = (x.shape, conv_cache, out, argmax)
        return pooled

    def backward(self, grad):
        if self._cache is None:
            raise UsageError("backward called before forward")
        x_shape, conv_cache, act, argmax = self._cache
        if self.pool:
            grad = _kernels.maxpool_relu_backward(grad, argmax, act)
        else:
            grad = relu_backward(grad, act)
        p = self.params
        p.grad_weights, p.grad_biases, grad_x = tensor.conv2d_valid_backward(
            grad, conv_cache, x_shape, p.weights, need_input_grad=self.need_input_grad)
        return grad_x

    def release(self):
        self._cache = None


def conv_block_forward(x, params, pool):
    """Single-sample convenience: ``[C, H, W] -> [C_out, H', W']``."""
    return ConvBlock(params, pool).forward(x[:, None])[:, 0]


def softmax(x):
    """Row-wise softmax with max-subtraction."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_targets(probs, targets):
    targets = np.asarray(targets)
    if targets.shape != (probs.shape[0],):
        raise InputError(f"expected {probs.shape[0]} targets, got shape {targets.shape}")
    n = probs.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise InputError(f"target class index out of range [0, {n})")
    return targets.astype(np.intp)


def cross_entropy_loss(probs, targets, eps=LOG_EPS):
    """Mean negative log-likelihood of the target classes.

    ``eps`` guards the log against zero probabilities. The gradient of
    :func:`softmax_cross_entropy_grad` is exact for ``eps=0``.
    """
    targets = _check_targets(probs, targets)
    picked = probs[np.arange(probs.shape[0]), targets]
    return float(-np.mean(np.log(picked + eps)))


def softmax_cross_entropy_grad(probs, targets):
    """Gradient of the mean cross-entropy w.r.t. the pre-softmax logits."""
    targets = _check_targets(probs, targets)
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), targets] -= 1
    return grad / probs.shape[0]
