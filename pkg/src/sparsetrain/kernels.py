"""Dense forward/backward kernels for the layer types the toy CNNs use.

All kernels are pure functions over numpy arrays. 4-D activations are
(batch, channel, height, width); conv weights are
(out_channel, in_channel, kernel_h, kernel_w). Computation happens in the
dtype of the inputs; verification suites run everything in float64.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ConfigurationError, InputError


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum_coef: float = 0.1

    @classmethod
    def create(cls, channels, dtype=np.float64, epsilon=1e-5, momentum_coef=0.1):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum_coef=momentum_coef,
        )


@dataclass
class BatchNormCache:
    """Values saved by batchnorm_forward for the backward pass."""

    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    batch_mean: np.ndarray = None
    batch_var: np.ndarray = None


def _conv_out_extent(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x, kernel_h, kernel_w, stride, pad):
    """Column matrix (C*R*S, N*H'*W') of padded sliding windows of x."""
    n, c, h, wd = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = _conv_out_extent(h, kernel_h, stride, pad)
    wo = _conv_out_extent(wd, kernel_w, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kernel_h, kernel_w, n, ho, wo), dtype=x.dtype)
    for i in range(kernel_h):
        for j in range(kernel_w):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride,
                               j : j + stride * wo : stride]
    return cols.reshape(c * kernel_h * kernel_w, n * ho * wo), ho, wo


def conv2d_forward_cols(x, w, stride=1, pad=0):
    """Like conv2d_forward, also returning the im2col matrix for reuse."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D tensors, got {x.ndim}-D and {w.ndim}-D")
    n, c, h, wd = x.shape
    k, cw, r, s = w.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels but weights expect {cw}")
    ho = _conv_out_extent(h, r, stride, pad)
    wo = _conv_out_extent(wd, s, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigurationError(
            f"non-positive conv output extent ({ho}x{wo}) for input {h}x{wd}, "
            f"kernel {r}x{s}, stride {stride}, pad {pad}"
        )
    cols, ho, wo = _im2col(x, r, s, stride, pad)
    out = (w.reshape(k, c * r * s) @ cols).reshape(k, n, ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def conv2d_forward(x, w, stride=1, pad=0):
    """Cross-correlation of x (N,C,H,W) with w (K,C,R,S)."""
    out, _ = conv2d_forward_cols(x, w, stride, pad)
    return out


def conv2d_backward(x, w, grad_out, stride=1, pad=0, cols=None):
    """Adjoint of conv2d_forward: returns (grad_x, grad_w).

    `cols` may be the im2col matrix from conv2d_forward_cols; otherwise
    it is recomputed from x.
    """
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    ho = _conv_out_extent(h, r, stride, pad)
    wo = _conv_out_extent(wd, s, stride, pad)
    if grad_out.shape != (n, k, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != expected {(n, k, ho, wo)}"
        )
    if cols is None:
        cols, _, _ = _im2col(x, r, s, stride, pad)
    gk = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(k, n * ho * wo)
    grad_w = (gk @ cols.T).reshape(k, c, r, s)

    # grad_x via scatter-add of w^T @ grad_out into the padded input
    grad_cols = (w.reshape(k, c * r * s).T @ gk).reshape(c, r, s, n, ho, wo)
    grad_xp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(r):
        for j in range(s):
            grad_xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                grad_cols[:, i, j]
            )
    if pad > 0:
        grad_xp = grad_xp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(grad_xp.transpose(1, 0, 2, 3)), grad_w


def batchnorm_forward(x, state, training=True):
    """Per-channel batch normalization over (N, H, W).

    Returns (output, cache); cache is what the backward pass needs. In
    training mode the running stats of `state` are updated in place.
    """
    c = x.shape[1]
    if state.gamma.shape[0] != c:
        raise DimensionError(
            f"input has {c} channels but BN state has {state.gamma.shape[0]}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum_coef
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = state.gamma.reshape(shape) * x_hat + state.beta.reshape(shape)
    cache = BatchNormCache(
        x_hat=x_hat, inv_std=inv_std, gamma=state.gamma.copy(),
        batch_mean=mean, batch_var=var,
    )
    return out, cache


def batchnorm_backward(cache, grad_out):
    """Analytic batch-norm backward from saved forward values.

    Returns (grad_x, grad_gamma, grad_beta). grad_x is exactly zero on
    channels whose gamma is zero.
    """
    x_hat = cache.x_hat
    if grad_out.shape != x_hat.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != forward shape {x_hat.shape}"
        )
    c = x_hat.shape[1]
    axes = (0,) + tuple(range(2, x_hat.ndim))
    shape = (1, c) + (1,) * (x_hat.ndim - 2)
    m = x_hat.size // c
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_x = (cache.gamma * cache.inv_std).reshape(shape) * (
        grad_out
        - (grad_beta / m).reshape(shape)
        - x_hat * (grad_gamma / m).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0)


def linear_forward(x, w, b):
    """x (N,D) @ w (M,D)^T + b (M)."""
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input dim {x.shape[1]} != weight dim {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise DimensionError(f"bias dim {b.shape[0]} != weight rows {w.shape[0]}")
    return x @ w.T + b


def linear_backward(x, w, grad_out):
    """Returns (grad_x, grad_w, grad_b)."""
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != {(x.shape[0], w.shape[0])}"
        )
    grad_x = grad_out @ w
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def global_avgpool_forward(x):
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avgpool expects 4-D input, got {x.ndim}-D")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(x_shape, grad_out):
    n, c, h, w = x_shape
    if grad_out.shape != (n, c):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, c)}")
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], x_shape).copy()


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch, with the gradient w.r.t. logits.

    Stabilized with max-subtraction. Returns (loss, grad_logits) where
    grad = (softmax - onehot) / N.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    grad = exp / denom
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


def sgd_momentum_step(weights, grads, momentum_buf, lr, momentum_coef):
    """v <- mu*v + g; w <- w - lr*v.  Updates weights and buffer in place."""
    if weights.shape != grads.shape or weights.shape != momentum_buf.shape:
        raise DimensionError("weights, grads, and momentum buffer must share a shape")
    momentum_buf *= momentum_coef
    momentum_buf += grads
    weights -= lr * momentum_buf
