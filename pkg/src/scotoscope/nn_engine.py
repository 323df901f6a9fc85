"""Small differentiable-layer engine for 1-D signal classifiers.

Everything runs in float64 numpy. Each operation exists twice: as a pure
function over arrays (``conv1d_forward``, ``conv1d_backward``, ...) and as a
``Layer`` object that caches what its backward pass needs. The functions take
``(batch, features)`` or ``(batch, channels, length)`` tensors; the convolution
and pooling layers work channel-last, ``(batch, length, channels)``, which
turns every kernel tap into one contiguous matmul.
"""

import json
import struct

import numpy as np

from .errors import BatchTooSmall, ParseError, ShapeMismatch

__all__ = [
    "conv1d_forward",
    "conv1d_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "dropout_forward",
    "dense_forward",
    "dense_backward",
    "relu_forward",
    "relu_backward",
    "softmax",
    "softmax_cross_entropy",
    "AdamState",
    "adam_step",
    "Layer",
    "BatchNorm",
    "Dropout",
    "Conv1D",
    "MaxPool1D",
    "ReLU",
    "Flatten",
    "Dense",
    "Identity",
    "AddChannel",
    "write_params",
    "read_params",
]

MAGIC = b"SCTO1"


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


# ----------------------------------------------------------------------------
# Functional core
# ----------------------------------------------------------------------------


def _conv_cl(x, weight, bias):
    # x: (B, L, C), weight: (O, C, K) -> (B, L', O)
    n_out, n_in, k = weight.shape
    n = x.shape[1] - k + 1
    if n_in == 1:
        taps = np.lib.stride_tricks.sliding_window_view(x[:, :, 0], k, axis=1)
        return taps @ np.ascontiguousarray(weight[:, 0, :].T) + bias
    # matmul only reaches BLAS with contiguous operands
    w_taps = np.ascontiguousarray(weight.transpose(2, 1, 0))  # (K, C, O)
    out = x[:, 0:n, :] @ w_taps[0]
    for tap in range(1, k):
        out += x[:, tap : tap + n, :] @ w_taps[tap]
    out += bias
    return out


def _conv_cl_backward(x, weight, grad_out, need_input_grad=True):
    k = weight.shape[2]
    n = grad_out.shape[1]
    grad_w = np.empty_like(weight)
    grad_x = np.zeros_like(x) if need_input_grad else None
    w_taps = np.ascontiguousarray(weight.transpose(2, 0, 1))  # (K, O, C)
    for tap in range(k):
        xs = x[:, tap : tap + n, :]
        grad_w[:, :, tap] = (xs.transpose(0, 2, 1) @ grad_out).sum(axis=0).T
        if need_input_grad:
            grad_x[:, tap : tap + n, :] += grad_out @ w_taps[tap]
    return grad_x, grad_w, grad_out.sum(axis=(0, 1))


def _check_conv(x, weight, bias=None):
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    n_out, n_in, k = weight.shape
    if x.shape[1] != n_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, layer expects {n_in}")
    if k < 1 or x.shape[2] < k:
        raise ShapeMismatch(f"input length {x.shape[2]} shorter than kernel {k}")
    if bias is not None and np.shape(bias) != (n_out,):
        raise ShapeMismatch(f"bias shape {np.shape(bias)} != ({n_out},)")


def conv1d_forward(x, weight, bias):
    """Valid, stride-1 cross-correlation.

    Parameters
    ----------
    x : ndarray, shape (batch, in_channels, length)
    weight : ndarray, shape (out_channels, in_channels, kernel_len)
    bias : ndarray, shape (out_channels,)

    Returns
    -------
    out : ndarray, shape (batch, out_channels, length - kernel_len + 1)
        ``out[b, o, t] = sum_{i, k} x[b, i, t + k] * weight[o, i, k] + bias[o]``.
    """
    x = _as_f64(x)
    weight = _as_f64(weight)
    _check_conv(x, weight, bias)
    out = _conv_cl(x.transpose(0, 2, 1), weight, _as_f64(bias))
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def conv1d_backward(x, weight, grad_out):
    """Gradients of :func:`conv1d_forward` w.r.t. input, weight and bias."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    grad_out = _as_f64(grad_out)
    _check_conv(x, weight)
    expected = (x.shape[0], weight.shape[0], x.shape[2] - weight.shape[2] + 1)
    if grad_out.shape != expected:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {expected}")
    grad_x, grad_w, grad_b = _conv_cl_backward(
        x.transpose(0, 2, 1), weight, grad_out.transpose(0, 2, 1)
    )
    return np.ascontiguousarray(grad_x.transpose(0, 2, 1)), grad_w, grad_b


def _pool_cl(x, width):
    # pools axis 1 of (B, L, C)
    n = x.shape[1] // width
    blocks = x[:, : n * width, :].reshape(x.shape[0], n, width, x.shape[2])
    if width == 2:
        second = blocks[:, :, 1, :] > blocks[:, :, 0, :]
        return np.where(second, blocks[:, :, 1, :], blocks[:, :, 0, :]), second.astype(np.intp)
    argmax = blocks.argmax(axis=2)
    return np.take_along_axis(blocks, argmax[:, :, None, :], axis=2)[:, :, 0, :], argmax


def _pool_cl_backward(grad_out, argmax, input_shape, width):
    b, length, c = input_shape
    n = grad_out.shape[1]
    grad_x = np.zeros((b, length, c))
    blocks = grad_x[:, : n * width, :].reshape(b, n, width, c)
    if width == 2:
        second = argmax.astype(bool)
        blocks[:, :, 0, :] = np.where(second, 0.0, grad_out)
        blocks[:, :, 1, :] = np.where(second, grad_out, 0.0)
        return grad_x
    np.put_along_axis(blocks, argmax[:, :, None, :], grad_out[:, :, None, :], axis=2)
    return grad_x


def maxpool1d_forward(x, width=2):
    """Non-overlapping max pooling along the last axis.

    A trailing remainder shorter than ``width`` is dropped. Returns the pooled
    tensor and the within-window argmax (first index on ties).
    """
    x = _as_f64(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"maxpool1d expects (batch, channels, length), got {x.shape}")
    out, argmax = _pool_cl(x.transpose(0, 2, 1), width)
    return np.ascontiguousarray(out.transpose(0, 2, 1)), argmax.transpose(0, 2, 1)


def maxpool1d_backward(grad_out, argmax, input_shape, width=2):
    grad_out = _as_f64(grad_out)
    if grad_out.shape != argmax.shape:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != pooled shape {argmax.shape}")
    b, c, length = input_shape
    grad_x = _pool_cl_backward(
        grad_out.transpose(0, 2, 1), argmax.transpose(0, 2, 1), (b, length, c), width
    )
    return np.ascontiguousarray(grad_x.transpose(0, 2, 1))


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (slice(None),)
    if x.ndim == 3:
        return (0, 2), (None, slice(None), None)
    raise ShapeMismatch(f"batch norm expects 2-D or 3-D input, got {x.shape}")


def batchnorm_forward(x, gamma, beta, eps=1e-5, mean=None, var=None):
    """Normalize per feature (2-D) or per channel (3-D), then scale and shift.

    With ``mean``/``var`` left as None the batch statistics are used (train
    mode, biased variance); otherwise the given running statistics are used.

    Returns
    -------
    out : ndarray
    cache : tuple
        Whatever :func:`batchnorm_backward` needs; ``None`` in eval mode.
    """
    x = _as_f64(x)
    axes, idx = _bn_axes(x)
    n_feat = x.shape[1]
    if np.shape(gamma) != (n_feat,) or np.shape(beta) != (n_feat,):
        raise ShapeMismatch(f"gamma/beta must have shape ({n_feat},)")
    gamma_b = _as_f64(gamma)[idx]
    beta_b = _as_f64(beta)[idx]
    if mean is None:
        count = np.prod([x.shape[a] for a in axes])
        if x.shape[0] < 2:
            raise BatchTooSmall("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        centered = x - mean[idx]
        var = (centered**2).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = centered * inv_std[idx]
        out = gamma_b * x_hat + beta_b
        return out, (x_hat, inv_std, _as_f64(gamma), axes, idx, count, mean, var)
    x_hat = (x - _as_f64(mean)[idx]) / np.sqrt(_as_f64(var) + eps)[idx]
    return gamma_b * x_hat + beta_b, None


def batchnorm_backward(grad_out, cache):
    """Exact gradient of train-mode batch norm, including the dependence of
    the batch mean and variance on the input."""
    x_hat, inv_std, gamma, axes, idx, count, _, _ = cache
    grad_out = _as_f64(grad_out)
    if grad_out.shape != x_hat.shape:
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} != {x_hat.shape}")
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_x = (gamma * inv_std)[idx] / count * (
        count * grad_out - grad_beta[idx] - x_hat * grad_gamma[idx]
    )
    return grad_x, grad_gamma, grad_beta


def dropout_forward(x, rate, rng, train=True):
    """Inverted dropout. Returns ``(out, mask)``; mask is None when inactive."""
    x = _as_f64(x)
    if not train or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dense_forward(x, weight, bias):
    x = _as_f64(x)
    if x.ndim != 2 or weight.shape[0] != x.shape[1] or np.shape(bias) != (weight.shape[1],):
        raise ShapeMismatch(
            f"dense: input {x.shape}, weight {weight.shape}, bias {np.shape(bias)}"
        )
    return x @ weight + bias


def dense_backward(x, weight, grad_out):
    grad_out = _as_f64(grad_out)
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} incompatible with dense layer")
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x, grad_out):
    if np.shape(grad_out) != np.shape(x):
        raise ShapeMismatch("relu: gradient shape differs from input shape")
    return np.where(x > 0, grad_out, 0.0)


def softmax(logits):
    z = _as_f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of a softmax over the class axis.

    Returns ``(loss, grad_logits)`` with ``grad = (softmax - onehot) / batch``.
    """
    logits = _as_f64(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeMismatch("label out of range")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted[np.arange(n), labels] - log_norm
    loss = -log_prob.mean()
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class AdamState:
    """First/second moment estimates and step count, keyed like the params."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are dicts of equally-shaped arrays.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {key!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------


class Layer:
    """Base layer: no parameters, identity map."""

    name = "identity"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        return x

    def backward(self, grad_out):
        return grad_out

    def buffers(self):
        """Non-trainable state that must be persisted with the parameters."""
        return {}

    def describe(self):
        return {"type": self.name}


class Identity(Layer):
    pass


class BatchNorm(Layer):
    name = "batchnorm"

    def __init__(self, n_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(n_features), "beta": np.zeros(n_features)}
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self._cache = None

    def forward(self, x, train=False):
        if not train:
            out, _ = batchnorm_forward(
                x, self.params["gamma"], self.params["beta"], self.eps,
                mean=self.running_mean, var=self.running_var,
            )
            return out
        out, self._cache = batchnorm_forward(x, self.params["gamma"], self.params["beta"], self.eps)
        mean, var = self._cache[6], self._cache[7]
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mean
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * var
        return out

    def backward(self, grad_out):
        grad_x, grad_gamma, grad_beta = batchnorm_backward(grad_out, self._cache)
        self.grads = {"gamma": grad_gamma, "beta": grad_beta}
        return grad_x

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {"type": self.name, "features": len(self.running_mean),
                "momentum": self.momentum, "eps": self.eps}


class Dropout(Layer):
    name = "dropout"

    def __init__(self, rate, seed=0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)
        self._mask = None

    def forward(self, x, train=False):
        out, self._mask = dropout_forward(x, self.rate, self.rng, train)
        return out

    def backward(self, grad_out):
        return grad_out if self._mask is None else grad_out * self._mask

    def describe(self):
        return {"type": self.name, "rate": self.rate}


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1D(Layer):
    """Convolution layer over channel-last ``(batch, length, channels)`` tensors.

    Weights keep the ``(out_channels, in_channels, kernel_len)`` layout of
    :func:`conv1d_forward`. Set ``need_input_grad=False`` on a first layer
    whose input gradient is never used.
    """

    name = "conv1d"

    def __init__(self, in_channels, out_channels, kernel_len, rng, need_input_grad=True):
        super().__init__()
        fan_in = in_channels * kernel_len
        self.params = {
            "W": _uniform_init(rng, (out_channels, in_channels, kernel_len), fan_in),
            "b": _uniform_init(rng, (out_channels,), fan_in),
        }
        self.need_input_grad = need_input_grad
        self._x = None

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[2] != self.params["W"].shape[1]:
            raise ShapeMismatch(f"conv layer got input of shape {x.shape}")
        if x.shape[1] < self.params["W"].shape[2]:
            raise ShapeMismatch("input shorter than kernel")
        self._x = x
        return _conv_cl(x, self.params["W"], self.params["b"])

    def backward(self, grad_out):
        grad_x, grad_w, grad_b = _conv_cl_backward(
            self._x, self.params["W"], grad_out, self.need_input_grad
        )
        self.grads = {"W": grad_w, "b": grad_b}
        return grad_x

    def describe(self):
        out_c, in_c, k = self.params["W"].shape
        return {"type": self.name, "in_channels": in_c, "out_channels": out_c, "kernel": k}


class MaxPool1D(Layer):
    """Max pooling over the length axis of ``(batch, length, channels)``."""

    name = "maxpool1d"

    def __init__(self, width=2):
        super().__init__()
        self.width = width
        self._argmax = None
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        out, self._argmax = _pool_cl(x, self.width)
        return out

    def backward(self, grad_out):
        return _pool_cl_backward(grad_out, self._argmax, self._shape, self.width)

    def describe(self):
        return {"type": self.name, "width": self.width}


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        super().__init__()
        self._active = None

    def forward(self, x, train=False):
        self._active = x > 0
        return relu_forward(x)

    def backward(self, grad_out):
        if grad_out.shape != self._active.shape:
            raise ShapeMismatch("relu: gradient shape differs from input shape")
        return grad_out * self._active


class Flatten(Layer):
    name = "flatten"

    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class AddChannel(Layer):
    """(batch, length) -> channel-last (batch, length, 1)."""

    name = "add_channel"

    def forward(self, x, train=False):
        return x[:, :, None]

    def backward(self, grad_out):
        return None if grad_out is None else grad_out[:, :, 0]


class Dense(Layer):
    name = "dense"

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params = {
            "W": _uniform_init(rng, (n_in, n_out), n_in),
            "b": _uniform_init(rng, (n_out,), n_in),
        }
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return dense_forward(x, self.params["W"], self.params["b"])

    def backward(self, grad_out):
        grad_x, grad_w, grad_b = dense_backward(self._x, self.params["W"], grad_out)
        self.grads = {"W": grad_w, "b": grad_b}
        return grad_x

    def describe(self):
        n_in, n_out = self.params["W"].shape
        return {"type": self.name, "in": n_in, "out": n_out}


# ----------------------------------------------------------------------------
# Parameter files
# ----------------------------------------------------------------------------


def write_params(path, arrays, architecture=None):
    """Write arrays to a ``SCTO1`` binary file.

    Layout: magic, u32 array count, then per array a u32 ndim, ndim u32 dims
    and the little-endian f64 payload. If ``architecture`` is given it is
    written to ``<path>.json`` alongside.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    if architecture is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(architecture, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError("not a SCTO1 parameter file", path=path)
    pos = len(MAGIC)
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise ParseError("truncated parameter file", path=path)
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy())
            pos += 8 * n
    except struct.error as exc:
        raise ParseError(f"truncated parameter file ({exc})", path=path) from exc
    if pos != len(data):
        raise ParseError("trailing bytes in parameter file", path=path)
    return arrays
