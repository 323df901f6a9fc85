"""Finite-difference gradient checks, one per layer.

Each ``check_*`` draws a random instance from ``rng`` and returns the
relative errors between analytic and central-difference gradients, one per
differentiated argument. Losses are ``sum(out * r)`` for a fixed random
``r``, so every output position contributes.
"""

import numpy as np

from scotoscope import nn_engine as nn

from oracles import central_difference, relative_error

H = 1e-5


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def check_conv(rng):
    batch, c_in, c_out = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    k = rng.integers(1, 5)
    length = k + rng.integers(0, 6)
    x = rng.normal(size=(batch, c_in, length))
    w = rng.normal(size=(c_out, c_in, k))
    b = rng.normal(size=c_out)
    r = rng.normal(size=(batch, c_out, length - k + 1))
    gx, gw, gb = nn.conv1d_backward(x, w, r)

    def f():
        return float(np.sum(nn.conv1d_forward(x, w, b) * r))

    return [relative_error(a, central_difference(f, v, H)) for a, v in ((gx, x), (gw, w), (gb, b))]


def check_maxpool(rng):
    batch, channels = rng.integers(1, 4), rng.integers(1, 4)
    width = rng.integers(2, 4)
    length = width * rng.integers(1, 5) + rng.integers(0, width)
    # distinct values at least 0.1 apart so no perturbation changes the argmax
    x = rng.permutation(batch * channels * length).reshape(batch, channels, length) * 0.1
    x = x + rng.uniform(0, 0.01, size=x.shape)
    out, argmax = nn.maxpool1d_forward(x, width)
    r = rng.normal(size=out.shape)
    gx = nn.maxpool1d_backward(r, argmax, x.shape, width)

    def f():
        return float(np.sum(nn.maxpool1d_forward(x, width)[0] * r))

    return [relative_error(gx, central_difference(f, x, H))]


def check_batchnorm(rng):
    # with only two values per feature the outputs are +-1 whatever the input,
    # the input gradient is ~0 and a relative error measures rounding noise
    batch = rng.integers(3, 7)
    shape = (batch, rng.integers(1, 4)) if rng.random() < 0.5 else (batch, rng.integers(1, 4), rng.integers(1, 5))
    x = rng.normal(size=shape) * rng.uniform(0.5, 3) + rng.normal()
    gamma = rng.normal(size=shape[1])
    beta = rng.normal(size=shape[1])
    out, cache = nn.batchnorm_forward(x, gamma, beta)
    r = rng.normal(size=out.shape)
    gx, gg, gb = nn.batchnorm_backward(r, cache)

    def f():
        return float(np.sum(nn.batchnorm_forward(x, gamma, beta)[0] * r))

    return [relative_error(a, central_difference(f, v, H)) for a, v in ((gx, x), (gg, gamma), (gb, beta))]


def check_dense(rng):
    batch, n_in, n_out = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
    x = rng.normal(size=(batch, n_in))
    w = rng.normal(size=(n_in, n_out))
    b = rng.normal(size=n_out)
    r = rng.normal(size=(batch, n_out))
    gx, gw, gb = nn.dense_backward(x, w, r)

    def f():
        return float(np.sum(nn.dense_forward(x, w, b) * r))

    return [relative_error(a, central_difference(f, v, H)) for a, v in ((gx, x), (gw, w), (gb, b))]


def check_relu(rng):
    x = _away_from_zero(rng, (rng.integers(1, 5), rng.integers(1, 6)))
    r = rng.normal(size=x.shape)
    gx = nn.relu_backward(x, r)

    def f():
        return float(np.sum(nn.relu_forward(x) * r))

    return [relative_error(gx, central_difference(f, x, H))]


def check_softmax_ce(rng):
    batch, n_class = rng.integers(1, 6), rng.integers(2, 5)
    logits = rng.normal(size=(batch, n_class)) * 3
    labels = rng.integers(0, n_class, size=batch)
    _, grad = nn.softmax_cross_entropy(logits, labels)

    def f():
        return nn.softmax_cross_entropy(logits, labels)[0]

    return [relative_error(grad, central_difference(f, logits, H))]


CHECKS = {
    "conv1d": (check_conv, 1e-6),
    "maxpool": (check_maxpool, 1e-6),
    "batchnorm": (check_batchnorm, 1e-5),
    "dense": (check_dense, 1e-6),
    "relu": (check_relu, 1e-6),
    "softmax_ce": (check_softmax_ce, 1e-6),
}
