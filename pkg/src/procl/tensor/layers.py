"""Dense and convolutional layers expressed as tape operations.

Parameters live in a plain ``dict[str, ndarray]``; layers look them up by a
name prefix so one dict holds a whole network.
"""

import numpy as np

from .autodiff import conv2d, relu, tanh

ACTIVATIONS = {"relu": relu, "tanh": tanh, None: lambda x: x}


def init_dense(params, prefix, n_in, n_out, rng, scale=None):
    # Glorot-uniform weights, zero bias
    limit = np.sqrt(6.0 / (n_in + n_out)) if scale is None else scale
    params[f"{prefix}.w"] = rng.uniform(-limit, limit, size=(n_in, n_out))
    params[f"{prefix}.b"] = np.zeros(n_out)


def init_conv(params, prefix, k, c_in, c_out, rng):
    # He-uniform, suited to the ReLU that follows every conv
    limit = np.sqrt(6.0 / (k * k * c_in))
    params[f"{prefix}.w"] = rng.uniform(-limit, limit, size=(k, k, c_in, c_out))
    params[f"{prefix}.b"] = np.zeros(c_out)


def dense(tape, params, prefix, x, activation=None):
    w = tape.param(f"{prefix}.w", params[f"{prefix}.w"])
    b = tape.param(f"{prefix}.b", params[f"{prefix}.b"])
    return ACTIVATIONS[activation](x @ w + b)


def conv(tape, params, prefix, x, stride=2, activation="relu"):
    w = tape.param(f"{prefix}.w", params[f"{prefix}.w"])
    b = tape.param(f"{prefix}.b", params[f"{prefix}.b"])
    return ACTIVATIONS[activation](conv2d(x, w, stride=stride) + b)


def conv_output_size(size, k, stride):
    return (size - k) // stride + 1
