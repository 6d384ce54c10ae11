"""Dense-network micro-framework: MLP forward/backward and Adam, all numpy.

Gradients are computed by hand-written backpropagation; there is no autograd.
Networks are immutable during evaluation and safe to share read-only.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._validation import as_float_array, check_finite, check_rng

__all__ = ["Mlp", "Adam", "fit_regression", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu")


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_deriv(z, kind):
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(float)


class Mlp:
    """Fully connected network with linear output layer.

    Hidden layers use one activation (``tanh`` or ``relu``); the final layer
    is affine. Weights are Glorot-uniform, biases zero, drawn from an
    explicitly injected generator so construction is reproducible.
    """

    def __init__(self, layer_dims, activation="tanh", rng=None):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >=2 positive integers, got {layer_dims}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, got {activation!r}")
        rng = check_rng(rng)
        self.layer_dims = dims
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    @property
    def n_layers(self):
        return len(self.weights)

    def parameters(self):
        """Flat list [W0, b0, W1, b1, ...]; arrays are live references."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        dup = Mlp.__new__(Mlp)
        dup.layer_dims = list(self.layer_dims)
        dup.activation = self.activation
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    def _check_input(self, x):
        x = as_float_array(x, name="input")
        if x.ndim == 1:
            if x.shape[0] != self.in_dim:
                raise ValueError(f"input length {x.shape[0]} != expected {self.in_dim}")
            return x[None, :], True
        if x.ndim == 2:
            if x.shape[1] != self.in_dim:
                raise ValueError(f"input width {x.shape[1]} != expected {self.in_dim}")
            return x, False
        raise ValueError(f"input must be a vector or a matrix, got shape {x.shape}")

    def _forward_cached(self, x2d):
        pre = []
        post = [x2d]
        h = x2d
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if i == last else _activate(z, self.activation)
            post.append(h)
        return pre, post

    def forward(self, x):
        """Evaluate the network on a vector (d,) or batch (n, d)."""
        x2d, squeeze = self._check_input(x)
        _, post = self._forward_cached(x2d)
        out = post[-1]
        return out[0] if squeeze else out

    def backward(self, x, output_grad):
        """Backpropagate d(loss)/d(output) through the network.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` is a list
        of (dW, db) per layer. Batch inputs sum gradients over the batch.
        """
        x2d, squeeze = self._check_input(x)
        g = as_float_array(output_grad, name="output_grad")
        if squeeze:
            if g.shape != (self.out_dim,):
                raise ValueError(f"output_grad shape {g.shape} != ({self.out_dim},)")
            g = g[None, :]
        else:
            if g.shape != (x2d.shape[0], self.out_dim):
                raise ValueError(
                    f"output_grad shape {g.shape} != {(x2d.shape[0], self.out_dim)}"
                )
        pre, post = self._forward_cached(x2d)
        param_grads = [None] * self.n_layers
        delta = g
        for i in range(self.n_layers - 1, -1, -1):
            dw = delta.T @ post[i]
            db = delta.sum(axis=0)
            param_grads[i] = (dw, db)
            if i > 0:
                delta = (delta @ self.weights[i]) * _activate_deriv(pre[i - 1], self.activation)
            else:
                delta = delta @ self.weights[0]
        input_grad = delta[0] if squeeze else delta
        return param_grads, input_grad


class Adam:
    """Bias-corrected Adam over a list of parameter arrays, updated in place."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if learning_rate <= 0 or epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = None
        self.second_moment = None

    def step(self, params, grads):
        """Apply one Adam update. Zero gradients leave parameters unchanged."""
        if len(params) != len(grads):
            raise ValueError(f"got {len(params)} params but {len(grads)} grads")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"param/grad shape mismatch: {p.shape} vs {np.shape(g)}")
            check_finite(g, "gradient")
        if self.first_moment is None:
            self.first_moment = [np.zeros_like(p) for p in params]
            self.second_moment = [np.zeros_like(p) for p in params]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.first_moment, self.second_moment):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def _param_grads_flat(param_grads):
    out = []
    for dw, db in param_grads:
        out.extend((dw, db))
    return out


def fit_regression(net, x, y, *, epochs, batch_size=32, learning_rate=1e-3, rng=None):
    """Train ``net`` on (x, y) pairs under mean-squared error with Adam.

    Returns the per-epoch training loss as an array of length ``epochs``.
    ``epochs=0`` leaves the network untouched.
    """
    x = as_float_array(x, ndim=2, name="x")
    y = as_float_array(y, ndim=2, name="y")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")
    rng = check_rng(rng)
    opt = Adam(learning_rate=learning_rate)
    n = x.shape[0]
    losses = np.zeros(epochs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            pred = net.forward(xb)
            err = pred - yb
            total += float(np.sum(err * err))
            grad_out = (2.0 / len(idx)) * err
            param_grads, _ = net.backward(xb, grad_out)
            opt.step(net.parameters(), _param_grads_flat(param_grads))
        losses[epoch] = total / n
    return losses


def save_checkpoint(net, path):
    """Write a self-describing JSON checkpoint (lossless float round-trip)."""
    record = {
        "format_version": CHECKPOINT_VERSION,
        "layer_dims": net.layer_dims,
        "activation": net.activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path):
    record = json.loads(Path(path).read_text())
    version = record.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version: {version}")
    net = Mlp(record["layer_dims"], activation=record["activation"], rng=0)
    net.weights = [np.array(w, dtype=float) for w in record["weights"]]
    net.biases = [np.array(b, dtype=float) for b in record["biases"]]
    for w, dims in zip(net.weights, zip(net.layer_dims[1:], net.layer_dims[:-1])):
        if w.shape != dims:
            raise ValueError(f"checkpoint weight shape {w.shape} inconsistent with layer_dims")
    return net
