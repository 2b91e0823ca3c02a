"""Small dense networks with hand-written reverse-mode gradients.

Everything is float64 numpy. A network records the intermediate values of
its most recent forward pass so that a following :meth:`DenseNet.backward`
can turn an upstream gradient into parameter and input gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, StateError, TrainingDivergence

ACTIVATIONS = ("linear", "relu", "softplus", "exp")


def _activate(z, kind):
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "exp":
        # clipped so that evidence stays finite
        return np.exp(np.minimum(z, 50.0))
    raise ContractViolation(f"unknown activation {kind!r}")


def _activate_grad(z, a, kind):
    """Derivative of the activation, given pre-activation z and output a."""
    if kind == "linear":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "softplus":
        # sigmoid(z), written to avoid overflow for large |z|
        return np.exp(-np.logaddexp(0.0, -z))
    if kind == "exp":
        return np.where(z < 50.0, a, 0.0)
    raise ContractViolation(f"unknown activation {kind!r}")


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class GradientTape:
    """Gradients of a scalar loss w.r.t. every parameter and the input."""

    weights: list
    biases: list
    inputs: np.ndarray

    def arrays(self):
        for gw, gb in zip(self.weights, self.biases):
            yield gw
            yield gb

    def is_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.arrays())


@dataclass
class DenseNet:
    layers: list
    _cache: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ContractViolation(
                    f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ContractViolation("bias length must equal the layer's output width")

    @classmethod
    def build(cls, sizes, activations, rng):
        """Create a network with scaled-uniform (Glorot) initialisation.

        ``sizes`` lists the widths from input to output, ``activations`` has
        one tag per layer, i.e. ``len(sizes) - 1`` entries.
        """
        if len(activations) != len(sizes) - 1:
            raise ContractViolation("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(Dense(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def forward(self, x):
        """Evaluate the network on one vector or a batch of row vectors.

        The intermediate values are kept for :meth:`backward`; the returned
        output depends only on ``x`` and the current parameters.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ContractViolation(
                f"expected input width {self.input_dim}, got shape {x.shape}"
            )
        if not np.all(np.isfinite(batch)):
            raise ContractViolation("input contains non-finite values")
        cache = []
        a = batch
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            out = _activate(z, layer.activation)
            cache.append((a, z, out))
            a = out
        self._cache = (single, cache)
        return a[0] if single else a

    def backward(self, upstream):
        """Back-propagate ``upstream`` (dLoss/dOutput) through the last forward.

        Parameter gradients are summed over the batch. The recorded forward
        pass is consumed.
        """
        if self._cache is None:
            raise StateError("backward called without a recorded forward pass")
        single, cache = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        expected = cache[-1][2].shape
        if g.shape != expected:
            raise ContractViolation(f"upstream gradient shape {g.shape} != output {expected}")
        self._cache = None
        gws, gbs = [], []
        for layer, (a_in, z, out) in zip(reversed(self.layers), reversed(cache)):
            gz = g * _activate_grad(z, out, layer.activation)
            gws.append(gz.T @ a_in)
            gbs.append(gz.sum(axis=0))
            g = gz @ layer.weight
        gws.reverse()
        gbs.reverse()
        return GradientTape(gws, gbs, g[0] if single else g)

    def copy(self):
        return DenseNet([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    # checkpointing

    def to_dict(self):
        return {
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for entry in d["layers"]:
            shape = tuple(entry["shape"])
            w = np.asarray(entry["weight"], dtype=np.float64).reshape(shape)
            b = np.asarray(entry["bias"], dtype=np.float64)
            layers.append(Dense(w, b, entry["activation"]))
        return cls(layers)

    def save(self, path):
        # json writes float repr, which round-trips float64 exactly
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sgd_step(net, tape, lr):
    """Plain gradient descent update ``p <- p - lr * grad``."""
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    if not tape.is_finite():
        raise TrainingDivergence("non-finite gradient in sgd_step")
    for layer, gw, gb in zip(net.layers, tape.weights, tape.biases):
        layer.weight -= lr * gw
        layer.bias -= lr * gb


class SGD:
    """SGD with optional heavy-ball momentum, one instance per network."""

    def __init__(self, net, lr=0.05, momentum=0.0):
        if lr < 0:
            raise ContractViolation("learning rate must be non-negative")
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p) for p in net.parameters()]

    def step(self, tape):
        if self.momentum == 0.0:
            sgd_step(self.net, tape, self.lr)
            return
        if not tape.is_finite():
            raise TrainingDivergence("non-finite gradient in SGD.step")
        for p, v, g in zip(self.net.parameters(), self._velocity, tape.arrays()):
            v *= self.momentum
            v += g
            p -= self.lr * v


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` and its gradient w.r.t. logits."""
    n, k = logits.shape
    p = softmax(logits)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
