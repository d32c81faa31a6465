"""Small trainable MLP feature extractor with hand-written backprop and SGD.

All arrays are float64. Weights are stored ``(out, in)`` so a layer computes
``z = x @ W.T + b``; inputs may be a single vector ``(in,)`` or a batch
``(B, in)``.
"""

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputShapeError, NumericError, StaleCacheError

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (RELU, IDENTITY)

FORMAT_NAME = "deepnno-mlp"
FORMAT_VERSION = 1

Gradients = List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InputShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations recorded by ``forward_with_cache``."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    batched: bool


class EmbeddingNetwork:
    """Feed-forward network of affine layers with rectifier/identity activations."""

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InputShapeError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if layers[-1].activation != IDENTITY:
            raise ValueError("last layer must use the identity activation")
        self.layers = layers

    @classmethod
    def create(cls, input_dim, hidden_sizes=(64, 32), output_dim=32, seed=None):
        """Build a network with Glorot-uniform weights and zero biases."""
        rng = np.random.default_rng(seed)
        dims = [int(input_dim), *[int(h) for h in hidden_sizes], int(output_dim)]
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = IDENTITY if i == len(dims) - 2 else RELU
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    @property
    def architecture(self):
        return tuple((l.in_dim, l.out_dim, l.activation) for l in self.layers)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise InputShapeError(
                f"expected input of length {self.input_dim}, got shape {x.shape}"
            )
        return x

    def forward(self, x):
        return self.forward_with_cache(x)[0]

    def forward_with_cache(self, x):
        x = self._check_input(x)
        batched = x.ndim == 2
        h = x if batched else x[None, :]
        inputs, pre = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == RELU else z
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite network output")
        out = h if batched else h[0]
        return out, ForwardCache(inputs, pre, batched)

    def backward(self, cache: ForwardCache, grad_out) -> Gradients:
        """Gradients of ``sum(grad_out * output)`` with respect to every parameter.

        For a batch the per-sample contributions are summed; scale
        ``grad_out`` by ``1/B`` beforehand to get the gradient of a mean.
        """
        if len(cache.inputs) != len(self.layers):
            raise StaleCacheError("cache layer count does not match network")
        for layer, h, z in zip(self.layers, cache.inputs, cache.pre_activations):
            if h.shape[1] != layer.in_dim or z.shape[1] != layer.out_dim:
                raise StaleCacheError("cache shapes do not match network")
        g = np.asarray(grad_out, dtype=np.float64)
        if not cache.batched:
            g = g[None, :]
        if g.shape != cache.pre_activations[-1].shape:
            raise InputShapeError(
                f"grad_out shape {g.shape} does not match output "
                f"{cache.pre_activations[-1].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite upstream gradient")

        grads: Gradients = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == RELU:
                g = g * (cache.pre_activations[i] > 0)
            grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
            if i:
                g = g @ layer.weight
        return grads

    def parameters(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def copy(self):
        return copy.deepcopy(self)

    def snapshot(self):
        return NetworkSnapshot(self)

    def to_dict(self):
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layers": [
                {
                    "in": l.in_dim,
                    "out": l.out_dim,
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported network document {doc.get('format')!r} v{doc.get('version')!r}"
            )
        layers = []
        for spec in doc["layers"]:
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["out"], spec["in"])
            layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), spec["activation"]))
        return cls(layers)


class NetworkSnapshot:
    """Read-only copy of a network, used as the distillation teacher."""

    def __init__(self, net: EmbeddingNetwork):
        self._net = net.copy()
        for p in self._net.parameters():
            p.flags.writeable = False

    @property
    def architecture(self):
        return self._net.architecture

    @property
    def input_dim(self):
        return self._net.input_dim

    @property
    def output_dim(self):
        return self._net.output_dim

    def forward(self, x):
        return self._net.forward(x)

    def to_dict(self):
        return self._net.to_dict()

    @classmethod
    def from_dict(cls, doc):
        return cls(EmbeddingNetwork.from_dict(doc))

    def thaw(self):
        """Return a writable network with the snapshot's parameters."""
        net = copy.deepcopy(self._net)
        for p in net.parameters():
            p.flags.writeable = True
        return net


@dataclass
class Sgd:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``v <- momentum * v + (grad + weight_decay * param)``,
    ``param <- param - learning_rate * v``.
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: Optional[List[np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def reset(self):
        self.velocity = None

    def step(self, net: EmbeddingNetwork, grads: Gradients):
        params = list(net.parameters())
        flat = [g for pair in grads for g in pair]
        if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
            raise InputShapeError("gradients do not match network parameters")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        new_values = []
        for p, g, v in zip(params, flat, self.velocity):
            v_new = self.momentum * v + (g + self.weight_decay * p)
            p_new = p - self.learning_rate * v_new
            if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(p_new))):
                raise NumericError("non-finite parameter update")
            new_values.append((v_new, p_new))
        # commit only after every update is known to be finite
        for p, v, (v_new, p_new) in zip(params, self.velocity, new_values):
            v[...] = v_new
            p[...] = p_new
        return net
