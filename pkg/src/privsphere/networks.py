"""Dense network builders for the private sphere, public sphere and discriminator."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

FUNNEL_KINDS = ("linear", "relu-affine", "orthonormal-relu-affine")


@dataclass(frozen=True)
class PrivateSphereSpec:
    """On-device feature map ending in a narrow funnel layer.

    ``hidden`` adds dense ReLU layers before the funnel (empty by default, as
    in the single-projection setup).  Dropout, when enabled, applies to those
    hidden layers only, never to the funnel.
    """

    input_dim: int
    funnel_dim: int
    funnel: str = "relu-affine"
    hidden: tuple = ()
    dropout: float = 0.0

    def __post_init__(self):
        if self.funnel not in FUNNEL_KINDS:
            raise ContractError(f"unknown funnel kind {self.funnel!r}")
        width = self.hidden[-1] if self.hidden else self.input_dim
        if not 0 < self.funnel_dim <= width:
            raise ContractError(
                f"funnel_dim must be in [1, {width}], got {self.funnel_dim}"
            )
        _check_dropout(self.dropout)

    @property
    def orthonormal(self):
        return self.funnel == "orthonormal-relu-affine"


@dataclass(frozen=True)
class PublicSphereSpec:
    input_dim: int
    n_classes: int
    hidden: tuple = (500,)
    softmax: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ContractError("the output layer needs at least one unit")
        _check_dropout(self.dropout)


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Privacy discriminator.  Dropout and batch normalisation are refused:
    regularising the discriminator changes the privacy objective it serves."""

    input_dim: int
    output_dim: int
    hidden: tuple = (1024,)
    dropout: float = 0.0
    batch_norm: bool = False

    def __post_init__(self):
        if self.dropout or self.batch_norm:
            raise ContractError("the privacy discriminator must not use dropout or batch norm")
        if self.output_dim < 1:
            raise ContractError("the output layer needs at least one unit")


def _check_dropout(rate):
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")


class Dense:
    def __init__(self, fan_in, fan_out, activation, rng, bias=True, name=""):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.W = ad.Parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name=f"{name}.W")
        self.b = ad.Parameter(np.zeros((fan_out, 1)), name=f"{name}.b") if bias else None
        self.activation = activation

    @property
    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]


class Network:
    """Feed-forward stack applied to ``(features, samples)`` inputs.

    ``dropout`` maps layer index to a drop rate for that layer's output.
    """

    def __init__(self, layers, dropout=None, spec=None):
        self.layers = layers
        self.dropout = dropout or {}
        self.spec = spec

    @property
    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters]

    def layer_nodes(self, frozen=False):
        """``(W, b, activation)`` triples, as consumed by ``input_gradient_graph``."""
        wrap = ad.stop_gradient if frozen else (lambda p: p)
        return [
            (wrap(l.W), None if l.b is None else wrap(l.b), l.activation)
            for l in self.layers
        ]

    def __call__(self, x, frozen=False, train=False, rng=None):
        h = ad.as_node(x)
        for i, (W, b, act) in enumerate(self.layer_nodes(frozen)):
            h = ad.matmul(ad.transpose(W), h)
            if b is not None:
                h = h + b
            if act == "relu":
                h = ad.relu(h)
            rate = self.dropout.get(i, 0.0)
            if train and rate > 0:
                if rng is None:
                    raise ContractError("dropout in training mode needs an rng")
                keep = (rng.random(h.value.shape) >= rate) / (1.0 - rate)
                h = h * keep
        return h

    def apply(self, X):
        """Plain forward pass on an array, no graph kept."""
        h = np.asarray(X, dtype=float)
        for layer in self.layers:
            h = layer.W.value.T @ h
            if layer.b is not None:
                h = h + layer.b.value
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def state(self):
        return {p.name: p.value.copy() for p in self.parameters}

    def load_state(self, state):
        for p in self.parameters:
            p.assign(state[p.name])


class PrivateSphere(Network):
    @property
    def funnel(self):
        return self.layers[-1]


class PublicSphere(Network):
    def predict_proba(self, Z):
        logits = self.apply(Z)
        if not self.spec.softmax:
            return logits
        shifted = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=0, keepdims=True)


def _dense_stack(sizes, activations, rng, prefix, bias_last=True):
    layers = []
    for i, (fan_in, fan_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
        bias = bias_last or i < len(activations) - 1
        layers.append(Dense(fan_in, fan_out, act, rng, bias=bias, name=f"{prefix}{i}"))
    return layers


def build_network(spec, seed=0):
    """Fresh network for ``spec`` with seeded scaled-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, PrivateSphereSpec):
        sizes = [spec.input_dim, *spec.hidden, spec.funnel_dim]
        funnel_act = "linear" if spec.funnel == "linear" else "relu"
        acts = ["relu"] * len(spec.hidden) + [funnel_act]
        layers = _dense_stack(sizes, acts, rng, "private", bias_last=spec.funnel != "linear")
        dropout = {i: spec.dropout for i in range(len(spec.hidden))}
        return PrivateSphere(layers, dropout, spec)
    if isinstance(spec, PublicSphereSpec):
        sizes = [spec.input_dim, *spec.hidden, spec.n_classes]
        acts = ["relu"] * len(spec.hidden) + ["linear"]
        dropout = {i: spec.dropout for i in range(len(spec.hidden))}
        return PublicSphere(_dense_stack(sizes, acts, rng, "public"), dropout, spec)
    if isinstance(spec, DiscriminatorSpec):
        sizes = [spec.input_dim, *spec.hidden, spec.output_dim]
        acts = ["relu"] * len(spec.hidden) + ["linear"]
        return Network(_dense_stack(sizes, acts, rng, "disc"), None, spec)
    raise ContractError(f"unsupported network spec {type(spec).__name__}")
