"""Dense feed-forward client bodies, cross-entropy against a fixed head, optimizers.

Bodies map raw inputs to ``m`` features; the last feature is a constant 1
appended after the final layer (and after any clamping), so it acts as the
bias input of the linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedlog import _backend

ACTIVATIONS = {"identity": 0, "relu": 1, "clamp": 2}


class ConfigurationError(ValueError):
    """Raised when shapes or hyperparameters are inconsistent."""


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "relu"
    bound: float | None = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ConfigurationError(
                f"layer weights {self.weights.shape} and biases {self.biases.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.activation == "clamp" and not (self.bound is not None and self.bound > 0):
            raise ConfigurationError("clamp activation needs a bound b > 0")

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


@dataclass
class BodyNetwork:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("a body needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self._refresh()

    def _refresh(self):
        self._acts = np.array([ACTIVATIONS[l.activation] for l in self.layers], dtype=np.intp)
        self._bounds = np.array([l.bound or 0.0 for l in self.layers], dtype=np.float64)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def feature_dim(self):
        """m, counting the appended constant feature."""
        return self.layers[-1].out_dim + 1

    def parameters(self):
        """Weights and biases in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def copy(self):
        return BodyNetwork(
            [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation, l.bound) for l in self.layers]
        )

    @property
    def n_params(self):
        return sum(p.size for p in self.parameters())


def init_body(in_dim, hidden, feature_dim, rng, clip_bound=None):
    """Build a body with relu hidden layers of widths ``hidden``.

    The final layer emits ``feature_dim - 1`` values (identity, or clamp at
    ``clip_bound`` when given). Weights and biases are drawn uniformly from
    [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    if feature_dim < 2:
        raise ConfigurationError("feature_dim must be >= 2 (one slot is the constant)")
    dims = [in_dim, *hidden, feature_dim - 1]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = rng.uniform(-limit, limit, size=fan_out)
        last = i == len(dims) - 2
        if not last:
            layers.append(DenseLayer(w, b, "relu"))
        elif clip_bound is not None:
            layers.append(DenseLayer(w, b, "clamp", clip_bound))
        else:
            layers.append(DenseLayer(w, b, "identity"))
    return BodyNetwork(layers)


def init_head(n_class, feature_dim, rng):
    limit = 1.0 / np.sqrt(feature_dim)
    return rng.uniform(-limit, limit, size=(n_class, feature_dim))


def clamp_activation(x, b):
    return np.clip(x, -b, b)


def _as_inputs(body, inputs):
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != body.in_dim:
        raise ConfigurationError(f"input dim {x.shape[1]} != body in_dim {body.in_dim}")
    return x


def _as_labels(labels, n_class):
    y = np.ascontiguousarray(labels, dtype=np.intp)
    if y.size and (y.min() < 0 or y.max() >= n_class):
        raise ValueError(f"labels must lie in [0, {n_class}); got range [{y.min()}, {y.max()}]")
    return y


def _check_head(head, m):
    head = np.ascontiguousarray(head, dtype=np.float64)
    if head.ndim != 2 or head.shape[1] != m:
        raise ConfigurationError(f"head shape {head.shape} does not take {m} features")
    return head


def forward(body, inputs):
    """Features (n, m) with the trailing constant 1.0."""
    x = _as_inputs(body, inputs)
    ws = [l.weights for l in body.layers]
    bs = [l.biases for l in body.layers]
    return _backend.kernels.body_features(ws, bs, body._acts, body._bounds, x)


def logits_from_features(features, head):
    return np.asarray(features) @ np.asarray(head).T


def cross_entropy_loss(features, labels, head):
    """Summed softmax cross entropy of ``features @ head.T`` (log-sum-exp shifted)."""
    features = np.asarray(features, dtype=np.float64)
    head = _check_head(head, features.shape[1])
    y = _as_labels(labels, head.shape[0])
    if y.size == 0:
        return 0.0
    logits = features @ head.T
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    return float(np.sum(lse - logits[np.arange(y.size), y]))


def loss_and_gradients(body, inputs, labels, head, head_grad=False):
    """Loss plus gradients for every body parameter (and optionally the head).

    Returns ``(loss, grads, head_grad)`` with ``grads`` aligned to
    :meth:`BodyNetwork.parameters`.
    """
    x = _as_inputs(body, inputs)
    head = _check_head(head, body.feature_dim)
    y = _as_labels(labels, head.shape[0])
    if y.size != x.shape[0]:
        raise ConfigurationError(f"{x.shape[0]} inputs but {y.size} labels")
    ws = [l.weights for l in body.layers]
    bs = [l.biases for l in body.layers]
    loss, gws, gbs, ghead = _backend.kernels.loss_and_grads(
        ws, bs, body._acts, body._bounds, x, y, head, head_grad
    )
    grads = []
    for gw, gb in zip(gws, gbs):
        grads.extend((gw, gb))
    return loss, grads, ghead


def body_gradient(body, inputs, labels, head):
    """Reverse-mode gradients of the loss w.r.t. the body, head held fixed."""
    return loss_and_gradients(body, inputs, labels, head)[1]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 10
    local_epochs: int = 5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.local_epochs < 0:
            raise ConfigurationError("learning_rate and batch_size must be > 0, local_epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    step: int = 0
    first: list = field(default_factory=list)
    second: list = field(default_factory=list)


def optimizer_step(params, grads, state, config):
    """Update ``params`` in place; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ConfigurationError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigurationError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    k = _backend.kernels
    if config.optimizer == "sgd":
        for p, g in zip(params, grads):
            k.sgd_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1), config.learning_rate)
        state.step += 1
        return params, state
    if not state.first:
        state.first = [np.zeros(p.size) for p in params]
        state.second = [np.zeros(p.size) for p in params]
    state.step += 1
    for p, g, m1, m2 in zip(params, grads, state.first, state.second):
        k.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            m1,
            m2,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.eps,
            state.step,
        )
    return params, state
