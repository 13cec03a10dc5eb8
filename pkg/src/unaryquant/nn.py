"""A small dense classifier with a flat-parameter view.

The federation protocol works on flat vectors of bounded parameters, so the
model here is a plain MLP whose weights and biases live in one contiguous
float64 vector with an explicit layout (shape, offset) table. Forward,
backward, and SGD are hand-rolled numpy; the gradient is the exact gradient
of the mean cross-entropy, which the tests check against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class LayoutEntry:
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ModelLayout:
    """Maps flat vector ranges to weight matrices and bias vectors."""

    layer_sizes: tuple[int, ...]
    activation: str
    entries: tuple[LayoutEntry, ...]
    size: int

    @classmethod
    def for_config(cls, config: ModelConfig) -> "ModelLayout":
        entries = []
        offset = 0
        for fan_in, fan_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
            entries.append(LayoutEntry(shape=(fan_in, fan_out), offset=offset))
            offset += fan_in * fan_out
            entries.append(LayoutEntry(shape=(fan_out,), offset=offset))
            offset += fan_out
        return cls(
            layer_sizes=tuple(config.layer_sizes),
            activation=config.activation,
            entries=tuple(entries),
            size=offset,
        )

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class ParamVector:
    """Flat model parameters plus the layout that interprets them."""

    values: np.ndarray
    layout: ModelLayout

    def __post_init__(self) -> None:
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"values shape {self.values.shape} does not match layout size {self.layout.size}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(values=self.values.copy(), layout=self.layout)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Zero-copy (weights, bias) views per layer."""
        out = []
        for i in range(0, len(self.layout.entries), 2):
            w_entry, b_entry = self.layout.entries[i], self.layout.entries[i + 1]
            w = self.values[w_entry.offset : w_entry.offset + w_entry.size].reshape(w_entry.shape)
            b = self.values[b_entry.offset : b_entry.offset + b_entry.size]
            out.append((w, b))
        return out


# Gradients share the flat-vector-plus-layout representation.
Gradient = ParamVector


def init_params(config: ModelConfig) -> ParamVector:
    """Uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    layout = ModelLayout.for_config(config)
    rng = np.random.default_rng(config.seed)
    values = np.zeros(layout.size)
    params = ParamVector(values=values, layout=layout)
    for w, _ in params.layers():
        s = 1.0 / np.sqrt(w.shape[0])
        w[:] = rng.uniform(-s, s, size=w.shape)
    return params


def _as_xy(batch) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(batch, "features"):
        return np.asarray(batch.features, dtype=np.float64), np.asarray(batch.labels)
    features, labels = batch
    return np.asarray(features, dtype=np.float64), np.asarray(labels)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward_pass(params: ParamVector, features: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns logits and the post-activation output of every hidden layer."""
    layers = params.layers()
    hidden: list[np.ndarray] = []
    a = features
    for w, b in layers[:-1]:
        a = _activate(a @ w + b, params.layout.activation)
        hidden.append(a)
    w, b = layers[-1]
    return a @ w + b, hidden


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(params: ParamVector, batch) -> tuple[np.ndarray, float]:
    """Logits and mean cross-entropy of the batch."""
    features, labels = _as_xy(batch)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, features) matrix")
    if features.shape[1] != params.layout.layer_sizes[0]:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match input layer "
            f"{params.layout.layer_sizes[0]}"
        )
    logits, _ = _forward_pass(params, features)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    return logits, loss


def backward(params: ParamVector, batch) -> Gradient:
    """Exact gradient of the batch-mean cross-entropy, same layout as params."""
    features, labels = _as_xy(batch)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, features) matrix")
    if features.shape[1] != params.layout.layer_sizes[0]:
        raise ValueError(
            f"feature dimension {features.shape[1]} does not match input layer "
            f"{params.layout.layer_sizes[0]}"
        )
    logits, hidden = _forward_pass(params, features)
    n = features.shape[0]
    probs = np.exp(_log_softmax(logits))
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    layers = params.layers()
    grad = ParamVector(values=np.zeros(params.layout.size), layout=params.layout)
    grad_layers = grad.layers()
    inputs = [features] + hidden
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw, gb = grad_layers[li]
        gw[:] = inputs[li].T @ delta
        gb[:] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ w.T
            a = hidden[li - 1]
            if params.layout.activation == "relu":
                delta = delta * (a > 0)
            else:
                delta = delta * (1.0 - a * a)
    return grad


def clip(params: ParamVector) -> ParamVector:
    """Elementwise clamp to [-1, 1]; idempotent."""
    return ParamVector(values=np.clip(params.values, -1.0, 1.0), layout=params.layout)


def local_train(
    global_params: ParamVector,
    data,
    lr: float,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Mini-batch SGD from the broadcast model, clipped to [-1, 1] at the end.

    lr == 0 degenerates to clipping the input, which is occasionally useful
    in tests.
    """
    features, labels = _as_xy(data)
    if features.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if lr < 0:
        raise ValueError(f"learning rate {lr!r} must be >= 0")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    local = global_params.copy()
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            grad = backward(local, (features[idx], labels[idx]))
            local.values -= lr * grad.values
    return clip(local)


def evaluate(params: ParamVector, test) -> tuple[float, float]:
    """Accuracy (argmax-correct fraction) and mean cross-entropy on a set."""
    features, labels = _as_xy(test)
    logits, loss = forward(params, (features, labels))
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return accuracy, loss


def per_example_loss(params: ParamVector, batch) -> np.ndarray:
    """Cross-entropy of each example separately (no batch averaging)."""
    features, labels = _as_xy(batch)
    logits, _ = _forward_pass(params, features)
    log_probs = _log_softmax(logits)
    return -log_probs[np.arange(len(labels)), labels]
