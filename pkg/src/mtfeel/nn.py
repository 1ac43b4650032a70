"""Small feed-forward classifier on a flat parameter vector.

Parameters are stored as one float64 vector so that federated updates
(signs, averages, projections) act on plain arrays.  Layer ``i`` occupies
``in_i * out_i`` weights (row-major, shape ``(in, out)``) followed by
``out_i`` biases.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

ACTIVATIONS = ("relu", "tanh")

Subset = Union[str, Sequence[int], np.ndarray]


def param_count(layer_dims) -> int:
    return int(sum((i + 1) * o for i, o in layer_dims))


def architecture(d_in: int, n_classes: int, hidden=(32,)) -> tuple:
    """Layer (in, out) pairs for an MLP with the given hidden widths."""
    sizes = [int(d_in), *map(int, hidden), int(n_classes)]
    return tuple(zip(sizes[:-1], sizes[1:]))


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    layer_dims: tuple
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple((int(i), int(o)) for i, o in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not dims:
            raise ValueError("at least one layer is required")
        for (_, o), (i, _) in zip(dims[:-1], dims[1:]):
            if o != i:
                raise ValueError(f"layer widths do not chain: {dims}")
        if values.ndim != 1 or values.size != param_count(dims):
            raise ValueError(
                f"expected {param_count(dims)} parameters, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.layer_dims[0][0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1][1]

    @property
    def size(self) -> int:
        return self.values.size

    def with_values(self, values) -> "ModelParams":
        return ModelParams(np.array(values, dtype=np.float64), self.layer_dims, self.activation)


def init_params(layer_dims, activation: str = "relu", seed=0) -> ModelParams:
    """Glorot-uniform weights in [-a, a], a = sqrt(6 / (in + out)); zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for i, o in layer_dims:
        a = np.sqrt(6.0 / (i + o))
        chunks.append(rng.uniform(-a, a, size=i * o))
        chunks.append(np.zeros(o))
    return ModelParams(np.concatenate(chunks), layer_dims, activation)


def gaussian_params(layer_dims, activation: str = "relu", seed=0, std: float = 1.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(std * rng.standard_normal(param_count(layer_dims)), layer_dims, activation)


@dataclass(frozen=True)
class LossSpec:
    """Softmax cross-entropy clipped at ``bound_M``."""

    kind: str = "cross_entropy"
    bound_M: float = 10.0

    def __post_init__(self):
        if self.kind != "cross_entropy":
            raise ValueError(f"unsupported loss {self.kind!r}")
        if not self.bound_M > 0:
            raise ValueError("bound_M must be positive")


@dataclass(frozen=True)
class DeviceShard:
    """One device's samples.  Rows ``[0, train_count)`` are the training split."""

    features: np.ndarray
    labels: np.ndarray
    train_count: int
    test_count: int
    n_classes: int = 10
    _train_idx: np.ndarray = field(init=False, repr=False, compare=False)
    _test_idx: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("features must be (n, d_in) and labels (n,)")
        n = y.shape[0]
        if n < 1 or self.train_count < 0 or self.test_count < 0:
            raise ValueError("a shard needs at least one sample")
        if self.train_count + self.test_count != n:
            raise ValueError(f"train_count + test_count != {n}")
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_train_idx", np.arange(self.train_count))
        object.__setattr__(self, "_test_idx", np.arange(self.train_count, n))

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def indices(self, subset: Subset = "train") -> np.ndarray:
        if isinstance(subset, str):
            if subset == "train":
                idx = self._train_idx
            elif subset == "test":
                idx = self._test_idx
            elif subset == "all":
                idx = np.arange(self.n)
            else:
                raise ValueError(f"unknown subset {subset!r}")
        else:
            idx = np.asarray(subset, dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= self.n):
                raise IndexError("subset index out of range")
        if idx.size == 0:
            raise ValueError("empty subset")
        return idx

    def batch(self, subset: Subset = "train"):
        idx = self.indices(subset)
        return self.features[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# core numerics


def unpack(values: np.ndarray, layer_dims):
    """Split a flat vector into ``[(W, b), ...]`` views."""
    layers, pos = [], 0
    for i, o in layer_dims:
        W = values[pos:pos + i * o].reshape(i, o)
        pos += i * o
        b = values[pos:pos + o]
        pos += o
        layers.append((W, b))
    return layers


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)


def _act_grad(z, a, activation):
    return (z > 0).astype(z.dtype) if activation == "relu" else 1.0 - a * a


def _logits(values, layer_dims, activation, X):
    layers = unpack(values, layer_dims)
    h = X
    for W, b in layers[:-1]:
        h = _act(h @ W + b, activation)
    W, b = layers[-1]
    return h @ W + b


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_inputs(params: ModelParams, X):
    if X.shape[-1] != params.d_in:
        raise ValueError(f"expected {params.d_in} input features, got {X.shape[-1]}")


def forward(params: ModelParams, x) -> np.ndarray:
    """Class probabilities for one feature vector (or a row-stacked batch)."""
    x = np.asarray(x, dtype=np.float64)
    _check_inputs(params, x)
    z = _logits(params.values, params.layer_dims, params.activation, np.atleast_2d(x))
    p = np.exp(_log_softmax(z))
    return p[0] if x.ndim == 1 else p


def predict(params: ModelParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_inputs(params, X)
    return np.argmax(_logits(params.values, params.layer_dims, params.activation, X), axis=1)


def sample_losses(params: ModelParams, X, y, loss: LossSpec = LossSpec()) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_inputs(params, X)
    z = _logits(params.values, params.layer_dims, params.activation, X)
    ce = -_log_softmax(z)[np.arange(len(y)), y]
    return np.minimum(ce, loss.bound_M)


def grouped_loss_grad(values, layer_dims, activation, X, y, bound_M):
    """Mean clipped loss and its gradient for ``G`` equally sized groups.

    ``X`` has shape (G, n, d_in) and ``y`` shape (G, n).  Returns losses of
    shape (G,) and gradients of shape (G, d).  Samples whose raw loss reaches
    ``bound_M`` contribute zero gradient.
    """
    G, n = y.shape
    layers = unpack(values, layer_dims)
    hs, zs = [X], []
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        h = _act(z, activation)
        zs.append(z)
        hs.append(h)
    W, b = layers[-1]
    logit = h @ W + b
    logp = _log_softmax(logit)
    gi = np.arange(G)[:, None]
    ni = np.arange(n)[None, :]
    ce = -logp[gi, ni, y]
    active = ce < bound_M
    losses = np.minimum(ce, bound_M).mean(axis=1)

    delta = np.exp(logp)
    delta[gi, ni, y] -= 1.0
    delta *= (active / n)[..., None]

    flat = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        flat.append(delta.sum(axis=1))
        flat.append((hs[li].transpose(0, 2, 1) @ delta).reshape(G, -1))
        if li:
            delta = (delta @ W.T) * _act_grad(zs[li - 1], hs[li], activation)
    return losses, np.concatenate(flat[::-1], axis=1)


def empirical_loss(params: ModelParams, shard: DeviceShard, subset: Subset = "train",
                   loss: LossSpec = LossSpec()) -> float:
    """Mean clipped cross-entropy of ``params`` over ``subset`` of ``shard``."""
    X, y = shard.batch(subset)
    return float(sample_losses(params, X, y, loss).mean())


def loss_gradient(params: ModelParams, shard: DeviceShard, subset: Subset = "train",
                  loss: LossSpec = LossSpec()) -> np.ndarray:
    X, y = shard.batch(subset)
    _check_inputs(params, X)
    _, g = grouped_loss_grad(params.values, params.layer_dims, params.activation,
                             X[None], y[None], loss.bound_M)
    return g[0]


def loss_and_gradient(params: ModelParams, shard: DeviceShard, subset: Subset = "train",
                      loss: LossSpec = LossSpec()):
    X, y = shard.batch(subset)
    _check_inputs(params, X)
    l, g = grouped_loss_grad(params.values, params.layer_dims, params.activation,
                             X[None], y[None], loss.bound_M)
    return float(l[0]), g[0]


def accuracy(params: ModelParams, shard: DeviceShard, subset: Subset = "test") -> float:
    """Fraction of samples whose argmax prediction (lowest index on ties) is correct."""
    X, y = shard.batch(subset)
    return float(np.mean(predict(params, X) == y))
