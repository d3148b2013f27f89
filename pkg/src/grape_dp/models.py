"""Small differentiable models with per-sample, per-layer gradients.

Layers compute ``z = W h + b`` with ``W`` of shape (out, in); hidden layers
apply the chosen activation, the last layer emits raw outputs and the loss
applies its own link (softmax for cross-entropy). Per-sample gradients are
produced layer by layer during the backward pass so callers can consume one
layer's block at a time instead of materializing all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .tensor import RngStream

ACTIVATIONS = ("identity", "relu", "tanh")
LOSSES = ("squared-error", "cross-entropy")

# visitor(layer_index, weight_grads (B, m, n), bias_grads (B, m) or None),
# called for layers L-1 .. 0 in backward order.
GradVisitor = Callable[[int, np.ndarray, np.ndarray | None], None]


@dataclass(frozen=True)
class ModelSpec:
    """Layer dimensions (out, in) per layer plus activation and loss choice."""

    layer_dims: tuple[tuple[int, int], ...]
    activation: str = "tanh"
    loss: str = "cross-entropy"
    include_bias: bool = True

    def __post_init__(self):
        if len(self.layer_dims) < 1:
            raise InvalidArgumentError("a model needs at least one layer")
        for m, n in self.layer_dims:
            if m < 1 or n < 1:
                raise InvalidArgumentError(f"bad layer shape {m}x{n}")
        for (m_prev, _), (_, n_next) in zip(self.layer_dims, self.layer_dims[1:]):
            if m_prev != n_next:
                raise InvalidArgumentError(
                    f"adjacent layers do not compose: {self.layer_dims}"
                )
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"unknown loss {self.loss!r}")

    @classmethod
    def mlp(cls, sizes: list[int], **kwargs) -> "ModelSpec":
        """Build from a size chain [in, h1, ..., out]."""
        if len(sizes) < 2:
            raise InvalidArgumentError("need at least input and output sizes")
        dims = tuple((sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1))
        return cls(layer_dims=dims, **kwargs)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[0][1]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1][0]

    @property
    def weight_count(self) -> int:
        return sum(m * n for m, n in self.layer_dims)


@dataclass
class Params:
    """One weight matrix per layer, optional bias vectors."""

    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.weights) != self.spec.num_layers:
            raise InvalidArgumentError("weight count does not match spec")
        for w, (m, n) in zip(self.weights, self.spec.layer_dims):
            if w.shape != (m, n):
                raise InvalidArgumentError(f"weight shape {w.shape} != ({m}, {n})")
        if self.spec.include_bias and self.biases is None:
            raise InvalidArgumentError("spec includes bias but none given")

    def copy(self) -> "Params":
        return Params(
            self.spec,
            [w.copy() for w in self.weights],
            None if self.biases is None else [b.copy() for b in self.biases],
        )


@dataclass
class PerSampleGrads:
    """Per-layer stacks of per-sample gradient matrices, shape (B, m, n)."""

    layers: list[np.ndarray]
    biases: list[np.ndarray] | None = None

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]


@dataclass
class Dataset:
    """Feature matrix plus labels; batches are just smaller Datasets."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise InvalidArgumentError("inputs must be a 2-D matrix")
        if len(self.y) != len(self.x):
            raise InvalidArgumentError("inputs and labels disagree on sample count")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.x[i], self.y[i]) for i in range(len(self))]

    @staticmethod
    def from_samples(samples) -> "Dataset":
        xs = np.stack([s[0] for s in samples])
        ys = np.stack([np.asarray(s[1]) for s in samples])
        return Dataset(xs, ys)


def init_params(spec: ModelSpec, stream: RngStream) -> Params:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    weights, pos = [], 0
    for m, n in spec.layer_dims:
        w = stream.advance(pos).normals(m * n).reshape(m, n) / np.sqrt(n)
        weights.append(w)
        pos += m * n
    biases = [np.zeros(m) for m, _ in spec.layer_dims] if spec.include_bias else None
    return Params(spec, weights, biases)


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0.0).astype(np.float64)
    if spec.activation == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _forward(params: Params, x: np.ndarray):
    """Returns (pre-activations per layer, inputs-to-each-layer per layer)."""
    spec = params.spec
    zs, hs = [], [x]
    h = x
    for idx, w in enumerate(params.weights):
        z = h @ w.T
        if params.biases is not None:
            z = z + params.biases[idx]
        zs.append(z)
        if idx < spec.num_layers - 1:
            h = _activate(spec, z)
            hs.append(h)
    return zs, hs


def _check_batch(params: Params, batch: Dataset) -> None:
    spec = params.spec
    if batch.x.shape[1] != spec.feature_dim:
        raise InvalidArgumentError(
            f"batch features {batch.x.shape[1]} != model input {spec.feature_dim}"
        )
    if spec.loss == "cross-entropy":
        if batch.y.ndim != 1:
            raise InvalidArgumentError("cross-entropy expects integer class labels")
    else:
        y = np.asarray(batch.y)
        width = 1 if y.ndim == 1 else y.shape[1]
        if width != spec.output_dim:
            raise InvalidArgumentError(
                f"target width {width} != model output {spec.output_dim}"
            )


def _per_sample_losses(params: Params, batch: Dataset, logits: np.ndarray) -> np.ndarray:
    spec = params.spec
    if spec.loss == "squared-error":
        y = np.asarray(batch.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        diff = logits - y
        return 0.5 * np.sum(diff * diff, axis=1)
    # cross-entropy over softmax of the logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(len(batch)), batch.y.astype(int)]
    return logz - picked


def _output_delta(params: Params, batch: Dataset, logits: np.ndarray) -> np.ndarray:
    spec = params.spec
    if spec.loss == "squared-error":
        y = np.asarray(batch.y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        return logits - y
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    delta = probs.copy()
    delta[np.arange(len(batch)), batch.y.astype(int)] -= 1.0
    return delta


def loss_and_predictions(params: Params, batch: Dataset):
    """Mean loss over the batch plus per-sample predictions.

    Predictions are argmax classes for cross-entropy, raw outputs otherwise.
    """
    _check_batch(params, batch)
    zs, _ = _forward(params, batch.x)
    logits = zs[-1]
    losses = _per_sample_losses(params, batch, logits)
    mean_loss = float(np.mean(losses))
    if params.spec.loss == "cross-entropy":
        preds = np.argmax(logits, axis=1)
    else:
        preds = logits
    return mean_loss, preds


def per_sample_grads(
    params: Params, batch: Dataset, visitor: GradVisitor | None = None
) -> PerSampleGrads | None:
    """Per-sample, per-layer gradients of the per-sample loss.

    With a visitor, layers are delivered in backward order (L-1 .. 0) and at
    most one layer's full per-sample block exists at a time; the return value
    is then None. Without a visitor all blocks are collected and returned.
    """
    _check_batch(params, batch)
    spec = params.spec
    zs, hs = _forward(params, batch.x)
    losses = _per_sample_losses(params, batch, zs[-1])
    if not np.all(np.isfinite(losses)):
        raise NumericFailureError("non-finite loss; gradients are unusable")

    collected_w: list[np.ndarray | None] = [None] * spec.num_layers
    collected_b: list[np.ndarray | None] = [None] * spec.num_layers
    delta = _output_delta(params, batch, zs[-1])
    for idx in range(spec.num_layers - 1, -1, -1):
        block = np.einsum("bm,bn->bmn", delta, hs[idx])
        bias_block = delta.copy() if params.biases is not None else None
        if visitor is not None:
            visitor(idx, block, bias_block)
        else:
            collected_w[idx] = block
            collected_b[idx] = bias_block
        del block
        if idx > 0:
            delta = (delta @ params.weights[idx]) * _activate_grad(spec, zs[idx - 1])

    if visitor is not None:
        return None
    biases = collected_b if params.biases is not None else None
    return PerSampleGrads(layers=collected_w, biases=biases)  # type: ignore[arg-type]


def batch_grads(params: Params, batch: Dataset):
    """Gradient of the mean batch loss, as (weight grads, bias grads or None).

    Averages per-sample blocks in ascending sample order so the result is the
    same bit pattern as averaging a materialized PerSampleGrads.
    """
    spec = params.spec
    w_grads: list[np.ndarray | None] = [None] * spec.num_layers
    b_grads: list[np.ndarray | None] = [None] * spec.num_layers
    inv_b = 1.0 / len(batch)

    def accumulate(idx, block, bias_block):
        w_grads[idx] = np.sum(block, axis=0) * inv_b
        if bias_block is not None:
            b_grads[idx] = np.sum(bias_block, axis=0) * inv_b

    per_sample_grads(params, batch, visitor=accumulate)
    return w_grads, (b_grads if params.biases is not None else None)


def finite_diff_grad(params: Params, x: np.ndarray, y, h: float):
    """Central-difference gradient of the single-sample loss.

    Returns (weight grads, bias grads or None); O(h^2) accurate, exact for
    losses quadratic in the weights.
    """
    if not h > 0:
        raise InvalidArgumentError("step size h must be positive")
    sample = Dataset(np.asarray(x)[None, :], np.asarray([y]))

    def loss_at(p: Params) -> float:
        return loss_and_predictions(p, sample)[0]

    work = params.copy()
    w_grads = []
    for w in work.weights:
        g = np.zeros_like(w)
        for (a, b), _ in np.ndenumerate(w):
            keep = w[a, b]
            w[a, b] = keep + h
            up = loss_at(work)
            w[a, b] = keep - h
            down = loss_at(work)
            w[a, b] = keep
            g[a, b] = (up - down) / (2.0 * h)
        w_grads.append(g)
    if work.biases is None:
        return w_grads, None
    b_grads = []
    for bias in work.biases:
        g = np.zeros_like(bias)
        for a in range(bias.size):
            keep = bias[a]
            bias[a] = keep + h
            up = loss_at(work)
            bias[a] = keep - h
            down = loss_at(work)
            bias[a] = keep
            g[a] = (up - down) / (2.0 * h)
        b_grads.append(g)
    return w_grads, b_grads
