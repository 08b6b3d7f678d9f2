"""Desk-scale models, analytic objectives and synthetic datasets."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Batch, DifferentiableObjective


class SpecError(ValueError):
    """Invalid construction arguments."""


class UnsupportedActivation(SpecError):
    pass


class Activation(enum.Enum):
    RELU = "relu"
    TANH = "tanh"


class LossKind(enum.Enum):
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    MSE = "mse"


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU
    loss: LossKind = LossKind.SOFTMAX_CROSS_ENTROPY
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "loss", LossKind(self.loss))
        if len(self.layer_sizes) < 2:
            raise SpecError("an MLP needs at least an input and an output layer")
        if any(s < 1 for s in self.layer_sizes):
            raise SpecError(f"layer sizes must be >= 1, got {self.layer_sizes}")


class MLPObjective(DifferentiableObjective):
    """Fully connected network ``x @ W + b`` with a mean loss over the batch.

    Parameters are ordered ``W0, b0, W1, b1, ...`` with ``W`` of shape
    ``(fan_in, fan_out)``.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        sizes = spec.layer_sizes
        self._shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._shapes += [(fan_in, fan_out), (fan_out,)]
        self.param_count = sum(int(np.prod(s)) for s in self._shapes)
        self.deterministic = True

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_sizes) - 1

    def shapes(self):
        return list(self._shapes)

    def init_params(self) -> np.ndarray:
        # Glorot-uniform on every array of a layer, biases included, so that
        # no parameter starts at exactly zero.
        rng = np.random.default_rng(self.spec.init_seed)
        arrays = []
        for fan_in, fan_out in zip(self.spec.layer_sizes[:-1], self.spec.layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            arrays.append(rng.uniform(-bound, bound, size=(fan_out,)))
        return dc.flatten(arrays)

    def _act(self, z):
        return dc.relu(z) if self.spec.activation is Activation.RELU else dc.tanh(z)

    def forward(self, w, x):
        params = dc.unflatten(w, self._shapes)
        h = np.asarray(x, dtype=np.float64)
        for layer in range(self.n_layers):
            W, b = params[2 * layer], params[2 * layer + 1]
            h = dc.add(dc.matmul(h, W), b)
            if layer < self.n_layers - 1:
                h = self._act(h)
        return h

    def predict(self, w, x) -> np.ndarray:
        """Network outputs (logits) as a plain array."""
        return np.asarray(dc._val(self.forward(np.asarray(w, dtype=np.float64), x)))

    def loss(self, w, batch: Batch):
        out = self.forward(w, batch.features)
        k = self.spec.layer_sizes[-1]
        onehot = np.eye(k)[np.asarray(batch.labels, dtype=int)]
        if self.spec.loss is LossKind.SOFTMAX_CROSS_ENTROPY:
            lse = dc.reshape(dc.logsumexp(out, axis=1), (len(batch),))
            picked = dc.sum_(dc.mul(out, onehot), axis=1)
            return dc.mean(dc.add(lse, dc.neg(picked)))
        diff = dc.add(out, -onehot)
        return dc.mul(dc.sum_(dc.mul(diff, diff)), 1.0 / len(batch))

    def fused_value_and_grad(self, w: np.ndarray, batch: Batch):
        """Loss and gradient by explicit backpropagation on plain arrays.

        Mirrors :meth:`loss` operation for operation (including the ReLU
        mask convention ``z > 0``); it exists only because the tape's
        per-node overhead dominates on networks this small.
        """
        params = dc.unflatten(w, self._shapes)
        x = np.asarray(batch.features, dtype=np.float64)
        labels = np.asarray(batch.labels, dtype=int)
        n, last = len(labels), self.n_layers - 1
        relu = self.spec.activation is Activation.RELU
        acts, derivs = [x], []
        h = x
        for layer in range(self.n_layers):
            h = h @ params[2 * layer] + params[2 * layer + 1]
            if layer < last:
                if relu:
                    mask = (h > 0).astype(np.float64)
                    h = h * mask
                    derivs.append(mask)
                else:
                    h = np.tanh(h)
                    derivs.append(1.0 - h * h)
                acts.append(h)
        onehot = np.eye(self.spec.layer_sizes[-1])[labels]
        if self.spec.loss is LossKind.SOFTMAX_CROSS_ENTROPY:
            m = np.max(h, axis=1, keepdims=True)
            lse = m + np.log(np.sum(np.exp(h - m), axis=1, keepdims=True))
            loss = np.mean(lse[:, 0] - np.sum(h * onehot, axis=1))
            delta = (np.exp(h - lse) - onehot) / n
        else:
            diff = h - onehot
            loss = np.sum(diff * diff) * (1.0 / n)
            delta = 2.0 * diff / n
        grads = [None] * len(params)
        for layer in range(last, -1, -1):
            grads[2 * layer] = acts[layer].T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ params[2 * layer].T) * derivs[layer - 1]
        return float(loss), dc.flatten(grads)

    def accuracy(self, w, x, labels) -> float:
        pred = np.argmax(self.predict(w, x), axis=1)
        return float(np.mean(pred == np.asarray(labels)))


class QuadraticObjective(DifferentiableObjective):
    """``L(w) = 1/2 sum_i lam_i w_i^2``. Every example contributes the same
    loss, so the batch only fixes the (irrelevant) mean."""

    def __init__(self, eigenvalues: Sequence[float]):
        self.eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        self.param_count = self.eigenvalues.size
        self.deterministic = True

    def loss(self, w, batch=None):
        return dc.mul(0.5, dc.sum_(dc.mul(self.eigenvalues, dc.mul(w, w))))


UNIT_BATCH = Batch(np.zeros((1, 1)), np.zeros(1, dtype=int), index=0)


def make_mlp(spec: ModelSpec) -> MLPObjective:
    return MLPObjective(spec)


def make_quadratic(eigenvalues: Sequence[float]) -> QuadraticObjective:
    eig = np.asarray(list(eigenvalues), dtype=np.float64)
    if eig.size == 0:
        raise SpecError("need at least one eigenvalue")
    if not np.all(np.isfinite(eig)):
        raise SpecError("eigenvalues must be finite")
    return QuadraticObjective(eig)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    name: str = ""
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.labels)

    def subset(self, indices, index=None) -> Batch:
        indices = np.asarray(indices, dtype=int)
        return Batch(self.features[indices], self.labels[indices], index=index)

    def train(self) -> Batch:
        return self.subset(self.train_indices)

    def test(self) -> Batch:
        return self.subset(self.test_indices)


def _split(n: int, rng: np.random.Generator, train_fraction: float = 0.8):
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _check_n(n, noise):
    if n < 10:
        raise SpecError(f"need n >= 10 examples, got {n}")
    if noise < 0:
        raise SpecError("noise must be non-negative")


def _shuffle_together(x, y, rng):
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def two_moons(n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset:
    _check_n(n, noise)
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    x, y = _shuffle_together(x, y, rng)
    tr, te = _split(n, rng)
    return Dataset(x, y, tr, te, "two_moons", {"n": n, "noise": noise, "seed": seed})


def gaussian_blobs(
    n: int = 200, noise: float = 1.0, seed: int = 0, separation: float = 3.0
) -> Dataset:
    """Two isotropic Gaussian clusters centred at ``(+-separation/2, 0)``."""
    _check_n(n, noise)
    rng = np.random.default_rng(seed)
    n0 = n // 2
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n - n0, dtype=int)])
    x = centers[y] + noise * rng.standard_normal((n, 2))
    x, y = _shuffle_together(x, y, rng)
    tr, te = _split(n, rng)
    return Dataset(x, y, tr, te, "gaussian_blobs", {"n": n, "noise": noise, "seed": seed})


def concentric_rings(
    n: int = 200, noise: float = 0.05, seed: int = 0, factor: float = 0.5
) -> Dataset:
    """Inner ring of radius ``factor`` (label 1) inside a unit ring (label 0)."""
    _check_n(n, noise)
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, 2 * np.pi, n0, endpoint=False)
    t1 = np.linspace(0.0, 2 * np.pi, n1, endpoint=False)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = factor * np.stack([np.cos(t1), np.sin(t1)], axis=1)
    x = np.concatenate([outer, inner]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    x, y = _shuffle_together(x, y, rng)
    tr, te = _split(n, rng)
    return Dataset(x, y, tr, te, "concentric_rings", {"n": n, "noise": noise, "seed": seed})


def load_csv(path, seed: int = 0) -> Dataset:
    """Read a CSV with a header row; the last column is an integer label."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise SpecError(f"{path}: no data rows")
    body = [r for r in rows[1:] if r]
    try:
        x = np.array([[float(v) for v in r[:-1]] for r in body])
        y = np.array([int(r[-1]) for r in body])
    except ValueError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    _check_n(len(y), 0.0)
    tr, te = _split(len(y), np.random.default_rng(seed))
    return Dataset(x, y, tr, te, "csv", {"path": str(path), "seed": seed})


GENERATORS = {
    "two_moons": two_moons,
    "gaussian_blobs": gaussian_blobs,
    "concentric_rings": concentric_rings,
}


def make_dataset(name: str, **params) -> Dataset:
    if name == "csv":
        return load_csv(**params)
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise SpecError(f"unknown dataset generator {name!r}") from None
    return gen(**params)


# ---------------------------------------------------------------------------
# Loss-preserving rescaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RescaleOperator:
    layer_index: int
    factor: float

    def __post_init__(self):
        if not self.factor > 0:
            raise SpecError("rescale factor must be positive")


def rescale_vector(model: MLPObjective, op: RescaleOperator) -> np.ndarray:
    """Diagonal of the scaling operator as a flat vector."""
    if model.spec.activation is not Activation.RELU:
        raise UnsupportedActivation("rescaling preserves outputs only for ReLU networks")
    if not 0 <= op.layer_index < model.n_layers - 1:
        raise SpecError(
            f"layer_index must be in [0, {model.n_layers - 1}), got {op.layer_index}"
        )
    parts = [np.ones(s) for s in model.shapes()]
    ell = op.layer_index
    parts[2 * ell] *= op.factor
    parts[2 * ell + 1] *= op.factor
    parts[2 * (ell + 1)] /= op.factor
    return dc.flatten(parts)


def rescale(model: MLPObjective, w, op: RescaleOperator) -> np.ndarray:
    """Scale layer ``l`` (weights and bias) by ``a`` and layer ``l+1`` weights by ``1/a``.

    Positive homogeneity of ReLU makes this function-preserving.
    """
    return np.asarray(w, dtype=np.float64) * rescale_vector(model, op)
