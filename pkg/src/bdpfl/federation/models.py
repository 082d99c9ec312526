"""Small learners with closed-form per-example gradients.

Weights are flat vectors. ``logistic`` is multinomial logistic regression
with a bias; ``mlp`` is one tanh hidden layer followed by a softmax layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bdpfl.mechanism import RngStream

MODEL_KINDS = ("logistic", "mlp")


@dataclass
class ModelState:
    weights: np.ndarray
    round: int = 0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


@dataclass(frozen=True)
class Model:
    kind: str
    dimension: int
    classes: int
    hidden: int = 16

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def n_params(self) -> int:
        if self.kind == "logistic":
            return self.classes * (self.dimension + 1)
        return self.hidden * (self.dimension + 1) + self.classes * (self.hidden + 1)

    def init(self, rng: RngStream) -> np.ndarray:
        if self.kind == "logistic":
            return np.zeros(self.n_params)
        w1 = rng.normal((self.hidden, self.dimension + 1)) / np.sqrt(self.dimension + 1)
        w2 = rng.normal((self.classes, self.hidden + 1)) / np.sqrt(self.hidden + 1)
        return np.concatenate([w1.ravel(), w2.ravel()])

    def _split(self, w):
        cut = self.hidden * (self.dimension + 1)
        return (w[:cut].reshape(self.hidden, self.dimension + 1),
                w[cut:].reshape(self.classes, self.hidden + 1))

    def _check(self, w, x):
        if w.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} weights, got {w.shape}")
        if x.ndim != 2 or x.shape[1] != self.dimension:
            raise ValueError(f"expected inputs of dimension {self.dimension}, got {x.shape}")

    def probabilities(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        w, x = np.asarray(w, dtype=float), np.asarray(x, dtype=float)
        self._check(w, x)
        xb = _with_bias(x)
        if self.kind == "logistic":
            return _softmax(xb @ w.reshape(self.classes, -1).T)
        w1, w2 = self._split(w)
        return _softmax(_with_bias(np.tanh(xb @ w1.T)) @ w2.T)

    def predict(self, w, x) -> np.ndarray:
        return np.argmax(self.probabilities(w, x), axis=1)

    def accuracy(self, w, data) -> float:
        if data.n == 0:
            return float("nan")
        return float(np.mean(self.predict(w, data.features) == data.labels))

    def losses(self, w, x, y) -> np.ndarray:
        """Per-example cross-entropy."""
        p = self.probabilities(w, x)
        return -np.log(p[np.arange(len(y)), y])

    def per_example_gradients(self, w, x, y) -> np.ndarray:
        """Gradient of each example's cross-entropy, shape ``(batch, n_params)``."""
        w, x = np.asarray(w, dtype=float), np.asarray(x, dtype=float)
        y = np.asarray(y)
        self._check(w, x)
        if len(x) == 0:
            raise ValueError("empty batch")
        if len(y) != len(x):
            raise ValueError("labels and inputs differ in length")
        xb = _with_bias(x)
        onehot = np.eye(self.classes)[y]
        if self.kind == "logistic":
            dz = _softmax(xb @ w.reshape(self.classes, -1).T) - onehot
            return (dz[:, :, None] * xb[:, None, :]).reshape(len(x), -1)
        w1, w2 = self._split(w)
        h = np.tanh(xb @ w1.T)
        hb = _with_bias(h)
        dz = _softmax(hb @ w2.T) - onehot
        g2 = dz[:, :, None] * hb[:, None, :]
        da = (dz @ w2[:, :self.hidden]) * (1.0 - h * h)
        g1 = da[:, :, None] * xb[:, None, :]
        return np.hstack([g1.reshape(len(x), -1), g2.reshape(len(x), -1)])


def model_gradient(model: Model, state: ModelState, features, labels) -> np.ndarray:
    return model.per_example_gradients(state.weights, features, labels)
