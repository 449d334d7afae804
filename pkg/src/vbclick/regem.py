"""Regression-based EM: vision bias predicted from document features by an MLP.

The E-step and the alpha/gamma updates are the standard ones. After each
M-step a 64-16-8-2 sigmoid/softmax classifier is trained on the documents'
features against labels derived from their M-step sigma values, and its
positive-class probability becomes the new sigma for every document in the
feature table, including documents with no training impressions.

Two label rules are available. ``"soft"`` (the default) uses sigma itself as
the positive-class target, which is the expected cross-entropy under one
Bernoulli(sigma) label per document. ``"threshold"`` binarises sigma around
its mean; the network then learns P(sigma >= mean | x), which ranks documents
correctly but flattens the magnitudes of sigma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .clicklog import FEATURE_DIM, ClickLogError, Dataset, FeatureTable
from .em import CompiledData, EmConfig, EmTrace, compile_dataset, em_loop
from .models import ModelKind, ParamStore, ParamTable

logger = logging.getLogger(__name__)

LAYER_SIZES = (FEATURE_DIM, 16, 8, 2)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Mlp:
    """Fully connected classifier; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: inconsistent shapes {w.shape} / {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} does not match previous layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")

    @classmethod
    def init(cls, seed: int | np.random.Generator = 0, sizes: Sequence[int] = LAYER_SIZES) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int] = LAYER_SIZES) -> "Mlp":
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, X: np.ndarray):
        """Batch forward pass; returns (class probabilities, activations)."""
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _softmax(z) if i == last else _sigmoid(z)
            acts.append(h)
        return h, acts

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Positive-class probability for each row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.sizes[0]:
            raise ValueError(f"expected {self.sizes[0]} features, got {X.shape[1]}")
        return self.forward(X)[0][:, 1]

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        """Mean cross-entropy and its gradients, ordered like :meth:`parameters`.

        ``y`` holds positive-class targets in [0, 1]; hard labels are the
        special case y in {0, 1}.
        """
        probs, acts = self.forward(X)
        n = X.shape[0]
        target = np.stack([1.0 - y, y], axis=1)
        loss = -np.sum(target * np.log(np.clip(probs, 1e-300, None))) / n
        delta = (probs - target) / n  # softmax + cross-entropy
        n_layers = len(self.weights)
        gw: list = [None] * n_layers
        gb: list = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            h_in = acts[i]
            gw[i] = h_in.T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * h_in * (1.0 - h_in)
        return loss, [g for pair in zip(gw, gb) for g in pair]

    def to_dict(self) -> dict:
        return {
            "activation": "sigmoid",
            "output": "softmax",
            "layers": [{"shape": list(w.shape), "weight": w.tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        weights, biases = [], []
        for layer in doc["layers"]:
            w = np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"])
            weights.append(w)
            biases.append(np.array(layer["bias"], dtype=np.float64))
        return cls(weights, biases)


def mlp_forward(m: Mlp, x: np.ndarray):
    """Single-vector forward pass: (positive-class probability, activations)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.sizes[0],):
        raise ValueError(f"expected a {m.sizes[0]}-vector, got shape {x.shape}")
    probs, acts = m.forward(x[None, :])
    return float(probs[0, 1]), acts


@dataclass
class MlpTrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class LabeledSample:
    doc: str
    features: np.ndarray
    label: int


def mlp_train(m: Mlp, X: np.ndarray, y: np.ndarray, cfg: MlpTrainConfig,
              rng: np.random.Generator | None = None) -> Mlp:
    """Mini-batch gradient descent on cross-entropy; returns a new network."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("no training samples")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    m = m.copy()
    params = m.parameters()
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = m.loss_and_grads(X[idx], y[idx])
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
    return m


def mlp_train_samples(m: Mlp, data: Sequence[LabeledSample], cfg: MlpTrainConfig) -> Mlp:
    if not data:
        raise ValueError("no training samples")
    X = np.stack([s.features for s in data])
    y = np.array([s.label for s in data], dtype=np.float64)
    return mlp_train(m, X, y, cfg)


def threshold_labels(values: np.ndarray) -> np.ndarray:
    """1 where a value reaches the mean of all values, else 0."""
    values = np.asarray(values, dtype=np.float64)
    return (values >= values.mean()).astype(np.int64)


def make_regression_targets(sigma_mstep: dict[str, float], features: FeatureTable) -> list[LabeledSample]:
    docs = list(sigma_mstep)
    missing = [d for d in docs if d not in features]
    if missing:
        raise ClickLogError(f"documents missing from feature table: {sorted(missing)[:20]}")
    values = np.array([sigma_mstep[d] for d in docs])
    if np.any((values < 0) | (values > 1)):
        raise ValueError("sigma targets must lie in [0, 1]")
    labels = threshold_labels(values) if docs else []
    return [LabeledSample(d, features[d], int(l)) for d, l in zip(docs, labels)]


class SigmaRegressor(Protocol):
    def fit(self, docs: Sequence[str], X: np.ndarray, targets: np.ndarray, iteration: int) -> None: ...

    def predict(self, docs: Sequence[str], X: np.ndarray) -> np.ndarray: ...


class MlpSigmaRegressor:
    """Warm-started MLP classifier over per-document sigma labels."""

    def __init__(self, cfg: MlpTrainConfig | None = None, labels: str = "soft",
                 mlp: Mlp | None = None):
        if labels not in ("threshold", "soft"):
            raise ValueError(f"unknown label mode {labels!r}")
        self.cfg = cfg or MlpTrainConfig()
        self.labels = labels
        self.mlp = mlp.copy() if mlp is not None else Mlp.init(np.random.default_rng([self.cfg.seed, 0]))

    def fit(self, docs, X, targets, iteration):
        y = threshold_labels(targets) if self.labels == "threshold" else np.asarray(targets)
        rng = np.random.default_rng([self.cfg.seed, 1, iteration])
        self.mlp = mlp_train(self.mlp, X, y, self.cfg, rng)

    def predict(self, docs, X):
        return self.mlp.predict_proba(X)


class LookupSigmaRegressor:
    """Returns the fitted targets verbatim; unseen documents get NaN."""

    def __init__(self):
        self.table: dict[str, float] = {}

    def fit(self, docs, X, targets, iteration):
        self.table = dict(zip(docs, np.asarray(targets, dtype=np.float64).tolist()))

    def predict(self, docs, X):
        return np.array([self.table.get(d, np.nan) for d in docs])


def _attach_features(data: CompiledData, features: FeatureTable) -> np.ndarray:
    """Re-point sigma indices at feature-table rows; returns train-doc rows."""
    missing = [d for d in data.sigma_keys if d not in features]
    if missing:
        raise ClickLogError(f"documents missing from feature table: {sorted(missing)[:20]}")
    rows = np.array([features._index[d] for d in data.sigma_keys], dtype=np.int64)
    data.s_idx = rows[data.s_idx] if len(rows) else data.s_idx
    data.sigma_keys = list(features.doc_ids)
    return rows


def run_regression_em(train: Dataset, features: FeatureTable, kind: ModelKind,
                      cfg: EmConfig | None = None, mlp_cfg: MlpTrainConfig | None = None,
                      regressor: SigmaRegressor | None = None,
                      labels: str = "soft") -> tuple[ParamStore, Mlp | None, EmTrace]:
    cfg = cfg or EmConfig()
    if not kind.has_vision:
        raise ValueError(f"regression EM needs a vision-bias model, got {kind.label}")
    if not train.sessions:
        raise ValueError("cannot train on an empty dataset")
    data = compile_dataset(train, kind)
    train_rows = _attach_features(data, features)
    if regressor is None:
        regressor = MlpSigmaRegressor(mlp_cfg, labels=labels)
    all_docs = features.doc_ids
    X_all = features.matrix
    X_train = X_all[train_rows]
    train_docs = [all_docs[i] for i in train_rows]

    params = ParamStore(
        kind,
        ParamTable("alpha", data.alpha_keys, cfg.alpha0(kind)),
        ParamTable("gamma", data.gamma_keys, cfg.init_gamma),
        ParamTable("sigma", all_docs, cfg.init_sigma),
    )
    iteration = [0]

    def sigma_step(old: ParamStore, sums, ratio_sigma: np.ndarray) -> np.ndarray:
        iteration[0] += 1
        targets = ratio_sigma[train_rows]
        regressor.fit(train_docs, X_train, targets, iteration[0])
        pred = np.asarray(regressor.predict(all_docs, X_all), dtype=np.float64)
        return np.where(np.isnan(pred), old.sigma.values, pred)

    params, trace = em_loop(data, params, cfg, sigma_step)
    mlp = getattr(regressor, "mlp", None)
    if isinstance(mlp, Mlp):
        params.mlp = mlp
    return params, (mlp if isinstance(mlp, Mlp) else None), trace
