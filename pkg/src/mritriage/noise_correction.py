"""Forward label-noise correction for a two-class softmax classifier.

The classifier predicts clean-label probabilities ``p(y*|x)``. During training
those probabilities are pushed through a transition matrix ``T`` whose entry
``T[j, i] = p(noisy=j | true=i)`` before the cross-entropy against the noisy
labels is taken, so the fitted model targets the clean posterior. At test time
``T`` is replaced by the identity.

Class index 0 is "normal", 1 is "abnormal" throughout.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_rng
from .errors import DataError, TrainingError, ValidationError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
_SIMPLEX_TOL = 1e-9
_STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class TransitionMatrix:
    """2x2 column-stochastic matrix, ``t[j, i] = p(noisy=j | true=i)``."""

    t: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=float)
        if t.shape != (2, 2):
            raise ValidationError(f"transition matrix must be 2x2, got shape {t.shape}")
        if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise ValidationError("transition matrix entries must lie in [0, 1]")
        if np.any(np.abs(t.sum(axis=0) - 1.0) > _STOCHASTIC_TOL):
            raise ValidationError(f"transition matrix columns must sum to 1, got {t.sum(axis=0)}")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(2))

    @classmethod
    def symmetric(cls, flip):
        """Both classes flipped with the same probability."""
        return cls([[1.0 - flip, flip], [flip, 1.0 - flip]])

    @property
    def is_identity(self):
        return bool(np.array_equal(self.t, np.eye(2)))

    def to_json(self):
        """Row-major nested list, ``[[t00, t01], [t10, t11]]`` with ``t[j][i]``."""
        return json.dumps({"convention": "t[j][i] = p(noisy=j | true=i)",
                           "t": self.t.tolist()})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if isinstance(obj, dict):
            obj = obj["t"]
        return cls(obj)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# Pooled report-classifier confusion counts; rows = predicted, cols = true.
ALARM_CONFUSION = np.array([[428, 29], [33, 510]])


@dataclass
class LabeledFeatureSet:
    """Feature matrix with noisy (report-derived) and optional true labels."""

    features: np.ndarray
    noisy_labels: np.ndarray
    true_labels: np.ndarray | None = None
    ids: list = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.noisy_labels = _as_labels(self.noisy_labels, "noisy_labels")
        if self.true_labels is not None:
            self.true_labels = _as_labels(self.true_labels, "true_labels")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise DataError("feature set needs at least one row and one column")
        if not np.all(np.isfinite(self.features)):
            raise DataError("feature values must be finite")
        if len(self.noisy_labels) != n:
            raise DataError("noisy_labels length does not match features")
        if self.true_labels is not None and len(self.true_labels) != n:
            raise DataError("true_labels length does not match features")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        elif len(self.ids) != n:
            raise DataError("ids length does not match features")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledFeatureSet(
            self.features[idx],
            self.noisy_labels[idx],
            None if self.true_labels is None else self.true_labels[idx],
            [self.ids[i] for i in idx],
        )


def _as_labels(labels, name):
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        raise DataError(f"{name} must be binary (0/1)")
    return arr.astype(np.int64)


def write_features_csv(path, data):
    d = data.n_features
    header = ["id"] + [f"feat_{k}" for k in range(d)] + ["true_label", "noisy_label"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in range(len(data)):
            true = "" if data.true_labels is None else int(data.true_labels[r])
            writer.writerow([data.ids[r], *map(repr, data.features[r].tolist()),
                             true, int(data.noisy_labels[r])])


def read_features_csv(path):
    """Parse a ``id,feat_0..feat_{d-1},true_label,noisy_label`` file.

    ``true_label`` cells may be empty; if any is empty the returned set has
    no true labels.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    feat_cols = [c for c in header if c.startswith("feat_")]
    expected = ["id"] + [f"feat_{k}" for k in range(len(feat_cols))] + ["true_label", "noisy_label"]
    for col in expected:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    extra = [c for c in header if c not in expected]
    if extra:
        raise DataError(f"{path}: unexpected column {extra[0]!r}")
    if not feat_cols:
        raise DataError(f"{path}: no feature columns (feat_0...)")
    pos = {c: header.index(c) for c in expected}
    ids, feats, true, noisy = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(row[pos["id"]])
            feats.append([float(row[pos[c]]) for c in expected[1:-2]])
            t = row[pos["true_label"]].strip()
            true.append(None if t == "" else int(t))
            noisy.append(int(row[pos["noisy_label"]]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    true_labels = None if any(t is None for t in true) else np.array(true)
    return LabeledFeatureSet(np.array(feats), np.array(noisy), true_labels, ids)


@dataclass
class LinearClassifier:
    """Two-logit linear model: logits are ``(b0, x.w + b1)``."""

    weights: np.ndarray
    bias: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.bias = np.asarray(self.bias, dtype=float).reshape(2)

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(2))

    @classmethod
    def initialize(cls, d, seed):
        rng = derive_rng(seed, "noise_correction", "init")
        return cls(rng.uniform(-0.01, 0.01, size=d), np.zeros(2))

    def logits(self, features):
        x = np.atleast_2d(np.asarray(features, dtype=float))
        z = np.empty((x.shape[0], 2))
        z[:, 0] = self.bias[0]
        z[:, 1] = x @ self.weights + self.bias[1]
        return z

    @property
    def params(self):
        return np.concatenate([self.weights, self.bias])

    @classmethod
    def from_params(cls, params):
        params = np.asarray(params, dtype=float)
        return cls(params[:-2].copy(), params[-2:].copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias)))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["weights"], obj["bias"])


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_correct(clean_probs, t):
    """Map clean-label probabilities to noisy-label probabilities, ``T @ p``.

    Accepts a single 2-vector or an ``(n, 2)`` array of rows.
    """
    p = np.asarray(clean_probs, dtype=float)
    if p.shape[-1] != 2:
        raise ValidationError("probability vectors must have length 2")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > _SIMPLEX_TOL):
        raise ValidationError("clean probabilities must be non-negative and sum to 1")
    return p @ t.t.T


def corrected_loss(classifier, batch, t, eps=LOG_EPS):
    """Mean cross-entropy of noisy labels under forward-corrected predictions."""
    q = forward_correct(softmax(classifier.logits(batch.features)), t)
    q_obs = q[np.arange(len(batch)), batch.noisy_labels]
    return float(-np.mean(np.log(np.maximum(q_obs, eps))))


def loss_gradient(classifier, batch, t, eps=LOG_EPS):
    """Analytic gradient of :func:`corrected_loss`.

    Returns ``(grad_weights, grad_bias)``. With ``r = T[y, :]`` and
    ``q_y = r . p`` the logit gradient is ``p - p * r / q_y``; samples whose
    ``q_y`` sits on the clamp contribute zero.
    """
    x = batch.features
    y = batch.noisy_labels
    p = softmax(classifier.logits(x))
    r = t.t[y]
    q_obs = np.sum(r * p, axis=1)
    g = p - p * r / np.maximum(q_obs, eps)[:, None]
    g[q_obs < eps] = 0.0
    g /= len(batch)
    return x.T @ g[:, 1], g.sum(axis=0)


def cross_entropy(classifier, batch, eps=LOG_EPS):
    """Uncorrected softmax cross-entropy against the noisy labels."""
    p = softmax(classifier.logits(batch.features))
    p_obs = p[np.arange(len(batch)), batch.noisy_labels]
    return float(-np.mean(np.log(np.maximum(p_obs, eps))))


def cross_entropy_gradient(classifier, batch, eps=LOG_EPS):
    p = softmax(classifier.logits(batch.features))
    onehot = np.eye(2)[batch.noisy_labels]
    g = p - onehot
    g[p[np.arange(len(batch)), batch.noisy_labels] < eps] = 0.0
    g /= len(batch)
    return batch.features.T @ g[:, 1], g.sum(axis=0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings.

    ``lr_decay_factor`` divides the learning rate after ``patience_epochs``
    epochs without a validation-loss improvement. ``batch_size=None`` means
    full-batch gradient descent.
    """

    learning_rate: float = 1e-4
    lr_decay_factor: float = 10.0
    patience_epochs: int = 5
    max_epochs: int = 100
    seed: int = 0
    batch_size: int | None = None
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not self.lr_decay_factor > 0:
            raise ValidationError("lr_decay_factor must be positive")
        if self.patience_epochs < 1:
            raise ValidationError("patience_epochs must be >= 1")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValidationError("val_fraction must lie in (0, 1)")


def train_val_split(n, seed, val_fraction=0.2):
    """Seeded shuffle; the last ``val_fraction`` of the permutation is validation."""
    order = derive_rng(seed, "noise_correction", "split").permutation(n)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1 or n_val < 1:
        raise DataError(f"cannot split {n} samples into train and validation")
    return order[: n - n_val], order[n - n_val:]


def train(data, t, cfg):
    """Fit a :class:`LinearClassifier` on noisy labels with forward correction.

    Deterministic given ``cfg.seed``. Returns the parameters with the lowest
    validation corrected loss seen (the initialisation counts as epoch 0).
    """
    init = LinearClassifier.initialize(data.n_features, cfg.seed)
    if cfg.max_epochs == 0:
        return init
    train_idx, val_idx = train_val_split(len(data), cfg.seed, cfg.val_fraction)
    train_set, val_set = data.subset(train_idx), data.subset(val_idx)
    batch_rng = derive_rng(cfg.seed, "noise_correction", "batches")

    params = init.params
    lr = cfg.learning_rate
    best = init
    best_val = corrected_loss(init, val_set, t)
    stale = 0
    n_train = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.batch_size is None or cfg.batch_size >= n_train:
            batches = [np.arange(n_train)]
        else:
            order = batch_rng.permutation(n_train)
            batches = [order[i:i + cfg.batch_size] for i in range(0, n_train, cfg.batch_size)]
        for idx in batches:
            model = LinearClassifier.from_params(params)
            gw, gb = loss_gradient(model, train_set.subset(idx) if len(batches) > 1 else train_set, t)
            params = params - lr * np.concatenate([gw, gb])
        model = LinearClassifier.from_params(params)
        val = corrected_loss(model, val_set, t)
        if not (math.isfinite(val) and model.is_finite()):
            raise TrainingError(
                f"non-finite validation loss at epoch {epoch} (lr={lr:g}, "
                f"max |param|={np.max(np.abs(params)):g})"
            )
        if val < best_val:
            best_val, best, stale = val, model, 0
        else:
            stale += 1
            if stale >= cfg.patience_epochs:
                lr /= cfg.lr_decay_factor
                stale = 0
                logger.debug("epoch %d: lr decayed to %g", epoch, lr)
    return best


def predict(classifier, features, mode="clean", t=None):
    """Per-sample class probabilities.

    ``mode="clean"`` gives ``softmax(logits)``; ``mode="noisy"`` additionally
    applies ``t``.
    """
    p = softmax(classifier.logits(features))
    if mode == "clean":
        return p
    if mode == "noisy":
        if t is None:
            raise ValidationError("mode='noisy' requires a transition matrix")
        return forward_correct(p, t)
    raise ValidationError(f"unknown prediction mode {mode!r}")


def estimate_transition(confusion):
    """Column-normalise a confusion matrix (rows = predicted, cols = true)."""
    c = np.asarray(confusion, dtype=float)
    if c.shape != (2, 2):
        raise ValidationError("confusion matrix must be 2x2")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValidationError("confusion counts must be finite and non-negative")
    totals = c.sum(axis=0)
    if np.any(totals <= 0):
        raise DataError("cannot estimate flip rate for a class with no observations")
    return TransitionMatrix(c / totals)


def confusion_matrix(noisy, true):
    """2x2 counts with rows = noisy label, cols = true label."""
    noisy = _as_labels(noisy, "noisy")
    true = _as_labels(true, "true")
    out = np.zeros((2, 2), dtype=np.int64)
    np.add.at(out, (noisy, true), 1)
    return out


def estimate_transition_by_site(noisy, true, sites):
    """One transition matrix per site plus the pooled estimate under ``None``."""
    noisy, true, sites = np.asarray(noisy), np.asarray(true), np.asarray(sites)
    out = {None: estimate_transition(confusion_matrix(noisy, true))}
    for site in sorted(set(sites.tolist())):
        mask = sites == site
        out[site] = estimate_transition(confusion_matrix(noisy[mask], true[mask]))
    return out


ALARM_T = estimate_transition(ALARM_CONFUSION)


def with_noisy_labels(data, noisy):
    return replace(data, noisy_labels=np.asarray(noisy), ids=list(data.ids))
