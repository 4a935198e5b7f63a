"""Cross-entropy pretext pretraining and head removal."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimError, EmptyDatasetError, LabelError, StateError
from .net import (
    EmbeddingModel,
    LrSchedule,
    adamw_init,
    adamw_step,
    backward,
    forward,
    lr_at,
    minibatches,
    pack_arrays,
    unpack_arrays,
)

log = logging.getLogger(__name__)

PRETRAIN_SCHEDULE = LrSchedule(base_lr=1e-3, decay_factor=0.65, decay_interval=3)


@dataclass
class ClassifierHead:
    W: np.ndarray  # (K, embedding_dim)
    b: np.ndarray  # (K,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] < 2 or self.b.shape != (self.W.shape[0],):
            raise DimError(f"head needs K >= 2 classes, got W{self.W.shape} b{self.b.shape}")

    @property
    def n_classes(self):
        return self.W.shape[0]

    def to_bytes(self):
        return pack_arrays([self.W, self.b])

    @classmethod
    def from_bytes(cls, payload):
        W, b = unpack_arrays(payload)
        return cls(W, b)


def init_head(n_classes, embedding_dim, seed):
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(embedding_dim)
    return ClassifierHead(
        rng.uniform(-bound, bound, size=(n_classes, embedding_dim)),
        rng.uniform(-bound, bound, size=n_classes),
    )


def _log_softmax(Z):
    shifted = Z - Z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """Negative log-softmax at ``label`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    label = int(label)
    if not 0 <= label < z.shape[-1]:
        raise LabelError(f"label {label} outside 0..{z.shape[-1] - 1}")
    logp = _log_softmax(z)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def batch_cross_entropy(Z, y):
    """Mean cross-entropy over rows of ``Z`` and the gradient of that mean."""
    n, k = Z.shape
    if np.any((y < 0) | (y >= k)):
        raise LabelError(f"labels outside 0..{k - 1}")
    logp = _log_softmax(Z)
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return float(-logp[rows, y].mean()), grad / n


@dataclass
class PretrainedClassifier:
    """Embedding model with a classification head attached."""

    model: EmbeddingModel
    head: ClassifierHead | None

    def logits(self, X):
        if self.head is None:
            raise StateError("classifier head has been removed")
        return forward(self.model, X) @ self.head.W.T + self.head.b

    def predict(self, X):
        return np.argmax(self.logits(X), axis=-1)


def pretrain(clf: PretrainedClassifier, X, y, schedule=PRETRAIN_SCHEDULE, epochs=30, seed=0,
             batch_size=32, weight_decay=0.01):
    """Mini-batch AdamW training of model and head on a pretext task.

    Returns the trained classifier and a list of per-epoch dicts with keys
    ``epoch, lr, loss, acc`` (loss and accuracy averaged over the epoch's
    batches, weighted by batch size).
    """
    if clf.head is None:
        raise StateError("pretraining needs a classifier head")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDatasetError("pretext dataset is empty")
    if X.shape[0] != y.shape[0]:
        raise DimError("features and labels disagree in length")
    if np.any((y < 0) | (y >= clf.head.n_classes)):
        raise LabelError("pretext labels outside the head's class range")

    model, head = clf.model.copy(), ClassifierHead(clf.head.W.copy(), clf.head.b.copy())
    n_model = len(model.params())
    params = model.params() + [head.W, head.b]
    state = adamw_init(params, lr=schedule.base_lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        total_loss, correct = 0.0, 0
        for idx in minibatches(X.shape[0], batch_size, rng):
            H, cache = forward(model, X[idx], return_cache=True)
            Z = H @ head.W.T + head.b
            loss, dZ = batch_cross_entropy(Z, y[idx])
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(Z, axis=1) == y[idx]))
            dW_head = dZ.T @ H
            db_head = dZ.sum(axis=0)
            grads, _ = backward(model, cache, dZ @ head.W)
            params, state = adamw_step(params, grads + [dW_head, db_head], state, lr=lr)
            model = model.with_params(params[:n_model])
            head = ClassifierHead(params[n_model], params[n_model + 1])
            params = model.params() + [head.W, head.b]
        row = {"epoch": epoch, "lr": lr, "loss": total_loss / X.shape[0], "acc": correct / X.shape[0]}
        log.debug("pretrain epoch %(epoch)d lr=%(lr).3g loss=%(loss).4f acc=%(acc).3f", row)
        history.append(row)
    return PretrainedClassifier(model, head), history


def strip_head(clf: PretrainedClassifier) -> EmbeddingModel:
    """Drop the classification layer; the embedding is the pre-head activation."""
    if clf.head is None:
        raise StateError("no classifier head attached")
    return clf.model.copy()
