"""ProxyNCA++ loss with analytic gradients and the fine-tuning loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimError, EmptyDatasetError, LabelError
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

PRETRAINED_SCHEDULE = LrSchedule(base_lr=1e-4, decay_factor=0.6, decay_interval=2)
SCRATCH_SCHEDULE = LrSchedule(base_lr=7e-4, decay_factor=0.6, decay_interval=2)
FINETUNE_EPOCHS = 30

# Keeps the L2 gradient finite when an embedding coincides with a proxy.
DIST_EPS = 1e-12


@dataclass
class ProxySet:
    classes: tuple
    P: np.ndarray  # (n_classes, dim)

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2 or self.P.shape[0] != len(self.classes):
            raise DimError(f"{len(self.classes)} classes but proxy array has shape {self.P.shape}")
        if len(set(self.classes)) != len(self.classes):
            raise LabelError("duplicate proxy classes")
        if not np.all(np.isfinite(self.P)):
            raise DimError("non-finite proxy")

    @property
    def dim(self):
        return self.P.shape[1]

    def index_of(self, labels):
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(c)] for c in np.atleast_1d(labels)], dtype=np.int64)
        except KeyError as exc:
            raise LabelError(f"class {exc.args[0]} has no proxy") from None

    def __getitem__(self, label):
        return self.P[self.index_of([label])[0]]

    def to_bytes(self):
        return pack_arrays([np.asarray(self.classes, dtype=np.float64), self.P])

    @classmethod
    def from_bytes(cls, payload):
        classes, P = unpack_arrays(payload)
        return cls(tuple(int(c) for c in classes), P)


def init_proxies(classes, dim, seed) -> ProxySet:
    """One Gaussian proxy per class, entries with standard deviation 1/sqrt(dim)."""
    if dim < 1:
        raise DimError("proxy dim must be positive")
    classes = tuple(sorted(int(c) for c in classes))
    rng = np.random.default_rng(seed)
    return ProxySet(classes, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(classes), dim)))


def _l2_normalize(V):
    norms = np.linalg.norm(V, axis=-1, keepdims=True)
    return V / norms, norms


def _l2_normalize_backward(U, norms, G):
    # d(v/|v|) = (I - u u^T) / |v|
    return (G - U * np.sum(U * G, axis=-1, keepdims=True)) / norms


def batch_proxynca(E, idx, P, squared=False, temperature=1.0):
    """Mean ProxyNCA++ loss over a batch.

    ``E`` is (n, d) embeddings, ``idx`` the row of each sample's proxy in
    ``P`` (k, d). Returns ``(mean_loss, dL/dE, dL/dP)``.
    """
    n = E.shape[0]
    diff = E[:, None, :] - P[None, :, :]
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    if squared:
        D = sq
        dD = 2.0 * diff
    else:
        D = np.sqrt(sq)
        dD = diff / (D + DIST_EPS)[:, :, None]
    logits = -D / temperature
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    rows = np.arange(n)
    losses = D[rows, idx] / temperature + lse
    # dL/dD: one-hot(label)/T - softmax(-D/T)/T
    coef = -np.exp(logits - lse[:, None]) / temperature
    coef[rows, idx] += 1.0 / temperature
    coef /= n
    weighted = coef[:, :, None] * dD
    return float(losses.mean()), weighted.sum(axis=1), -weighted.sum(axis=0)


def proxynca_loss(emb, label, proxies: ProxySet, squared=False, temperature=1.0):
    """Single-sample loss ``d(emb, p_label) + log sum_a exp(-d(emb, p_a))``.

    Returns ``(loss, grad_emb, grad_proxies)`` where ``grad_proxies`` has the
    same shape as ``proxies.P``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape != (proxies.dim,):
        raise DimError(f"embedding shape {emb.shape} != proxy dim {proxies.dim}")
    idx = proxies.index_of([label])
    loss, gE, gP = batch_proxynca(emb[None, :], idx, proxies.P, squared, temperature)
    return loss, gE[0], gP


def finetune(model: EmbeddingModel, proxies: ProxySet, X, y, schedule=PRETRAINED_SCHEDULE,
             epochs=FINETUNE_EPOCHS, seed=0, batch_size=32, weight_decay=0.01,
             squared=False, temperature=1.0, normalize=False):
    """Jointly train the embedding model and the proxies with AdamW.

    Returns ``(model, proxies, history)``; history rows are dicts with keys
    ``epoch, lr, loss``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDatasetError("no training samples")
    if X.shape[0] != y.shape[0]:
        raise DimError("features and labels disagree in length")
    if model.output_dim != proxies.dim:
        raise DimError(f"model output dim {model.output_dim} != proxy dim {proxies.dim}")
    proxy_idx = proxies.index_of(y)

    model = model.copy()
    P = proxies.P.copy()
    n_model = len(model.params())
    params = model.params() + [P]
    state = adamw_init(params, lr=schedule.base_lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        total = 0.0
        for idx in minibatches(X.shape[0], batch_size, rng):
            H, cache = forward(model, X[idx], return_cache=True)
            if normalize:
                E, e_norm = _l2_normalize(H)
                Q, p_norm = _l2_normalize(P)
            else:
                E, Q = H, P
            loss, gE, gQ = batch_proxynca(E, proxy_idx[idx], Q, squared, temperature)
            if normalize:
                gE = _l2_normalize_backward(E, e_norm, gE)
                gQ = _l2_normalize_backward(Q, p_norm, gQ)
            total += loss * idx.size
            grads, _ = backward(model, cache, gE)
            params, state = adamw_step(params, grads + [gQ], state, lr=lr)
            model = model.with_params(params[:n_model])
            P = params[n_model]
            params = model.params() + [P]
        row = {"epoch": epoch, "lr": lr, "loss": total / X.shape[0]}
        log.debug("finetune epoch %(epoch)d lr=%(lr).3g loss=%(loss).4f", row)
        history.append(row)
    return model, ProxySet(proxies.classes, P), history
