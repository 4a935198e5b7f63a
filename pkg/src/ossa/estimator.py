"""scikit-learn style estimators wrapping the training pipeline.

``PretextPretrainer`` learns an initial embedding on a many-class pretext
task; ``OpenSetAttributor`` fine-tunes an embedding with ProxyNCA++,
builds class references and predicts a known class or ``UNKNOWN``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import UNKNOWN, LabeledDataset, stratified_undersample
from .errors import DimError, LabelError, ParamError
from .metric import FINETUNE_EPOCHS, PRETRAINED_SCHEDULE, SCRATCH_SCHEDULE, finetune, init_proxies
from .net import EmbeddingModel, LrSchedule, forward, init_model
from .openset import decide_batch, references_from_labels, score
from .pretrain import PRETRAIN_SCHEDULE, PretrainedClassifier, init_head, pretrain, strip_head

PROTOCOLS = {"scratch": SCRATCH_SCHEDULE, "pretrained": PRETRAINED_SCHEDULE}


def _seeds(random_state, n):
    ss = np.random.SeedSequence(0 if random_state is None else int(random_state))
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n)]


def _check_input(X, model: EmbeddingModel):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != model.input_dim:
        raise DimError(f"expected {model.input_dim} features, got {X.shape[1]}")
    return X


class PretextPretrainer(TransformerMixin, BaseEstimator):
    """Train embedding + linear head with cross-entropy, then keep the embedding.

    After ``fit``, ``transform`` returns pre-head embeddings and
    ``embedding_model_`` is the stripped network, ready to initialize an
    :class:`OpenSetAttributor`.
    """

    def __init__(self, hidden_layers=(128, 128), embedding_dim=64, epochs=30,
                 lr=PRETRAIN_SCHEDULE.base_lr, lr_decay=PRETRAIN_SCHEDULE.decay_factor,
                 lr_interval=PRETRAIN_SCHEDULE.decay_interval, batch_size=32, weight_decay=0.01,
                 random_state=0):
        self.hidden_layers = hidden_layers
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_interval = lr_interval
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise LabelError("pretext task needs at least two classes")
        codes = np.searchsorted(self.classes_, y)
        s_model, s_head, s_train = _seeds(self.random_state, 3)
        widths = [X.shape[1], *self.hidden_layers, self.embedding_dim]
        clf = PretrainedClassifier(
            init_model(widths, s_model), init_head(self.classes_.size, self.embedding_dim, s_head)
        )
        schedule = LrSchedule(self.lr, self.lr_decay, self.lr_interval)
        self.classifier_, self.history_ = pretrain(
            clf, X, codes, schedule, self.epochs, s_train, self.batch_size, self.weight_decay
        )
        self.embedding_model_ = strip_head(self.classifier_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "embedding_model_")
        return forward(self.embedding_model_, _check_input(X, self.embedding_model_))

    def predict(self, X):
        check_is_fitted(self, "classifier_")
        X = _check_input(X, self.classifier_.model)
        return self.classes_[self.classifier_.predict(X)]


class OpenSetAttributor(ClassifierMixin, BaseEstimator):
    """Open-set source attribution by nearest class reference plus rejection.

    Parameters
    ----------
    protocol : {"scratch", "pretrained"}
        Picks the default learning-rate schedule (7e-4 or 1e-4, decayed by
        0.6 every 2 epochs). ``lr``, ``lr_decay`` and ``lr_interval``
        override individual fields.
    init_model : EmbeddingModel, optional
        Starting network (e.g. ``PretextPretrainer().fit(...).embedding_model_``).
        When omitted a fresh network with ``hidden_layers`` and
        ``embedding_dim`` is initialized.
    tau : float
        Rejection threshold on the normalized distance; a sample is accepted
        only when its normalized distance is strictly below ``tau``.
    undersample : bool
        Balance classes down to the smallest one before training.

    ``predict`` returns a training label, or ``UNKNOWN`` (-1) for rejected
    samples.
    """

    def __init__(self, protocol="scratch", init_model=None, hidden_layers=(128, 128),
                 embedding_dim=64, epochs=FINETUNE_EPOCHS, lr=None, lr_decay=None, lr_interval=None,
                 batch_size=32, weight_decay=0.01, squared_distance=False, temperature=1.0,
                 normalize=False, tau=2.0, undersample=True, random_state=0):
        self.protocol = protocol
        self.init_model = init_model
        self.hidden_layers = hidden_layers
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_interval = lr_interval
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.squared_distance = squared_distance
        self.temperature = temperature
        self.normalize = normalize
        self.tau = tau
        self.undersample = undersample
        self.random_state = random_state

    def schedule(self):
        if self.protocol not in PROTOCOLS:
            raise ParamError(f"protocol must be one of {sorted(PROTOCOLS)}, got {self.protocol!r}")
        base = PROTOCOLS[self.protocol]
        return LrSchedule(
            base.base_lr if self.lr is None else self.lr,
            base.decay_factor if self.lr_decay is None else self.lr_decay,
            base.decay_interval if self.lr_interval is None else self.lr_interval,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if np.any(y == UNKNOWN):
            raise LabelError(f"label {UNKNOWN} is reserved for unknown sources")
        s_sample, s_model, s_proxy, s_train = _seeds(self.random_state, 4)
        if self.undersample:
            data = LabeledDataset(X, y, ["train"] * len(y), np.ones(len(y), bool))
            data = stratified_undersample(data, s_sample)
            X, y = data.X, data.y
        self.classes_ = unique_labels(y)

        if self.init_model is not None:
            model = self.init_model.copy()
            if model.input_dim != X.shape[1]:
                raise DimError(f"init model expects {model.input_dim} features, got {X.shape[1]}")
        else:
            model = init_model([X.shape[1], *self.hidden_layers, self.embedding_dim], s_model)
        proxies = init_proxies(self.classes_, model.output_dim, s_proxy)
        self.model_, self.proxies_, self.history_ = finetune(
            model, proxies, X, y, self.schedule(), self.epochs, s_train, self.batch_size,
            self.weight_decay, self.squared_distance, self.temperature, self.normalize,
        )
        self.references_ = references_from_labels(self._embed(X), y, tau=self.tau)
        self.n_features_in_ = X.shape[1]
        return self

    def _embed(self, X):
        E = forward(self.model_, X)
        if self.normalize:
            E = E / np.linalg.norm(E, axis=1, keepdims=True)
        return E

    def transform(self, X):
        """Embeddings (L2-normalized when ``normalize`` is set)."""
        check_is_fitted(self, "model_")
        return self._embed(_check_input(X, self.model_))

    def score_samples(self, X):
        """Nearest-reference candidate and normalized distance per sample."""
        return score(self.transform(X), self.references_)

    def decision_function(self, X):
        """Negated normalized distance, so larger means more confident."""
        return -self.score_samples(X)[1]

    def predict_closed_set(self, X):
        return self.score_samples(X)[0]

    def predict(self, X):
        return decide_batch(self.transform(X), self.references_, tau=self.tau)[2]
