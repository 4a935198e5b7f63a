"""Experiment orchestration shared by the CLI commands.

Every stage is a function of the config, its input artifacts and the seed;
all outputs are bytes or text so that reruns can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import io
import logging

import numpy as np

from .config import ExperimentConfig
from .core import UNKNOWN, LabeledDataset, format_features, l2_distance, read_features
from .errors import CheckpointError, DimError, EmptyClassError
from .estimator import OpenSetAttributor, PretextPretrainer
from .evaluation import af1, auc, best_operating_point, confusion, crr, histogram, sweep
from .metric import ProxySet
from .net import EmbeddingModel, forward, load_checkpoint, save_checkpoint
from .openset import ReferenceSet, decide_batch, refs_from_bytes, refs_to_bytes
from .pretrain import ClassifierHead, PretrainedClassifier, strip_head
from .synthdata import build_dataset, pretext_profiles

log = logging.getLogger(__name__)

HEAD_TAG = b"HEAD"
PROXY_TAG = b"PROX"
# Present when embeddings are L2-normalized before scoring.
NORM_TAG = b"NORM"

# Stream indices for deriving independent seeds from the experiment seed.
_DATASET, _PRETEXT_DATA, _PRETRAIN, _TRAIN = range(4)


def derive_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def digest(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def dataset_digest(data: LabeledDataset) -> str:
    return digest(format_features(data))


def make_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    spec = cfg.dataset
    if spec.path is not None:
        return read_features(spec.path)
    return build_dataset(
        spec.seen, spec.unseen, spec.counts, spec.unseen_test,
        derive_seed(cfg.seed, _DATASET), spec.patch_size, spec.crop_size,
    )


def make_pretext_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    spec = cfg.pretrain
    return build_dataset(
        pretext_profiles(spec.pretext_classes), (), (spec.samples_per_class, 0, 0), 0,
        derive_seed(cfg.seed, _PRETEXT_DATA), cfg.dataset.patch_size, cfg.dataset.crop_size,
    )


def log_csv(rows, columns) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns) + "\n")
    return buf.getvalue()


# -- pretrain ---------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig, pretext: LabeledDataset | None = None):
    """Pretext pretraining; returns ``(checkpoint_bytes, log_rows)``."""
    spec = cfg.pretrain
    pretext = make_pretext_dataset(cfg) if pretext is None else pretext
    est = PretextPretrainer(
        hidden_layers=cfg.hidden, embedding_dim=cfg.embedding_dim, epochs=spec.epochs,
        lr=spec.schedule.base_lr, lr_decay=spec.schedule.decay_factor,
        lr_interval=spec.schedule.decay_interval, batch_size=spec.batch_size,
        weight_decay=spec.weight_decay, random_state=derive_seed(cfg.seed, _PRETRAIN),
    ).fit(pretext.X, pretext.y)
    clf = est.classifier_
    ckpt = save_checkpoint(clf.model, blocks={HEAD_TAG: clf.head.to_bytes()})
    return ckpt, est.history_


def load_classifier(data: bytes) -> PretrainedClassifier:
    model, _, blocks = load_checkpoint(data)
    head = ClassifierHead.from_bytes(blocks[HEAD_TAG]) if HEAD_TAG in blocks else None
    return PretrainedClassifier(model, head)


def init_from_checkpoint(data: bytes) -> EmbeddingModel:
    """Embedding model from a checkpoint, removing the classification head if present."""
    clf = load_classifier(data)
    return strip_head(clf) if clf.head is not None else clf.model


# -- train ------------------------------------------------------------------


def train_split(data: LabeledDataset):
    train = data.select("train", seen=True)
    if len(train) == 0:
        raise EmptyClassError("dataset has no seen-class train samples")
    return train


def run_train(cfg: ExperimentConfig, data: LabeledDataset, init_ckpt: bytes | None = None):
    """Fine-tune and build references.

    Without ``init_ckpt`` the scratch protocol is used, otherwise the
    pretrained one. Returns ``(checkpoint_bytes, references_bytes, log_rows,
    estimator)``.
    """
    spec = cfg.finetune
    train = train_split(data)
    init = None
    schedule = spec.scratch
    protocol = "scratch"
    if init_ckpt is not None:
        init = init_from_checkpoint(init_ckpt)
        if init.input_dim != data.dim:
            raise CheckpointError(f"checkpoint expects {init.input_dim} features, dataset has {data.dim}")
        schedule, protocol = spec.pretrained, "pretrained"
    est = OpenSetAttributor(
        protocol=protocol, init_model=init, hidden_layers=cfg.hidden, embedding_dim=cfg.embedding_dim,
        epochs=spec.epochs, lr=schedule.base_lr, lr_decay=schedule.decay_factor,
        lr_interval=schedule.decay_interval, batch_size=spec.batch_size,
        weight_decay=spec.weight_decay, squared_distance=spec.squared_distance,
        temperature=spec.temperature, normalize=spec.normalize,
        tau=cfg.eval.tau or cfg.eval.default_tau, undersample=spec.undersample,
        random_state=derive_seed(cfg.seed, _TRAIN),
    ).fit(train.X, train.y)
    blocks = {PROXY_TAG: est.proxies_.to_bytes()}
    if spec.normalize:
        blocks[NORM_TAG] = b"\x01"
    ckpt = save_checkpoint(est.model_, blocks=blocks)
    return ckpt, refs_to_bytes(est.references_), est.history_, est


def load_model(data: bytes) -> EmbeddingModel:
    return load_checkpoint(data)[0]


def load_embedder(data: bytes):
    """``(model, embed)`` where ``embed`` maps feature rows to scoring embeddings."""
    model, _, blocks = load_checkpoint(data)
    if NORM_TAG in blocks:
        return model, lambda X: _unit(forward(model, X))
    return model, lambda X: forward(model, X)


def load_proxies(data: bytes) -> ProxySet | None:
    blocks = load_checkpoint(data)[2]
    return ProxySet.from_bytes(blocks[PROXY_TAG]) if PROXY_TAG in blocks else None


def check_compatible(model: EmbeddingModel, refs: ReferenceSet, dim=None):
    if refs.dim != model.output_dim:
        raise DimError(f"references have dim {refs.dim}, model embeds to {model.output_dim}")
    if dim is not None and dim != model.input_dim:
        raise DimError(f"inputs have {dim} features, model expects {model.input_dim}")


# -- eval -------------------------------------------------------------------


def tau_grid(cfg: ExperimentConfig):
    e = cfg.eval
    return np.geomspace(e.grid_min, e.grid_max, e.grid_points)


def _fmt(x):
    return repr(float(x))


def run_eval(cfg: ExperimentConfig, data: LabeledDataset, ckpt: bytes, refs_bytes: bytes):
    """Score the test split once, sweep thresholds and build the report.

    Returns ``(report_text, curve_csv, hist_csv, summary)``.
    """
    model, embed = load_embedder(ckpt)
    refs = refs_from_bytes(refs_bytes)
    check_compatible(model, refs, data.dim)

    test = data.select("test")
    classes = refs.class_ids.tolist()
    candidates, s, _ = decide_batch(embed(test.X), refs, tau=np.inf)
    curve = sweep(test.y, test.seen, candidates, s, tau_grid(cfg), classes)
    area = auc(curve)
    if cfg.eval.tau is not None:
        tau, tau_source = cfg.eval.tau, "config"
    else:
        tau, tau_source = float(curve.taus[best_operating_point(curve)]), "best"
    final = np.where(s < tau, candidates, UNKNOWN)
    counts = confusion(test.y, test.seen, final, classes)
    summary = {
        "tau": tau,
        "af1": af1(counts),
        "crr": crr(final[~test.seen]),
        "auc": area,
        "closed_set_af1": curve.closed_set_af1,
        "curve": curve,
        "per_class_f1": dict(zip(classes, counts.f1().tolist())),
    }

    train = data.select("train", seen=True)
    hist_rows = []
    if len(train):
        E_train = embed(train.X)
        own = {
            c: [l2_distance(e, refs[c].r) / refs[c].sigma for e in E_train[train.y == c]]
            for c in classes if np.any(train.y == c)
        }
        hist_rows += [("train",) + row for row in histogram(own, cfg.eval.hist_width)]
    by_true = {int(c): s[test.y == c] for c in np.unique(test.y)}
    hist_rows += [("test",) + row for row in histogram(by_true, cfg.eval.hist_width)]

    curve_csv = "tau,aF1,CRR\n" + "".join(f"{_fmt(t)},{_fmt(a)},{_fmt(c)}\n" for t, a, c in curve.rows())
    hist_csv = "split,class,bin,lower,upper,count\n" + "".join(
        f"{split},{c},{k},{_fmt(lo)},{_fmt(hi)},{n}\n" for split, c, k, lo, hi, n in hist_rows
    )

    out = io.StringIO()
    out.write("OSSA-REPORT v1\n")
    out.write(f"config_digest: {cfg.digest}\n")
    out.write(f"dataset_digest: {dataset_digest(data)}\n")
    out.write(f"checkpoint_digest: {digest(ckpt)}\n")
    out.write(f"references_digest: {digest(refs_bytes)}\n")
    out.write(f"test_samples: {len(test)} (seen {int(test.seen.sum())}, unseen {int((~test.seen).sum())})\n")
    out.write(f"tau: {_fmt(tau)}\n")
    out.write(f"tau_source: {tau_source}\n")
    out.write(f"aF1: {_fmt(summary['af1'])}\n")
    out.write(f"CRR: {_fmt(summary['crr'])}\n")
    out.write(f"closed_set_aF1: {_fmt(curve.closed_set_af1)}\n")
    out.write(f"auc: {_fmt(area)}\n")
    out.write("\n[per_class_f1]\n")
    for c in classes:
        out.write(f"{c} {data.class_table.get(c, c)} {_fmt(summary['per_class_f1'][c])}\n")
    out.write(f"\n[curve] {len(curve)} points\n")
    out.write(curve_csv)
    out.write(f"\n[histogram] width={_fmt(cfg.eval.hist_width)}\n")
    out.write(hist_csv)
    return out.getvalue(), curve_csv, hist_csv, summary


def _unit(E):
    return E / np.linalg.norm(E, axis=1, keepdims=True)


# -- compare ----------------------------------------------------------------


def run_compare(cfg: ExperimentConfig, data: LabeledDataset | None = None):
    """Scratch vs pretrained protocol on identical data.

    Returns ``(report_text, results)`` where results maps protocol name to
    its eval summary plus the dataset digest it consumed.
    """
    data = make_dataset(cfg) if data is None else data
    pretrain_ckpt, _ = run_pretrain(cfg)
    results = {}
    for name, init in (("scratch", None), ("pretrained", pretrain_ckpt)):
        ckpt, refs, _, _ = run_train(cfg, data, init)
        _, _, _, summary = run_eval(cfg, data, ckpt, refs)
        summary["dataset_digest"] = dataset_digest(data)
        summary["checkpoint_digest"] = digest(ckpt)
        results[name] = summary
    out = io.StringIO()
    out.write("OSSA-COMPARE v1\n")
    out.write(f"config_digest: {cfg.digest}\n")
    out.write(f"dataset_digest: {dataset_digest(data)}\n")
    out.write(f"pretrain_checkpoint_digest: {digest(pretrain_ckpt)}\n")
    for name, summary in results.items():
        out.write(
            f"{name}: auc={_fmt(summary['auc'])} aF1={_fmt(summary['af1'])} "
            f"CRR={_fmt(summary['crr'])} tau={_fmt(summary['tau'])}\n"
        )
    return out.getvalue(), results


# -- attribute --------------------------------------------------------------


def attribute(ckpt: bytes, refs: ReferenceSet, X, tau):
    """Per-row ``(candidate, normalized_distance, accepted)``."""
    model, embed = load_embedder(ckpt)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    check_compatible(model, refs, X.shape[1])
    candidates, s, final = decide_batch(embed(X), refs, tau=tau)
    return [(int(c), float(v), bool(f != UNKNOWN)) for c, v, f in zip(candidates, s, final)]
