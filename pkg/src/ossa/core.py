"""Shared domain types, vector math and the feature-file format."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimError, EmptyClassError, FormatError

UNKNOWN = -1
SPLITS = ("train", "val", "test")
FEATURE_MAGIC = "OSSA-FEAT"
FEATURE_VERSION = "v1"


def as_vector(values, name="vector"):
    """Return ``values`` as a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimError(f"{name} must be a non-empty 1-D sequence, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimError(f"{name} has non-finite entries")
    return arr


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def squared_l2_distance(a, b) -> float:
    a, b = _pair(a, b)
    diff = a - b
    return float(diff @ diff)


def l2_distance(a, b) -> float:
    """Euclidean distance between two equal-length vectors."""
    return math.sqrt(squared_l2_distance(a, b))


def pairwise_l2(X, R):
    """Distances between every row of ``X`` (n, d) and every row of ``R`` (k, d).

    Computed from explicit differences rather than the expanded
    ``|x|^2 - 2x.r + |r|^2`` form so that results are exactly zero on
    coincidence and scale exactly with the inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if X.ndim != 2 or R.ndim != 2 or X.shape[1] != R.shape[1]:
        raise DimError(f"dimension mismatch: {X.shape} vs {R.shape}")
    diff = X[:, None, :] - R[None, :, :]
    return np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))


@dataclass(frozen=True)
class LabeledDataset:
    """Feature rows tagged with a class id, a split and a seen flag.

    ``ids`` identifies each sample independently of its row position so that
    subsets (e.g. after undersampling) stay traceable to the source rows.
    """

    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    seen: np.ndarray
    class_table: dict = field(default_factory=dict)
    ids: np.ndarray = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DimError(f"features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        split = np.asarray(self.split, dtype="<U5").reshape(-1)
        seen = np.asarray(self.seen, dtype=bool).reshape(-1)
        ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        for name, arr in (("y", y), ("split", split), ("seen", seen), ("ids", ids)):
            if arr.shape[0] != n:
                raise DimError(f"{name} has {arr.shape[0]} entries for {n} samples")
        if not np.all(np.isfinite(X)):
            raise DimError("features contain non-finite values")
        bad = set(split.tolist()) - set(SPLITS)
        if bad:
            raise FormatError(f"unknown split tags {sorted(bad)}")
        if np.any(~seen & (split == "train")):
            raise FormatError("unseen-class samples cannot be in the train split")
        table = {int(k): str(v) for k, v in self.class_table.items()}
        for label in np.unique(y).tolist():
            table.setdefault(int(label), f"class{label}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "class_table", dict(sorted(table.items())))

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def seen_classes(self):
        return sorted(set(self.y[self.seen].tolist()))

    def subset(self, mask):
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return LabeledDataset(
            self.X[idx], self.y[idx], self.split[idx], self.seen[idx], self.class_table, self.ids[idx]
        )

    def select(self, split=None, seen=None):
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.split == split
        if seen is not None:
            mask &= self.seen == seen
        return self.subset(mask)


def stratified_undersample(data: LabeledDataset, seed: int) -> LabeledDataset:
    """Balance the seen-class train split down to the smallest class.

    Classes already at the minimum size are kept as-is, which makes the
    operation idempotent. Validation and test rows are untouched.
    """
    classes = data.seen_classes
    train = (data.split == "train") & data.seen
    counts = {c: int(np.sum(train & (data.y == c))) for c in classes}
    if not counts or min(counts.values()) == 0:
        empty = [c for c, n in counts.items() if n == 0]
        raise EmptyClassError(f"seen classes without train samples: {empty or 'all'}")
    target = min(counts.values())
    rng = np.random.default_rng(seed)
    keep = ~train
    for c in classes:
        idx = np.flatnonzero(train & (data.y == c))
        if idx.size > target:
            idx = rng.choice(idx, size=target, replace=False)
        keep[idx] = True
    return data.subset(keep)


def format_features(data: LabeledDataset) -> str:
    buf = io.StringIO()
    n_classes = max(data.class_table) + 1
    buf.write(f"{FEATURE_MAGIC} {FEATURE_VERSION} dim={data.dim} classes={n_classes}\n")
    for cid, name in data.class_table.items():
        buf.write(f"# class {cid} {name}\n")
    for row, label, split, seen in zip(data.X, data.y, data.split, data.seen):
        values = " ".join(repr(float(v)) for v in row)
        buf.write(f"{label} {split} {int(seen)} {values}\n")
    return buf.getvalue()


def write_features(data: LabeledDataset, path) -> None:
    Path(path).write_text(format_features(data), encoding="ascii")


def parse_features(text: str) -> LabeledDataset:
    """Parse the ``OSSA-FEAT v1`` text format.

    Lines starting with ``#`` are comments; ``# class <id> <name>`` lines
    carry class names.
    """
    lines = text.splitlines()
    if not lines:
        raise FormatError("line 1: empty feature file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != FEATURE_MAGIC or head[1] != FEATURE_VERSION:
        raise FormatError(f"line 1: expected '{FEATURE_MAGIC} {FEATURE_VERSION} dim=<D> classes=<N>'")
    try:
        key_d, dim = head[2].split("=")
        key_n, n_classes = head[3].split("=")
        dim, n_classes = int(dim), int(n_classes)
    except ValueError:
        raise FormatError("line 1: malformed dim/classes fields") from None
    if key_d != "dim" or key_n != "classes" or dim < 1 or n_classes < 1:
        raise FormatError("line 1: malformed dim/classes fields")

    names, rows, labels, splits, seens = {}, [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split(maxsplit=2)
            if len(parts) == 3 and parts[0] == "class":
                try:
                    names[int(parts[1])] = parts[2].strip()
                except ValueError:
                    raise FormatError(f"line {lineno}: bad class annotation") from None
            continue
        parts = line.split()
        if len(parts) != dim + 3:
            raise FormatError(f"line {lineno}: expected {dim + 3} fields, got {len(parts)}")
        try:
            label = int(parts[0])
        except ValueError:
            raise FormatError(f"line {lineno}: class id {parts[0]!r} is not an integer") from None
        if not 0 <= label < n_classes:
            raise FormatError(f"line {lineno}: class id {label} outside 0..{n_classes - 1}")
        if parts[1] not in SPLITS:
            raise FormatError(f"line {lineno}: split {parts[1]!r} not in {SPLITS}")
        if parts[2] not in ("0", "1"):
            raise FormatError(f"line {lineno}: seen flag must be 0 or 1")
        try:
            values = [float(v) for v in parts[3:]]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric feature value") from None
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"line {lineno}: non-finite feature value")
        if parts[2] == "0" and parts[1] == "train":
            raise FormatError(f"line {lineno}: unseen sample in train split")
        rows.append(values)
        labels.append(label)
        splits.append(parts[1])
        seens.append(parts[2] == "1")

    X = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    table = {c: names.get(c, f"class{c}") for c in range(n_classes)}
    return LabeledDataset(X, labels, splits, seens, table)


def read_features(path) -> LabeledDataset:
    return parse_features(Path(path).read_text(encoding="ascii"))
