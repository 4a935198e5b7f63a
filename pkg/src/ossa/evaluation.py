"""Open-set metrics: per-class F1, aF1, correct reject rate, threshold sweeps.

Decisions are given as parallel arrays: true label, seen flag and final
class (``UNKNOWN`` for rejections).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import UNKNOWN
from .errors import CurveError, EmptySetError, ParamError

DEFAULT_GRID = np.geomspace(0.05, 20.0, 200)


@dataclass(frozen=True)
class ConfusionCounts:
    classes: tuple
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self):
        return len(self.classes)

    def f1(self):
        denom = 2 * self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(denom > 0, 2 * self.tp / np.maximum(denom, 1), 0.0)
        return out.astype(np.float64)


@dataclass(frozen=True)
class TradeoffCurve:
    taus: np.ndarray
    af1: np.ndarray
    crr: np.ndarray
    closed_set_af1: float | None = None

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.float64)
        if taus.size and np.any(np.diff(taus) <= 0):
            raise CurveError("taus must be strictly increasing")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "af1", np.asarray(self.af1, dtype=np.float64))
        object.__setattr__(self, "crr", np.asarray(self.crr, dtype=np.float64))

    def __len__(self):
        return self.taus.size

    def rows(self):
        return list(zip(self.taus.tolist(), self.af1.tolist(), self.crr.tolist()))


def confusion(true, seen, final, classes) -> ConfusionCounts:
    """Per seen class TP/FP/FN.

    Any sample finalized as ``j`` that is not a seen sample of class ``j``
    (another seen class or any unseen sample) counts as a false positive.
    """
    true = np.asarray(true, dtype=np.int64)
    seen = np.asarray(seen, dtype=bool)
    final = np.asarray(final, dtype=np.int64)
    classes = tuple(int(c) for c in classes)
    lookup = np.full(max(classes, default=0) + 1, -1, dtype=np.int64)
    for i, c in enumerate(classes):
        lookup[c] = i
    k = len(classes)

    def class_index(labels):
        out = np.full(labels.shape, -1, dtype=np.int64)
        ok = (labels >= 0) & (labels < lookup.size)
        out[ok] = lookup[labels[ok]]
        return out

    t_idx = np.where(seen, class_index(true), -1)
    f_idx = class_index(final)
    hit = (t_idx >= 0) & (t_idx == f_idx)
    tp = np.bincount(t_idx[hit], minlength=k)[:k]
    fn = np.bincount(t_idx[(t_idx >= 0) & ~hit], minlength=k)[:k]
    fp = np.bincount(f_idx[(f_idx >= 0) & ~hit], minlength=k)[:k]
    return ConfusionCounts(classes, tp, fp, fn)


def af1(counts: ConfusionCounts) -> float:
    """Unweighted mean of per-class F1; a class with 0/0 contributes 0."""
    if counts.n_classes < 1:
        raise ParamError("aF1 needs at least one seen class")
    return float(counts.f1().mean())


def crr(final_unseen) -> float:
    """Fraction of unseen samples finalized as ``UNKNOWN``."""
    final_unseen = np.asarray(final_unseen)
    if final_unseen.size == 0:
        raise EmptySetError("no unseen samples")
    return float(np.mean(final_unseen == UNKNOWN))


def closed_set_af1(true, seen, candidates, classes):
    return af1(confusion(true, seen, candidates, classes))


def sweep(true, seen, candidates, s, grid, classes) -> TradeoffCurve:
    """(aF1, CRR) at every threshold in ``grid`` from precomputed scores."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise CurveError("tau grid is empty")
    seen = np.asarray(seen, dtype=bool)
    candidates = np.asarray(candidates, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    af1s, crrs = [], []
    for tau in grid:
        final = np.where(s < tau, candidates, UNKNOWN)
        af1s.append(af1(confusion(true, seen, final, classes)))
        crrs.append(crr(final[~seen]))
    return TradeoffCurve(grid, af1s, crrs, closed_set_af1(true, seen, candidates, classes))


def auc(curve: TradeoffCurve) -> float:
    """Trapezoidal area under aF1 as a function of CRR over [0, 1].

    Missing endpoints are added: CRR = 0 takes the closed-set aF1 (or the
    aF1 of the largest threshold), CRR = 1 takes aF1 = 0.
    """
    if len(curve) < 2:
        raise CurveError("need at least two curve points")
    x = curve.crr
    y = curve.af1
    if not np.any(x == 0.0):
        y0 = curve.closed_set_af1 if curve.closed_set_af1 is not None else y[np.argmax(curve.taus)]
        x, y = np.append(x, 0.0), np.append(y, y0)
    if not np.any(x == 1.0):
        x, y = np.append(x, 1.0), np.append(y, 0.0)
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def best_operating_point(curve: TradeoffCurve):
    """Index of the threshold maximizing (aF1 + CRR) / 2; ties go to the smaller tau."""
    return int(np.argmax(curve.af1 + curve.crr))


def histogram(values_by_class, width):
    """Per-class counts over half-open bins ``[k*w, (k+1)*w)``.

    Returns rows ``(class_id, k, lower, upper, count)`` covering every bin
    between each class's smallest and largest occupied bin.
    """
    if not width > 0:
        raise ParamError("bin width must be positive")
    rows = []
    for class_id in sorted(values_by_class):
        v = np.asarray(values_by_class[class_id], dtype=np.float64)
        if v.size == 0:
            continue
        bins = np.floor(v / width).astype(np.int64)
        # division rounding can land one bin off the edge comparison
        bins += (bins + 1) * width <= v
        bins -= bins * width > v
        lo = int(bins.min())
        counts = np.bincount(bins - lo)
        for offset, count in enumerate(counts.tolist()):
            k = lo + offset
            rows.append((int(class_id), k, k * width, (k + 1) * width, int(count)))
    return rows
