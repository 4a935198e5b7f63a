"""Class references, normalized distance and the accept/reject decision.

Identification picks the nearest class centroid in the embedding space.
The attribution is accepted only when the distance to that centroid,
divided by the class's spread ``sigma``, is strictly below ``tau``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .core import UNKNOWN, l2_distance, pairwise_l2
from .errors import DimError, FormatError, InsufficientClassError, ParamError, StateError

REFS_MAGIC = b"OSSA-REFS"
REFS_VERSION = 1


@dataclass(frozen=True)
class ClassReference:
    class_id: int
    r: np.ndarray
    sigma: float
    n: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise InsufficientClassError(f"class {self.class_id}: sigma must be positive")
        if self.n < 2:
            raise InsufficientClassError(f"class {self.class_id}: need at least 2 samples")


@dataclass(frozen=True)
class ReferenceSet:
    references: tuple
    tau: float | None = None

    def __post_init__(self):
        refs = tuple(sorted(self.references, key=lambda ref: ref.class_id))
        if not refs:
            raise StateError("reference set is empty")
        ids = [ref.class_id for ref in refs]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate class ids in reference set")
        dims = {ref.r.shape for ref in refs}
        if len(dims) != 1:
            raise DimError(f"references disagree in dimension: {sorted(dims)}")
        if self.tau is not None and not self.tau > 0:
            raise ParamError("tau must be positive")
        object.__setattr__(self, "references", refs)

    @property
    def class_ids(self):
        return np.array([ref.class_id for ref in self.references], dtype=np.int64)

    @property
    def centroids(self):
        return np.stack([ref.r for ref in self.references])

    @property
    def sigmas(self):
        return np.array([ref.sigma for ref in self.references])

    @property
    def dim(self):
        return self.references[0].r.shape[0]

    def with_tau(self, tau):
        return replace(self, tau=float(tau))

    def __getitem__(self, class_id):
        for ref in self.references:
            if ref.class_id == class_id:
                return ref
        raise KeyError(class_id)


@dataclass(frozen=True)
class AttributionDecision:
    candidate: int
    normalized_distance: float
    accepted: bool

    @property
    def final(self):
        return self.candidate if self.accepted else UNKNOWN


def compute_references(groups, tau=None) -> ReferenceSet:
    """Centroid and spread for each class.

    ``groups`` maps class id to an (n, d) array of that class's training
    embeddings. The spread uses the (n - 1) divisor.
    """
    refs = []
    for class_id, E in groups.items():
        E = np.asarray(E, dtype=np.float64)
        if E.ndim != 2 or E.shape[0] < 2:
            raise InsufficientClassError(f"class {class_id} needs at least 2 embeddings")
        r = E.mean(axis=0)
        diff = E - r
        sigma = math.sqrt(float(np.einsum("nd,nd->", diff, diff)) / (E.shape[0] - 1))
        refs.append(ClassReference(int(class_id), r, sigma, E.shape[0]))
    return ReferenceSet(tuple(refs), tau)


def references_from_labels(E, y, tau=None) -> ReferenceSet:
    E = np.asarray(E, dtype=np.float64)
    y = np.asarray(y)
    return compute_references({int(c): E[y == c] for c in np.unique(y)}, tau)


def identify(emb, refs: ReferenceSet) -> int:
    """Nearest reference by L2 distance; ties go to the lowest class id."""
    return int(score(np.asarray(emb, dtype=np.float64)[None, :], refs)[0][0])


def normalized_distance(emb, ref: ClassReference) -> float:
    return l2_distance(emb, ref.r) / ref.sigma


def score(E, refs: ReferenceSet):
    """Candidate class and normalized distance for each row of ``E``.

    Scoring is independent of ``tau``, so it can be done once and
    thresholded many times.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != refs.dim:
        raise DimError(f"embedding dim {E.shape[-1]} != reference dim {refs.dim}")
    D = pairwise_l2(E, refs.centroids)
    nearest = np.argmin(D, axis=1)  # first minimum = lowest class id
    s = D[np.arange(E.shape[0]), nearest] / refs.sigmas[nearest]
    return refs.class_ids[nearest], s


def accept(s, tau):
    """The accept rule: strictly below the threshold."""
    return np.asarray(s) < tau


def decide(emb, refs: ReferenceSet) -> AttributionDecision:
    if refs.tau is None:
        raise StateError("reference set has no threshold")
    candidate = identify(emb, refs)
    s = normalized_distance(emb, refs[candidate])
    return AttributionDecision(candidate, s, bool(s < refs.tau))


def decide_batch(E, refs: ReferenceSet, tau=None):
    """Vectorized :func:`decide`; returns ``(candidates, s, finals)``."""
    tau = refs.tau if tau is None else tau
    if tau is None:
        raise StateError("no threshold given")
    candidates, s = score(E, refs)
    finals = np.where(accept(s, tau), candidates, UNKNOWN)
    return candidates, s, finals


def refs_to_bytes(refs: ReferenceSet) -> bytes:
    out = [REFS_MAGIC, struct.pack("<BII", REFS_VERSION, len(refs.references), refs.dim)]
    for ref in refs.references:
        out.append(struct.pack("<iqd", ref.class_id, ref.n, ref.sigma))
        out.append(np.ascontiguousarray(ref.r, dtype="<f8").tobytes())
    out.append(struct.pack("<d", math.nan if refs.tau is None else refs.tau))
    return b"".join(out)


def refs_from_bytes(data: bytes) -> ReferenceSet:
    data = bytes(data)
    pos = len(REFS_MAGIC)
    if data[:pos] != REFS_MAGIC:
        raise FormatError("bad references magic")

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated references block")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count, dim = struct.unpack("<BII", take(9))
    if version != REFS_VERSION:
        raise FormatError(f"unsupported references version {version}")
    refs = []
    for _ in range(count):
        class_id, n, sigma = struct.unpack("<iqd", take(20))
        r = np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)
        refs.append(ClassReference(class_id, r, sigma, n))
    (tau,) = struct.unpack("<d", take(8))
    if pos != len(data):
        raise FormatError("trailing bytes in references block")
    return ReferenceSet(tuple(refs), None if math.isnan(tau) else tau)
