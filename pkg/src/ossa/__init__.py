"""Open-set source attribution with metric learning and normalized-distance rejection."""

from .core import UNKNOWN, LabeledDataset, l2_distance, squared_l2_distance, stratified_undersample
from .estimator import OpenSetAttributor, PretextPretrainer
from .openset import ReferenceSet, compute_references, decide, identify, normalized_distance

__all__ = [
    "UNKNOWN",
    "LabeledDataset",
    "OpenSetAttributor",
    "PretextPretrainer",
    "ReferenceSet",
    "compute_references",
    "decide",
    "identify",
    "l2_distance",
    "normalized_distance",
    "squared_l2_distance",
    "stratified_undersample",
]

__version__ = "0.1.0"
