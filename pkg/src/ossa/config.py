"""Experiment configuration: an INI file with one section per pipeline stage.

Example::

    [experiment]
    seed = 0

    [dataset]
    synth = auto          ; synthetic unless path is set
    path =                ; OSSA-FEAT feature file
    counts = 500, 100, 100
    unseen_test = 200

    [pretrain]
    enabled = true
    epochs = 30

    [finetune]
    epochs = 30

    [eval]
    tau =                 ; empty: pick the best operating point

Any key can be overridden with ``--set section.key=value``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .metric import PRETRAINED_SCHEDULE, SCRATCH_SCHEDULE
from .net import LrSchedule
from .pretrain import PRETRAIN_SCHEDULE
from .synthdata import DEFAULT_SEEN, DEFAULT_UNSEEN, GeneratorProfile

DEFAULTS = {
    "experiment": {"seed": "0"},
    "dataset": {
        "synth": "auto",
        "path": "",
        "counts": "500, 100, 100",
        "unseen_test": "200",
        "patch_size": "80",
        "crop_size": "64",
        "seen_profiles": "",
        "unseen_profiles": "",
    },
    "model": {"hidden": "128, 128", "embedding_dim": "64"},
    "pretrain": {
        "enabled": "true",
        "pretext_classes": "20",
        "samples_per_class": "100",
        "epochs": "30",
        "lr": repr(PRETRAIN_SCHEDULE.base_lr),
        "decay": repr(PRETRAIN_SCHEDULE.decay_factor),
        "interval": str(PRETRAIN_SCHEDULE.decay_interval),
        "batch_size": "32",
        "weight_decay": "0.01",
    },
    "finetune": {
        "epochs": "30",
        "scratch_lr": repr(SCRATCH_SCHEDULE.base_lr),
        "pretrained_lr": repr(PRETRAINED_SCHEDULE.base_lr),
        "decay": repr(PRETRAINED_SCHEDULE.decay_factor),
        "interval": str(PRETRAINED_SCHEDULE.decay_interval),
        "batch_size": "32",
        "weight_decay": "0.01",
        "squared_distance": "false",
        "temperature": "1.0",
        "normalize": "false",
        "undersample": "true",
    },
    "eval": {
        "tau": "",
        "default_tau": "2.0",
        "grid_min": "0.05",
        "grid_max": "20.0",
        "grid_points": "200",
        "hist_width": "0.25",
    },
}


@dataclass
class DatasetSpec:
    path: Path | None
    counts: tuple
    unseen_test: int
    patch_size: int
    crop_size: int
    seen: tuple
    unseen: tuple


@dataclass
class PretrainSpec:
    enabled: bool
    pretext_classes: int
    samples_per_class: int
    epochs: int
    schedule: LrSchedule
    batch_size: int
    weight_decay: float


@dataclass
class FinetuneSpec:
    epochs: int
    scratch: LrSchedule
    pretrained: LrSchedule
    batch_size: int
    weight_decay: float
    squared_distance: bool
    temperature: float
    normalize: bool
    undersample: bool


@dataclass
class EvalSpec:
    tau: float | None
    default_tau: float
    grid_min: float
    grid_max: float
    grid_points: int
    hist_width: float


@dataclass
class ExperimentConfig:
    seed: int
    dataset: DatasetSpec
    hidden: tuple
    embedding_dim: int
    pretrain: PretrainSpec
    finetune: FinetuneSpec
    eval: EvalSpec
    source_text: str = field(default="", repr=False)

    @property
    def digest(self):
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()


class _Fields:
    """Typed access to a ConfigParser that reports failures by field path."""

    def __init__(self, parser):
        self.parser = parser

    def raw(self, section, key):
        return self.parser.get(section, key).strip()

    def _convert(self, section, key, fn, what):
        try:
            return fn(self.raw(section, key))
        except (ValueError, TypeError):
            raise ConfigError(f"{section}.{key}", f"expected {what}, got {self.raw(section, key)!r}") from None

    def int(self, section, key, minimum=None):
        value = self._convert(section, key, int, "an integer")
        if minimum is not None and value < minimum:
            raise ConfigError(f"{section}.{key}", f"must be >= {minimum}")
        return value

    def float(self, section, key, positive=False):
        value = self._convert(section, key, float, "a number")
        if positive and not value > 0:
            raise ConfigError(f"{section}.{key}", "must be positive")
        return value

    def bool(self, section, key):
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"{section}.{key}", "expected true/false") from None

    def ints(self, section, key):
        raw = self.raw(section, key)
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected comma-separated integers, got {raw!r}") from None

    def schedule(self, section, lr_key):
        lr = self.float(section, lr_key, positive=True)
        decay = self.float(section, "decay", positive=True)
        if decay > 1:
            raise ConfigError(f"{section}.decay", "must be in (0, 1]")
        interval = self.int(section, "interval", minimum=1)
        return LrSchedule(lr, decay, interval)

    def profiles(self, section, key, default, first_id):
        """``period/amplitude/noise`` triples separated by commas."""
        raw = self.raw(section, key)
        if not raw:
            return default
        out = []
        for i, item in enumerate(raw.split(",")):
            try:
                period, amp, noise = item.strip().split("/")
                out.append(GeneratorProfile(first_id + i, int(period), float(amp),
                                            (i % int(period), 0), float(noise)))
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}", f"bad profile {item.strip()!r}: {exc}") from None
        return tuple(out)


def parse_config(text="", overrides=(), base_dir=Path(".")) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_dict(DEFAULTS)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(key or item, "override must look like section.key=value")
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError(f"{section}.{name}", "unknown setting")
        parser.set(section, name, value.strip())
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(section, "unknown section")
        for name in parser[section]:
            if name not in DEFAULTS[section]:
                raise ConfigError(f"{section}.{name}", "unknown setting")

    f = _Fields(parser)
    raw_path = f.raw("dataset", "path")
    synth = (not raw_path) if f.raw("dataset", "synth") == "auto" else f.bool("dataset", "synth")
    if synth == bool(raw_path):
        raise ConfigError("dataset", "set exactly one of dataset.path or dataset.synth = true")
    path = None
    if raw_path:
        path = Path(raw_path)
        if not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError("dataset.path", f"file not found: {raw_path}")
    counts = f.ints("dataset", "counts")
    if len(counts) != 3 or min(counts) < 0 or counts[0] < 2:
        raise ConfigError("dataset.counts", "expected train, val, test counts with train >= 2")
    seen = f.profiles("dataset", "seen_profiles", DEFAULT_SEEN, 0)
    unseen = f.profiles("dataset", "unseen_profiles", DEFAULT_UNSEEN, len(seen))
    dataset = DatasetSpec(
        path, counts, f.int("dataset", "unseen_test", minimum=0),
        f.int("dataset", "patch_size", minimum=32), f.int("dataset", "crop_size", minimum=32),
        seen, unseen,
    )
    if dataset.crop_size > dataset.patch_size:
        raise ConfigError("dataset.crop_size", "must not exceed dataset.patch_size")

    hidden = f.ints("model", "hidden")
    if any(h < 1 for h in hidden):
        raise ConfigError("model.hidden", "widths must be positive")

    pretrain = PretrainSpec(
        f.bool("pretrain", "enabled"),
        f.int("pretrain", "pretext_classes", minimum=2),
        f.int("pretrain", "samples_per_class", minimum=1),
        f.int("pretrain", "epochs", minimum=0),
        f.schedule("pretrain", "lr"),
        f.int("pretrain", "batch_size", minimum=1),
        f.float("pretrain", "weight_decay"),
    )
    finetune = FinetuneSpec(
        f.int("finetune", "epochs", minimum=0),
        f.schedule("finetune", "scratch_lr"),
        f.schedule("finetune", "pretrained_lr"),
        f.int("finetune", "batch_size", minimum=1),
        f.float("finetune", "weight_decay"),
        f.bool("finetune", "squared_distance"),
        f.float("finetune", "temperature", positive=True),
        f.bool("finetune", "normalize"),
        f.bool("finetune", "undersample"),
    )
    tau_raw = f.raw("eval", "tau")
    evaluation = EvalSpec(
        f.float("eval", "tau", positive=True) if tau_raw else None,
        f.float("eval", "default_tau", positive=True),
        f.float("eval", "grid_min", positive=True),
        f.float("eval", "grid_max", positive=True),
        f.int("eval", "grid_points", minimum=2),
        f.float("eval", "hist_width", positive=True),
    )
    if evaluation.grid_max <= evaluation.grid_min:
        raise ConfigError("eval.grid_max", "must exceed eval.grid_min")

    canonical = "\n".join(
        f"{section}.{key}={parser.get(section, key).strip()}"
        for section in sorted(DEFAULTS) for key in sorted(DEFAULTS[section])
    )
    return ExperimentConfig(
        f.int("experiment", "seed"), dataset, hidden, f.int("model", "embedding_dim", minimum=1),
        pretrain, finetune, evaluation, canonical,
    )


def load_config(path=None, overrides=(), seed=None) -> ExperimentConfig:
    text, base = "", Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("--config", f"file not found: {path}")
        text, base = path.read_text(encoding="utf-8"), path.parent
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"experiment.seed={seed}")
    return parse_config(text, overrides, base)
