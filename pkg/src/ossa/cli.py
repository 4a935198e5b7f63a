"""Command-line entry point: ``ossa <command> [--config FILE] [--set k=v] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .core import read_features, write_features
from .errors import ConfigError, IoError, OssaError
from .openset import refs_from_bytes
from .synthdata import extract_features, make_sample, read_pgm, write_pgm

log = logging.getLogger("ossa")


def _read(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {what} {path}: {exc.strerror}") from None


def _write(out, name, data):
    path = Path(out) / name
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8")
    else:
        path.write_bytes(data)
    log.info("wrote %s", path)
    return path


def cmd_synth(args, cfg):
    data = pipeline.make_dataset(cfg)
    path = Path(args.out) / "features.txt"
    write_features(data, path)
    if args.pgm:
        patch_dir = Path(args.out) / "patches"
        patch_dir.mkdir(exist_ok=True)
        seed = pipeline.derive_seed(cfg.seed, 0)
        for profile in cfg.dataset.seen + cfg.dataset.unseen:
            for i in range(args.pgm):
                patch = make_sample(profile, seed, i, cfg.dataset.patch_size, cfg.dataset.crop_size)
                write_pgm(patch, patch_dir / f"class{profile.class_id}_{i:03d}.pgm")
    print(f"features: {path} ({len(data)} samples, dim {data.dim}, digest {pipeline.dataset_digest(data)})")


def cmd_pretrain(args, cfg):
    if not cfg.pretrain.enabled:
        raise ConfigError("pretrain.enabled", "pretraining is disabled in this config")
    ckpt, history = pipeline.run_pretrain(cfg)
    _write(args.out, "pretrain.ckpt", ckpt)
    _write(args.out, "pretrain_log.csv", pipeline.log_csv(history, ("epoch", "lr", "loss", "acc")))
    last = history[-1] if history else {"loss": float("nan"), "acc": float("nan")}
    print(f"pretrain: {len(history)} epochs, final loss {last['loss']:.4f} acc {last['acc']:.3f}, "
          f"checkpoint {pipeline.digest(ckpt)}")


def cmd_train(args, cfg):
    data = pipeline.make_dataset(cfg)
    init = _read(args.init, "checkpoint") if args.init else None
    ckpt, refs, history, _ = pipeline.run_train(cfg, data, init)
    _write(args.out, "model.ckpt", ckpt)
    _write(args.out, "refs.bin", refs)
    _write(args.out, "train_log.csv", pipeline.log_csv(history, ("epoch", "lr", "loss")))
    mode = "pretrained" if init else "scratch"
    print(f"train ({mode}): checkpoint {pipeline.digest(ckpt)}, references {pipeline.digest(refs)}")


def cmd_eval(args, cfg):
    data = pipeline.make_dataset(cfg)
    ckpt = _read(args.checkpoint or Path(args.out) / "model.ckpt", "checkpoint")
    refs = _read(args.refs or Path(args.out) / "refs.bin", "references")
    report, curve_csv, hist_csv, summary = pipeline.run_eval(cfg, data, ckpt, refs)
    _write(args.out, "report.txt", report)
    _write(args.out, "curve.csv", curve_csv)
    _write(args.out, "hist.csv", hist_csv)
    print(f"eval: tau={summary['tau']:.4g} aF1={summary['af1']:.4f} CRR={summary['crr']:.4f} "
          f"auc={summary['auc']:.4f}")


def cmd_compare(args, cfg):
    report, _ = pipeline.run_compare(cfg)
    _write(args.out, "compare.txt", report)
    sys.stdout.write(report)


def cmd_attribute(args, cfg):
    ckpt = _read(args.checkpoint or Path(args.out) / "model.ckpt", "checkpoint")
    refs = refs_from_bytes(_read(args.refs or Path(args.out) / "refs.bin", "references"))
    source = Path(args.input)
    if not source.is_file():
        raise IoError(f"cannot read input {source}")
    if source.suffix.lower() == ".pgm":
        X = extract_features(read_pgm(source))[None, :]
    else:
        try:
            X = read_features(source).X
        except UnicodeDecodeError:
            raise IoError(f"{source} is not a text feature file") from None
    tau = args.tau if args.tau is not None else refs.tau
    if tau is None:
        tau = cfg.eval.tau or cfg.eval.default_tau
    rows = pipeline.attribute(ckpt, refs, X, tau)
    for i, (candidate, s, accepted) in enumerate(rows):
        print(f"{i} {candidate} {s!r} {'ACCEPT' if accepted else 'UNKNOWN'}")


COMMANDS = {
    "synth": (cmd_synth, "build a synthetic feature dataset"),
    "pretrain": (cmd_pretrain, "pretext pretraining of the embedding network"),
    "train": (cmd_train, "metric-learning fine-tuning and class references"),
    "eval": (cmd_eval, "threshold sweep, AUC and histograms on the test split"),
    "compare": (cmd_compare, "scratch vs pretrained protocols on identical data"),
    "attribute": (cmd_attribute, "attribute samples to a known class or UNKNOWN"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=int, help="overrides experiment.seed")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ossa", description="Open-set source attribution.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}
    subs["synth"].add_argument("--pgm", type=int, default=0, metavar="N",
                               help="also write N sample patches per class as PGM")
    subs["train"].add_argument("--init", type=Path, help="pretrained checkpoint (head is removed)")
    for name in ("eval", "attribute"):
        subs[name].add_argument("--checkpoint", type=Path, help="default: OUT/model.ckpt")
        subs[name].add_argument("--refs", type=Path, help="default: OUT/refs.bin")
    subs["attribute"].add_argument("--input", required=True, help="feature file or .pgm patch")
    subs["attribute"].add_argument("--tau", type=float, help="default: threshold stored in references")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](args, cfg)
    except OssaError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
