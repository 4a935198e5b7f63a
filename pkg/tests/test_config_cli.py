import hashlib

import numpy as np
import pytest

from ossa import pipeline
from ossa.cli import main
from ossa.config import load_config, parse_config
from ossa.core import LabeledDataset, write_features
from ossa.errors import CheckpointError, ConfigError, DimError
from ossa.metric import PRETRAINED_SCHEDULE, SCRATCH_SCHEDULE
from ossa.net import init_model, save_checkpoint
from ossa.openset import refs_from_bytes

TINY = """
[dataset]
counts = 20, 4, 8
unseen_test = 10
patch_size = 40
crop_size = 32
seen_profiles = 2/6/2, 4/10/3
unseen_profiles = 8/12/2

[model]
hidden = 16
embedding_dim = 8

[pretrain]
pretext_classes = 2
samples_per_class = 8
epochs = 1

[finetune]
epochs = 2

[eval]
grid_points = 15
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- config ------------------------------------------------------------------


def test_defaults():
    cfg = parse_config()
    assert cfg.seed == 0 and cfg.dataset.path is None
    assert cfg.dataset.counts == (500, 100, 100) and cfg.dataset.unseen_test == 200
    assert cfg.finetune.scratch == SCRATCH_SCHEDULE
    assert cfg.finetune.pretrained == PRETRAINED_SCHEDULE
    assert cfg.eval.tau is None and cfg.eval.grid_points == 200
    assert len(cfg.dataset.seen) == 5 and len(cfg.dataset.unseen) == 2


@pytest.mark.parametrize(
    "text, overrides, field",
    [
        ("", ["dataset.path=missing.txt"], "dataset.path"),
        ("[finetune]\nepochs = many\n", [], "finetune.epochs"),
        ("", ["finetune.temperature=0"], "finetune.temperature"),
        ("", ["pretrain.decay=1.5"], "pretrain.decay"),
        ("", ["model.bogus=1"], "model.bogus"),
        ("[extra]\nx = 1\n", [], "extra"),
        ("", ["dataset.counts=1,2"], "dataset.counts"),
        ("", ["dataset.seen_profiles=2/x/1"], "dataset.seen_profiles"),
        ("", ["eval.grid_max=0.01"], "eval.grid_max"),
        ("", ["noequals"], "noequals"),
        ("", ["dataset.synth=false"], "dataset"),
    ],
)
def test_config_errors_name_the_field(tmp_path, text, overrides, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text, overrides, tmp_path)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_overrides_and_digest(tiny_cfg):
    cfg = load_config(tiny_cfg, ["finetune.epochs=5"], seed=7)
    assert cfg.finetune.epochs == 5 and cfg.seed == 7
    assert cfg.hidden == (16,)
    assert cfg.digest == load_config(tiny_cfg, ["finetune.epochs=5"], seed=7).digest
    assert cfg.digest != load_config(tiny_cfg, seed=7).digest


def test_profiles_parse(tiny_cfg):
    cfg = load_config(tiny_cfg)
    assert [(p.class_id, p.period, p.amplitude) for p in cfg.dataset.seen] == [(0, 2, 6.0), (1, 4, 10.0)]
    assert [p.class_id for p in cfg.dataset.unseen] == [2]


# -- pipeline ----------------------------------------------------------------


def test_train_protocols_and_refs_round_trip(tiny_cfg):
    cfg = load_config(tiny_cfg)
    data = pipeline.make_dataset(cfg)
    ckpt, refs, history, est = pipeline.run_train(cfg, data)
    assert est.schedule().base_lr == 7e-4 and history[0]["lr"] == 7e-4
    back = refs_from_bytes(refs)
    assert back.class_ids.tolist() == [0, 1]
    np.testing.assert_array_equal(back.centroids, est.references_.centroids)

    pre, _ = pipeline.run_pretrain(cfg)
    _, _, history, est = pipeline.run_train(cfg, data, pre)
    assert est.schedule().base_lr == 1e-4 and history[0]["lr"] == 1e-4


def test_train_rejects_incompatible_checkpoint(tiny_cfg):
    cfg = load_config(tiny_cfg)
    data = pipeline.make_dataset(cfg)
    with pytest.raises(CheckpointError):
        pipeline.run_train(cfg, data, save_checkpoint(init_model([5, 8], 0)))


def test_eval_dim_mismatch(tiny_cfg):
    cfg = load_config(tiny_cfg)
    data = pipeline.make_dataset(cfg)
    ckpt, refs, _, _ = pipeline.run_train(cfg, data)
    other = load_config(tiny_cfg, ["model.embedding_dim=5"])
    ckpt5, _, _, _ = pipeline.run_train(other, data)
    with pytest.raises(DimError):
        pipeline.run_eval(cfg, data, ckpt5, refs)


def toy_separable(tmp_path):
    rng = np.random.default_rng(0)
    centres = {0: [0, 0, 0, 0], 1: [30, 0, 0, 0], 2: [0, 30, 0, 0], 3: [0, 0, 0, 200]}
    X, y, split, seen = [], [], [], []
    for c, centre in centres.items():
        layout = ["test"] * 10 if c == 3 else ["train"] * 30 + ["val"] * 5 + ["test"] * 10
        for s in layout:
            X.append(np.asarray(centre, float) + rng.normal(size=4))
            y.append(c)
            split.append(s)
            seen.append(c != 3)
    path = tmp_path / "toy.txt"
    write_features(LabeledDataset(np.array(X), y, split, seen), path)
    return path


def test_perfect_separation_report(tmp_path):
    path = toy_separable(tmp_path)
    cfg = parse_config("", [f"dataset.path={path}", "model.hidden=16", "model.embedding_dim=4",
                            "finetune.epochs=30"])
    data = pipeline.make_dataset(cfg)
    ckpt, refs, _, _ = pipeline.run_train(cfg, data)
    report, curve_csv, _, summary = pipeline.run_eval(cfg, data, ckpt, refs)
    assert any(a == 1.0 and c == 1.0 for _, a, c in summary["curve"].rows())
    assert summary["af1"] == 1.0 and summary["crr"] == 1.0
    assert len(curve_csv.splitlines()) == 1 + cfg.eval.grid_points
    assert "[curve] 200 points" in report


# -- CLI ---------------------------------------------------------------------


def test_cli_pretrain_smoke_and_rerun(tmp_path, tiny_cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pretrain", "--config", str(tiny_cfg), "--out", str(a)]) == 0
    assert main(["pretrain", "--config", str(tiny_cfg), "--out", str(b)]) == 0
    assert (a / "pretrain.ckpt").is_file()
    assert sha(a / "pretrain.ckpt") == sha(b / "pretrain.ckpt")
    assert (a / "pretrain_log.csv").read_text().splitlines()[0] == "epoch,lr,loss,acc"
    capsys.readouterr()


def test_cli_errors(tmp_path, tiny_cfg, capsys):
    out = str(tmp_path / "o")
    assert main(["pretrain", "--config", str(tiny_cfg), "--out", out, "--set", "dataset.path=nope.txt"]) == 1
    assert "error [config]: dataset.path" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(tiny_cfg), "--out", out, "--set", "pretrain.enabled=false"]) == 1
    assert "pretrain.enabled" in capsys.readouterr().err
    assert main(["eval", "--config", str(tiny_cfg), "--out", out]) == 1
    assert "error [io]" in capsys.readouterr().err


def test_cli_full_flow(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "run"
    common = ["--config", str(tiny_cfg), "--out", str(out)]
    assert main(["synth", *common, "--pgm", "2"]) == 0
    assert len(list((out / "patches").glob("*.pgm"))) == 6
    assert main(["pretrain", *common]) == 0
    assert main(["train", *common, "--init", str(out / "pretrain.ckpt")]) == 0
    assert main(["eval", *common]) == 0
    report = (out / "report.txt").read_text()
    assert report.startswith("OSSA-REPORT v1\n")
    for key in ("config_digest", "dataset_digest", "checkpoint_digest", "aF1:", "CRR:", "auc:",
                "[per_class_f1]", "[histogram]"):
        assert key in report
    first = sha(out / "report.txt")
    assert main(["eval", *common]) == 0
    assert sha(out / "report.txt") == first
    assert len((out / "curve.csv").read_text().splitlines()) == 16
    capsys.readouterr()

    features = out / "features.txt"
    assert main(["attribute", *common, "--input", str(features), "--tau", "2.0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    n_rows = sum(1 for line in features.read_text().splitlines() if line and not line.startswith(("#", "OSSA")))
    assert len(lines) == n_rows
    assert all(line.split()[3] in ("ACCEPT", "UNKNOWN") for line in lines)

    pgm = next((out / "patches").glob("class0_*.pgm"))
    assert main(["attribute", *common, "--input", str(pgm)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1


def test_cli_attribute_wrong_dim(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "run"
    common = ["--config", str(tiny_cfg), "--out", str(out)]
    assert main(["train", *common]) == 0
    bad = tmp_path / "bad.txt"
    write_features(LabeledDataset(np.zeros((2, 7)), [0, 1], ["test"] * 2, [True] * 2), bad)
    assert main(["attribute", *common, "--input", str(bad)]) == 1
    assert "error [dim]" in capsys.readouterr().err
    assert main(["attribute", *common, "--input", str(tmp_path / "absent.txt")]) == 1
    assert "error [io]" in capsys.readouterr().err


def test_cli_compare(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    text = (out / "compare.txt").read_text()
    assert text == capsys.readouterr().out
    assert text.startswith("OSSA-COMPARE v1\n")
    aucs = {}
    for line in text.splitlines():
        if line.startswith(("scratch:", "pretrained:")):
            name, rest = line.split(":", 1)
            aucs[name] = float(rest.split()[0].split("=")[1])
    assert set(aucs) == {"scratch", "pretrained"}
    assert all(0.0 <= v <= 1.0 for v in aucs.values())
    assert main(["compare", "--config", str(tiny_cfg), "--out", str(tmp_path / "cmp2")]) == 0
    assert (tmp_path / "cmp2" / "compare.txt").read_text() == text


def test_compare_uses_identical_data(tiny_cfg):
    cfg = load_config(tiny_cfg)
    _, results = pipeline.run_compare(cfg)
    assert results["scratch"]["dataset_digest"] == results["pretrained"]["dataset_digest"]
