"""Config parsing, run drivers, output determinism, and the CLI."""

import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from orthoclf import losses, models, orthoweights
from orthoclf import data as dat
from orthoclf.harness import cli
from orthoclf.harness import run as hrun
from orthoclf.harness.config import build_head, config_hash, parse_config

REPO = Path(__file__).resolve().parents[1]

INI = """
[dataset]
kind = blobs
classes = 3
input_dim = 6
per_class = 20
per_class_test = 6
spread = 0.02
seed = 7

[encoder]
hidden = 8
feature_dim = 4
activation = prelu

[head]
kind = dense_orthogonal
t = 2
k = 3
s = 5.0

[loss]
mode = center_clean

[optimizer]
lr = 0.1
epochs = 8
batch_size = 10
decay_epochs = 6

[run]
seed = 11
out = {out}
eval_n = 0

[attack.pgd3]
method = pgd
norm = linf
epsilon = 0.05
iters = 3

[sweep]
s = 5.0
alpha = 0.5,1.0

[redundancy]
t_grid = 2,3
seeds = 2
"""


def _write_ini(tmp_path, body=INI, name="run.ini", out="run_out"):
    p = tmp_path / name
    p.write_text(body.format(out=out) if "{out}" in body else body)
    return p


def _mutate(body, old, new):
    assert old in body
    return body.replace(old, new)


# ---------------------------------------------------------------- substream

def test_substream_is_deterministic_and_tag_sensitive():
    a = hrun.substream(42, 1, 5)
    assert a == hrun.substream(42, 1, 5)
    assert a != hrun.substream(42, 1, 6)
    assert a != hrun.substream(43, 1, 5)
    assert 0 <= a < 2 ** 64
    streams = {hrun.substream(0, hrun.STREAM_INIT),
               hrun.substream(0, hrun.STREAM_SHUFFLE, 0),
               hrun.substream(0, hrun.STREAM_ATTACK, 0),
               hrun.substream(0, hrun.STREAM_GRID, 0, 0, 0)}
    assert len(streams) == 4


# ------------------------------------------------------------ config parse

def test_parse_config_happy_path(tmp_path):
    cfg = parse_config(_write_ini(tmp_path))
    assert cfg.dataset["kind"] == "blobs" and cfg.dataset["classes"] == 3
    assert cfg.spec == models.EncoderSpec(6, (8,), "prelu", 4)
    assert cfg.head_kind == orthoweights.KIND_DENSE
    assert (cfg.head_t, cfg.head_k, cfg.head_s, cfg.head_p) == (2, 3, 5.0, 4)
    assert cfg.loss.mode == "center_clean"
    assert (cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size) == (0.1, 0.0, 8, 10)
    assert cfg.decay_epochs == (6,)
    assert (cfg.seed, cfg.out, cfg.eval_n) == (11, "run_out", 0)
    assert len(cfg.attacks) == 1
    label, acfg = cfg.attacks[0]
    assert label == "pgd3"
    assert (acfg.method, acfg.norm, acfg.epsilon, acfg.iters) == ("pgd", "linf", 0.05, 3)
    assert acfg.random_start is True and acfg.overshoot == 0.02
    assert cfg.sweep == {"s": [5.0], "alpha": [0.5, 1.0]}
    assert cfg.redundancy == {"t_grid": [2, 3], "seeds": 2}


def test_parse_config_overrides_and_hash(tmp_path):
    path = _write_ini(tmp_path)
    base = parse_config(path)
    over = parse_config(path, seed=99, out="elsewhere")
    assert (over.seed, over.out) == (99, "elsewhere")
    assert config_hash(base) == config_hash(parse_config(path))
    assert config_hash(base) != config_hash(over)  # seed is part of the run identity
    json.dumps(base.canonical(), sort_keys=True)  # canonical form must be JSON-able


def test_parse_config_defaults(tmp_path):
    body = """
[dataset]
kind = blobs
classes = 2
input_dim = 4
per_class = 5

[encoder]
feature_dim = 4

[head]
kind = dense_orthogonal
t = 2
k = 2

[optimizer]
epochs = 1
batch_size = 5
"""
    cfg = parse_config(_write_ini(tmp_path, body, name="mini.ini"))
    assert cfg.spec.hidden == () and cfg.spec.activation == "prelu"
    assert cfg.head_s == 10.0
    assert cfg.loss.mode == "softmax_ce" and cfg.loss.alpha == 1.0
    assert (cfg.lr, cfg.momentum) == (0.1, 0.0)
    assert (cfg.seed, cfg.out, cfg.eval_n) == (0, "run_out", 0)
    assert cfg.attacks == [] and cfg.sweep is None and cfg.redundancy is None


@pytest.mark.parametrize(
    "old,new,msg",
    [
        ("[sweep]", "[grid]", r"unknown config section \[grid\]"),
        ("lr = 0.1", "lr = 0.1\nnesterov = yes", r"unknown config key \[optimizer\] nesterov"),
        ("kind = blobs", "kind = parquet", "unknown dataset kind 'parquet'"),
        ("classes = 3\n", "", r"missing config key \[dataset\] classes"),
        ("kind = dense_orthogonal", "kind = dense", "unknown head kind 'dense'"),
        ("s = 5.0", "s = -1", "head s must be positive"),
        ("t = 2\n", "", r"missing config key \[head\] t"),
        ("feature_dim = 4", "feature_dim = 8", "encoder feature_dim 8 != head dimension 4"),
        ("epochs = 8", "epochs = 0", "epochs must be >= 1"),
        ("batch_size = 10", "batch_size = 0", "batch size must be >= 1"),
        ("iters = 3", "iters = 3\nrandom_start = maybe",
         r"bad boolean \[attack.pgd3\] random_start = maybe"),
    ],
)
def test_parse_config_rejections(tmp_path, old, new, msg):
    path = _write_ini(tmp_path, _mutate(INI, old, new), name="bad.ini")
    with pytest.raises(ValueError, match=msg):
        parse_config(path)


def test_parse_config_missing_referenced_file(tmp_path):
    body = """
[dataset]
kind = idx
train_images = nowhere/img.idx
train_labels = nowhere/lbl.idx

[encoder]
feature_dim = 4

[head]
kind = dense_orthogonal
t = 2
k = 2

[optimizer]
epochs = 1
batch_size = 5
"""
    with pytest.raises(ValueError, match="referenced file does not exist"):
        parse_config(_write_ini(tmp_path, body, name="missing.ini"))


def test_parse_config_maxmaha_needs_p(tmp_path):
    body = _mutate(INI, "kind = dense_orthogonal", "kind = max_mahalanobis_ut")
    body = _mutate(body, "t = 2\n", "")
    with pytest.raises(ValueError, match=r"missing config key \[head\] p"):
        parse_config(_write_ini(tmp_path, body, name="mm.ini"))
    ok = _mutate(body, "k = 3", "k = 3\np = 4")
    cfg = parse_config(_write_ini(tmp_path, ok, name="mm_ok.ini"))
    assert cfg.head_kind == orthoweights.KIND_MAXMAHA and cfg.head_p == 4


def test_build_head_kinds(tmp_path):
    cfg = parse_config(_write_ini(tmp_path))
    w = build_head(cfg)
    assert w.kind == orthoweights.KIND_DENSE and (w.P, w.K) == (4, 3)


def test_shipped_configs_parse(tmp_path):
    shutil.copy(REPO / "configs" / "blobs_smoke.ini", tmp_path / "blobs_smoke.ini")
    cfg = parse_config(tmp_path / "blobs_smoke.ini")
    assert cfg.dataset["kind"] == "blobs" and cfg.head_p == 16

    # digits config ships with relative data paths; stage the tree it expects
    cfg_dir = tmp_path / "configs"
    cfg_dir.mkdir()
    shutil.copy(REPO / "configs" / "digits_robust.ini", cfg_dir / "digits_robust.ini")
    ddir = tmp_path / "data" / "digits"
    ddir.mkdir(parents=True)
    imgs = np.zeros((4, 8, 8), dtype=np.uint8)
    lbl = np.arange(4, dtype=np.uint8)
    dat.write_idx(imgs, lbl, ddir / "train-images.idx", ddir / "train-labels.idx")
    dat.write_idx(imgs, lbl, ddir / "test-images.idx", ddir / "test-labels.idx")
    cfg = parse_config(cfg_dir / "digits_robust.ini")
    assert cfg.loss.mode == "center_worst_case" and cfg.loss.alpha == 0.15
    assert [lbl for lbl, _ in cfg.attacks] == ["pgd20_linf", "fgsm"]


# ------------------------------------------------------------ data loading

def test_load_dataset_blobs_split_shares_centroids():
    ds = {"kind": "blobs", "classes": 3, "input_dim": 5, "per_class": 2,
          "per_class_test": 2, "spread": 0.0, "seed": 4}
    train, test = hrun.load_dataset(ds)
    assert len(train) == 6 and len(test) == 6
    assert train.split == "train" and test.split == "test"
    for c in range(3):
        assert np.array_equal(train.inputs[train.labels == c],
                              test.inputs[test.labels == c])


def test_load_dataset_resize_and_take_first(digits_idx_dir):
    ds = {"kind": "idx",
          "train_images": str(digits_idx_dir / "train-images.idx"),
          "train_labels": str(digits_idx_dir / "train-labels.idx"),
          "resize": 4, "take_first": 100}
    train, test = hrun.load_dataset(ds)
    assert test is None
    assert train.inputs.shape == (100, 16)


# ------------------------------------------------------- training drivers

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness_run")
    out = root / "out_a"
    ini = _write_ini(root, out=str(out))
    cfg = parse_config(ini)
    manifest = hrun.cmd_train(cfg)
    return ini, cfg, out, manifest


def test_cmd_train_writes_everything(trained_run):
    _, cfg, out, manifest = trained_run
    for name in ("weights.ortw", "metrics.csv", "checkpoint.ortm", "attacks.csv",
                 "samples_pgd3.csv", "summary.csv", "manifest.json"):
        assert (out / name).exists(), name
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_acc"
    assert len(lines) == 1 + cfg.epochs
    # decay fires at epoch 6: lr column drops by exactly 10x
    lrs = [float(l.split(",")[1]) for l in lines[1:]]
    assert lrs[:6] == [0.1] * 6 and lrs[6] == pytest.approx(0.01)
    srow = (out / "summary.csv").read_text().splitlines()
    assert srow[0] == "final_train_acc,eval_acc,mean_intra_dist,min_inter_center_dist,inner_pgd_runs"
    vals = srow[1].split(",")
    assert float(vals[0]) == 1.0  # separable blobs must be fit exactly
    assert vals[4] == "0"  # clean center loss never runs the inner maximizer
    assert float(vals[3]) == pytest.approx(np.sqrt(2) * 5.0)
    assert manifest["config_hash"] == config_hash(cfg)
    assert "wall_time_s" in manifest and manifest["backend"] in ("numpy", "numba")
    saved = json.loads((out / "manifest.json").read_text())
    assert set(saved["outputs"]) == {
        "weights.ortw", "metrics.csv", "checkpoint.ortm", "attacks.csv",
        "samples_pgd3.csv", "summary.csv",
    }


def test_cmd_train_rerun_is_byte_identical(trained_run, tmp_path):
    ini, _, out, manifest = trained_run
    out2 = tmp_path / "out_b"
    cfg2 = parse_config(ini, out=str(out2))
    manifest2 = hrun.cmd_train(cfg2)
    for name in ("weights.ortw", "metrics.csv", "checkpoint.ortm", "attacks.csv",
                 "samples_pgd3.csv", "summary.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes(), name
    assert manifest["outputs"] == manifest2["outputs"]


def test_cmd_train_head_is_frozen_on_disk(trained_run):
    _, cfg, out, _ = trained_run
    w = orthoweights.load_weights(out / "weights.ortw")
    assert np.array_equal(w.matrix, build_head(cfg).matrix)


def test_cmd_attack_reproduces_training_numbers(trained_run, tmp_path):
    ini, cfg, out, _ = trained_run
    out2 = tmp_path / "re_attack"
    cfg2 = parse_config(ini, out=str(out2))
    rows = hrun.cmd_attack(cfg2, out / "checkpoint.ortm")
    assert (out / "attacks.csv").read_bytes() == (out2 / "attacks.csv").read_bytes()
    assert (out / "samples_pgd3.csv").read_bytes() == (out2 / "samples_pgd3.csv").read_bytes()
    assert rows[0][0] == "pgd3" and 0.0 <= rows[0][5] <= rows[0][4] <= 1.0


def test_cmd_attack_rejects_wrong_head(trained_run, tmp_path):
    ini, _, out, _ = trained_run
    bad = _mutate(INI, "s = 5.0", "s = 6.0")
    path = tmp_path / "wrong_head.ini"
    path.write_text(bad.format(out=str(tmp_path / "x")))
    cfg = parse_config(path)
    with pytest.raises(ValueError, match="head weights digest mismatch"):
        hrun.cmd_attack(cfg, out / "checkpoint.ortm")


def test_cmd_attack_rejects_wrong_encoder(trained_run, tmp_path):
    ini, _, out, _ = trained_run
    bad = _mutate(INI, "hidden = 8", "hidden = 9")
    path = tmp_path / "wrong_enc.ini"
    path.write_text(bad.format(out=str(tmp_path / "y")))
    cfg = parse_config(path)
    with pytest.raises(ValueError, match="encoder spec mismatch"):
        hrun.cmd_attack(cfg, out / "checkpoint.ortm")


def test_cmd_redundancy_smoke(tmp_path):
    out = tmp_path / "red"
    cfg = parse_config(_write_ini(tmp_path, out=str(out)))
    agg = hrun.cmd_redundancy(cfg)
    # grid of T in {2,3} x two head kinds, upper-triangular first
    assert [(t, kind) for t, kind, *_ in agg] == [
        (2, orthoweights.KIND_MAXMAHA), (2, orthoweights.KIND_DENSE),
        (3, orthoweights.KIND_MAXMAHA), (3, orthoweights.KIND_DENSE),
    ]
    for _, _, mtr, sdtr, mte, sdte in agg:
        assert 0.0 <= mtr <= 1.0 and 0.0 <= mte <= 1.0
        assert sdtr >= 0.0 and sdte >= 0.0
    runs = (out / "redundancy_runs.csv").read_text().splitlines()
    assert runs[0] == "t,head,rep,train_acc,test_acc"
    assert len(runs) == 1 + 2 * 2 * 2
    assert (out / "redundancy.csv").read_text().splitlines()[0] == \
        "t,head,mean_train,sd_train,mean_test,sd_test"


def test_cmd_redundancy_requires_section(tmp_path):
    body = INI.replace("[redundancy]\nt_grid = 2,3\nseeds = 2", "")
    cfg = parse_config(_write_ini(tmp_path, body, name="nored.ini"))
    with pytest.raises(ValueError, match=r"config has no \[redundancy\] section"):
        hrun.cmd_redundancy(cfg)


def test_cmd_sweep_smoke(tmp_path):
    out = tmp_path / "sweep"
    body = _mutate(INI, "mode = center_clean",
                   "mode = center_clean\nepsilon = 0.05\ninner_iters = 2")
    cfg = parse_config(_write_ini(tmp_path, body, name="sweep.ini", out=str(out)))
    rows = hrun.cmd_sweep(cfg)
    assert [(r[0], r[1]) for r in rows] == [(5.0, 0.5), (5.0, 1.0)]
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "s,alpha,train_acc,clean_acc,robust_pgd3"
    assert len(lines) == 3


def test_cmd_sweep_requires_sections(tmp_path):
    body = INI.replace("[sweep]\ns = 5.0\nalpha = 0.5,1.0", "")
    cfg = parse_config(_write_ini(tmp_path, body, name="nosweep.ini"))
    with pytest.raises(ValueError, match=r"config has no \[sweep\] section"):
        hrun.cmd_sweep(cfg)
    body2 = INI.split("[attack.pgd3]")[0] + "[sweep]\ns = 5.0\nalpha = 1.0\n"
    cfg2 = parse_config(_write_ini(tmp_path, body2, name="noatk.ini"))
    with pytest.raises(ValueError, match=r"sweep needs at least one \[attack\.\*\] section"):
        hrun.cmd_sweep(cfg2)


def test_cmd_feature_stats_smoke(trained_run, tmp_path):
    ini, cfg, out, _ = trained_run
    out2 = tmp_path / "fstats"
    cfg2 = parse_config(ini, out=str(out2))
    rows = hrun.cmd_feature_stats(cfg2, out / "checkpoint.ortm")
    assert len(rows) == 3
    for c, count, mean_d, max_d in rows:
        assert count > 0 and 0.0 <= mean_d <= max_d
    lines = (out2 / "center_distances.csv").read_text().splitlines()
    assert lines[0] == "class,0,1,2"
    first = [float(v) for v in lines[1].split(",")]
    assert first[1] == 0.0  # self-distance
    assert first[2] == pytest.approx(np.sqrt(2) * 5.0)


# ---------------------------------------------------------------- the CLI

def test_cli_weights_ok(tmp_path, capsys):
    p = tmp_path / "head.ortw"
    rc = cli.main(["weights", "--t", "3", "--k", "5", "--s", "2.0", "--out", str(p)])
    cap = capsys.readouterr()
    assert rc == 0 and p.exists()
    assert f"wrote {p}: kind=dense_orthogonal P=8 K=5 s=2.0" in cap.out
    assert "[ok] gram_orthogonal" in cap.out and "[FAIL]" not in cap.out
    w = orthoweights.load_weights(p)
    assert (w.P, w.K) == (8, 5)


def test_cli_weights_maxmaha(tmp_path, capsys):
    p = tmp_path / "mm.ortw"
    rc = cli.main(["weights", "--kind", "max_mahalanobis_ut", "--k", "4",
                   "--p", "8", "--s", "1.0", "--out", str(p)])
    assert rc == 0
    assert "[ok] support_upper_triangular" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv,msg",
    [
        (["weights", "--k", "5", "--out", "x.ortw"], "dense_orthogonal needs --t"),
        (["weights", "--kind", "max_mahalanobis_ut", "--k", "4", "--out", "x.ortw"],
         "needs an explicit feature dim p"),
        (["weights", "--t", "2", "--k", "9", "--out", "x.ortw"],
         "insufficient columns"),
    ],
)
def test_cli_weights_errors(tmp_path, capsys, argv, msg, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = cli.main(argv)
    cap = capsys.readouterr()
    assert rc == 1
    assert cap.err.startswith("error: ") and msg in cap.err


def test_cli_missing_config_is_handled(capsys):
    rc = cli.main(["train", "--config", "/nonexistent/run.ini"])
    cap = capsys.readouterr()
    assert rc == 1 and cap.err.startswith("error: ")


def test_cli_attack_prints_rows(trained_run, tmp_path, capsys):
    ini, _, out, _ = trained_run
    rc = cli.main(["attack", "--config", str(ini), "--out", str(tmp_path / "cliatk"),
                   "--checkpoint", str(out / "checkpoint.ortm")])
    cap = capsys.readouterr()
    assert rc == 0
    assert cap.out.startswith("pgd3: pgd-linf eps=0.05 clean=")


def test_cli_train_subprocess(tmp_path):
    out = tmp_path / "cli_out"
    ini = _write_ini(tmp_path, out=str(out))
    res = subprocess.run(
        [sys.executable, "-m", "orthoclf.harness.cli", "train",
         "--config", str(ini), "--seed", "3"],
        capture_output=True, text=True, cwd=str(tmp_path),
    )
    assert res.returncode == 0, res.stderr
    assert res.stdout.startswith("trained -> ")
    assert (out / "summary.csv").exists()


def test_script_writes_digits_corpus(tmp_path):
    pytest.importorskip("sklearn.datasets")
    res = subprocess.run(
        [sys.executable, str(REPO / "scripts" / "make_digits_idx.py"),
         "--out", str(tmp_path / "digits")],
        capture_output=True, text=True,
    )
    assert res.returncode == 0, res.stderr
    train = dat.load_idx(tmp_path / "digits" / "train-images.idx",
                         tmp_path / "digits" / "train-labels.idx")
    test = dat.load_idx(tmp_path / "digits" / "test-images.idx",
                        tmp_path / "digits" / "test-labels.idx")
    assert len(train) == 1437 and len(test) == 360
    assert train.num_classes == 10
