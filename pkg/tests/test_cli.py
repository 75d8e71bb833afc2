import csv
import json

import numpy as np
import pytest

from slfr.cli import main, read_config, ConfigError
from slfr.data import load_split
from slfr.model import MfModel

SIM = ["--n-users", "50", "--n-items", "70", "--d-true", "4", "--exposure-k", "8", "--rec-epochs", "3"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--out", str(root / "sim"), *SIM]) == 0
    assert main(["pretrain", "--split", str(root / "sim" / "split"), "--out", str(root / "pre"),
                 "--dz", "8", "--hidden", "12", "--epochs", "3"]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_outputs(sim):
    out = sim / "sim"
    for name in ("world.npz", "interactions.csv", "round_stats.csv", "true_labels.csv",
                 "split/meta.json", "manifest.json", "config.ini"):
        assert (out / name).exists(), name
    rows = read_rows(out / "round_stats.csv")
    assert [r["round"] for r in rows] == ["1", "2", "3"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert any(f["path"] == "round_stats.csv" for f in manifest["files"])


def test_pretrain_outputs(sim):
    for name in ("vae_user.npz", "vae_item.npz", "reps.npz", "vae_user.log.csv"):
        assert (sim / "pre" / name).exists()


def test_pretrain_alpha_zero_and_single_side(sim, tmp_path):
    rc = main(["pretrain", "--split", str(sim / "sim" / "split"), "--out", str(tmp_path),
               "--side", "user", "--alpha", "0", "--dz", "4", "--hidden", "6", "--epochs", "1"])
    assert rc == 0
    assert (tmp_path / "vae_user.npz").exists() and not (tmp_path / "reps.npz").exists()


def test_pretrain_missing_split(tmp_path):
    assert main(["pretrain", "--split", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_prepare_roundtrip_and_determinism(sim, tmp_path):
    args = ["prepare", "--input", str(sim / "sim" / "interactions.csv"), "--seed", "4"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for name in ("train.csv", "valid.csv", "test.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_split(tmp_path / "a").n_users == 50


def test_prepare_dense_ratings(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.integers(0, 6, (12, 15)) * (rng.random((12, 15)) < 0.6)
    np.savetxt(tmp_path / "train.ascii", mat, fmt="%d")
    rc = main(["prepare", "--input", str(tmp_path / "train.ascii"), "--format", "dense",
               "--rule", "rating_ge_4", "--out", str(tmp_path / "s")])
    assert rc == 0
    s = load_split(tmp_path / "s")
    assert s.train.feedback_kind == "implicit" and s.n_items == 15


def test_prepare_bad_rule(sim, tmp_path, capsys):
    rc = main(["prepare", "--input", str(sim / "sim" / "interactions.csv"), "--rule", "nope",
               "--out", str(tmp_path)])
    assert rc == 2
    assert "rating_ge_4" in capsys.readouterr().err


def test_train_gamma_zero_equals_plain_pipeline(sim, tmp_path):
    split = str(sim / "sim" / "split")
    common = ["--split", split, "--dim", "8", "--epochs", "4", "--seed", "2"]
    assert main(["train", *common, "--gamma", "0", "--out", str(tmp_path / "g0")]) == 0
    assert main(["train", *common, "--reps", str(sim / "pre" / "reps.npz"), "--gamma", "0",
                 "--out", str(tmp_path / "g0r")]) == 0
    a, b = MfModel.load(tmp_path / "g0" / "model.npz"), MfModel.load(tmp_path / "g0r" / "model.npz")
    np.testing.assert_array_equal(a.W, b.W)
    log = read_rows(tmp_path / "g0" / "model.log.csv")
    assert list(log[0]) == ["epoch", "loss_normal", "loss_bias", "loss_total", "valid_recall@10",
                            "valid_ndcg@10", "seconds"]


def test_train_needs_reps_for_positive_gamma(sim, tmp_path):
    rc = main(["train", "--split", str(sim / "sim" / "split"), "--gamma", "1", "--out", str(tmp_path)])
    assert rc == 2


def test_eval_external_labels(sim, tmp_path):
    split = str(sim / "sim" / "split")
    assert main(["train", "--split", split, "--reps", str(sim / "pre" / "reps.npz"), "--gamma", "0.5",
                 "--dim", "8", "--epochs", "3", "--out", str(tmp_path / "m")]) == 0
    rc = main(["eval", "--model", str(tmp_path / "m" / "model.npz"), "--split", split,
               "--labels", str(sim / "sim" / "true_labels.csv"), "--Ks", "5,10", "--out", str(tmp_path / "e")])
    assert rc == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["label_source"] == "external" and set(rep["metrics"]) == {"5", "10"}
    assert len(read_rows(tmp_path / "e" / "reports.csv")) == 1


def test_sweep_full_gamma_grid(sim, tmp_path):
    rc = main(["sweep", "--param", "gamma", "--split", str(sim / "sim" / "split"),
               "--reps", str(sim / "pre" / "reps.npz"), "--dim", "8", "--epochs", "1",
               "--labels", str(sim / "sim" / "true_labels.csv"), "--out", str(tmp_path)])
    assert rc == 0
    rows = read_rows(tmp_path / "sweep.csv")
    assert [float(r["gamma"]) for r in rows] == pytest.approx([0.2 * k for k in range(11)])
    assert main(["report", "--runs", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "report.csv")) == 11
    assert "ndcg@10" in (tmp_path / "report.txt").read_text()


def test_sweep_alpha(sim, tmp_path):
    rc = main(["sweep", "--param", "alpha", "--grid", "1,5", "--split", str(sim / "sim" / "split"),
               "--gamma", "0.5", "--dim", "8", "--epochs", "1", "--dz", "8", "--hidden", "8",
               "--vae-epochs", "1", "--out", str(tmp_path)])
    assert rc == 0
    rows = read_rows(tmp_path / "sweep.csv")
    assert len(rows) == 2 and "index_code_mi_user" in rows[0]


def test_config_file_and_override(sim, tmp_path, monkeypatch):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[run]\nout = {tmp_path / 'c'}\nseed = 5\n\n[synth]\nn_users = 30\nn_items = 40\n"
                   "d_true = 3\nexposure_k = 4\nrec_epochs = 2\n")
    assert main(["simulate", "--config", str(cfg), "--n-users", "25"]) == 0
    resolved = (tmp_path / "c" / "config.ini").read_text()
    assert "n_users = 25" in resolved and "n_items = 40" in resolved and "seed = 5" in resolved
    monkeypatch.setenv("SLFR_SEED", "9")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["seed"] == 9
    assert main(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "manifest.json").read_text())["seed"] == 1


def test_simulate_replayable(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--out", str(tmp_path / name), *SIM]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())["files"]
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())["files"]
    digests = lambda m: {f["path"]: f["sha1"] for f in m if f["path"] != "config.ini"}
    assert digests(ma) == digests(mb)


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\ngama = 1\n")
    with pytest.raises(ConfigError, match="gama"):
        read_config(cfg)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("[extras]\na = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_bad_value_and_missing_out(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[synth]\nn_users = many\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["simulate"]) == 2
    assert main(["simulate", "--out", str(tmp_path), "--rounds", "0"]) == 2


def test_numerical_abort_exit_code(sim, tmp_path):
    rc = main(["train", "--split", str(sim / "sim" / "split"), "--lr", "1e200", "--dim", "4",
               "--epochs", "3", "--out", str(tmp_path)])
    assert rc == 3
