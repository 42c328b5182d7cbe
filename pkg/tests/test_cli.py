"""End-to-end checks of the command line: config handling, artifacts,
exit codes, and byte-level reproducibility."""

import csv
import json
import os

import numpy as np
import pytest

from ufo import checkpoint, cli, data

CONFIG = """\
[dataset]
kind = "sine-mix"
n = 512
d_x = 2

[model]
width = 16
levels = 2
patch_len = 2
blocks = 1
heads = 2
spi = 1
samples = 4

[windows]
context_len = 16
horizon_len = 8
stride = 16

[train]
epochs = 2
batch_size = 8
val_samples = 4

[eval]
n_samples = 8

[seeds]
data = 1
model_init = 2
latent = 3
injection = 4
"""


@pytest.fixture(scope="session")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "run.toml"
    path.write_text(CONFIG)
    return str(path)


@pytest.fixture(scope="session")
def trained(config_path, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    assert cli.main(["train", "--config", config_path, "--out", out]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# -- configuration ----------------------------------------------------------

def test_missing_seed_field_is_named(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('[dataset]\nkind = "sine-mix"\n'
                    '[seeds]\ndata = 1\nmodel_init = 2\ninjection = 4\n')
    rc = cli.main(["synth", "--config", str(path),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "seeds.latent" in capsys.readouterr().err


def test_missing_dataset_path_is_named(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[dataset]\nn = 64\n[seeds]\ndata = 1\n"
                    "model_init = 2\nlatent = 3\ninjection = 4\n")
    rc = cli.main(["synth", "--config", str(path),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "dataset.path" in capsys.readouterr().err


def test_set_override_applies_and_casts(config_path):
    cfg = cli.load_config(config_path, ["train.epochs=5",
                                        "dataset.noise=0.25"])
    assert cfg["train"]["epochs"] == 5
    assert cfg["dataset"]["noise"] == 0.25


def test_malformed_set_flag(config_path, tmp_path, capsys):
    rc = cli.main(["synth", "--config", config_path,
                   "--set", "no_equals_sign",
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "--set" in capsys.readouterr().err


def test_bad_model_field(config_path, tmp_path, capsys):
    rc = cli.main(["train", "--config", config_path,
                   "--set", "model.width=19",
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "model" in capsys.readouterr().err


# -- synth ------------------------------------------------------------------

def test_synth_round_trips(config_path, tmp_path):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--config", config_path,
                     "--out", str(out)]) == 0
    ds = data.load_csv(str(out / "dataset.csv"))
    assert len(ds) == 512 and ds.n_channels == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["outputs"] == ["dataset.csv"]
    assert set(manifest["seeds"]) == set(cli.SEED_NAMES)


# -- train ------------------------------------------------------------------

def test_train_artifacts(trained):
    cfg, params = checkpoint.load(os.path.join(trained, "model.ckpt"))
    assert cfg.levels == 2 and cfg.d_x == 2
    rows = read_rows(os.path.join(trained, "train_log.csv"))
    assert rows[0] == ["epoch", "train_loss", "val_ncrps"]
    assert len(rows) == 3
    for _, loss, val in rows[1:]:
        assert np.isfinite(float(loss)) and np.isfinite(float(val))


# -- evaluate ---------------------------------------------------------------

def test_evaluate_per_channel_table(trained, config_path, tmp_path):
    out = tmp_path / "eval"
    rc = cli.main(["evaluate", "--config", config_path,
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(out), "--samples", "6"])
    assert rc == 0
    rows = read_rows(out / "evaluation.csv")
    assert rows[0] == ["channel", "ncrps"]
    body = [r for r in rows[1:] if not r[0].startswith("#")]
    assert len(body) == 2
    assert all(np.isfinite(float(v)) for _, v in body)
    footers = [r for r in rows[1:] if r[0].startswith("#")]
    assert footers[0][0] == "# aggregate"


def test_evaluate_channel_mismatch(trained, config_path, tmp_path, capsys):
    rc = cli.main(["evaluate", "--config", config_path,
                   "--set", "dataset.d_x=3",
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "channels" in capsys.readouterr().err


def test_corrupt_checkpoint_magic(trained, config_path, tmp_path, capsys):
    blob = bytearray(open(os.path.join(trained, "model.ckpt"), "rb").read())
    blob[:4] = b"XXXX"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    rc = cli.main(["evaluate", "--config", config_path,
                   "--ckpt", str(bad), "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "bad checkpoint header" in capsys.readouterr().err


# -- forecast ---------------------------------------------------------------

def test_forecast_ensemble_file(trained, config_path, tmp_path):
    out = tmp_path / "fc"
    rc = cli.main(["forecast", "--config", config_path,
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(out), "--samples", "5"])
    assert rc == 0
    rows = read_rows(out / "ensemble.csv")
    assert rows[0] == ["sample", "step", "channel", "value", "timestamp"]
    assert len(rows) == 1 + 5 * 8 * 2
    stamps = sorted({float(r[4]) for r in rows[1:]})
    assert len(stamps) == 8
    assert np.allclose(np.diff(stamps), 3600.0)
    assert all(np.isfinite(float(r[3])) for r in rows[1:])


def test_forecast_single_channel_row_count(config_path, tmp_path):
    # one row per (sample, step) when the dataset has one channel
    out = tmp_path / "train1"
    assert cli.main(["train", "--config", config_path,
                     "--set", "dataset.d_x=1", "--set", "dataset.n=256",
                     "--set", "train.epochs=1", "--out", str(out)]) == 0
    fc = tmp_path / "fc1"
    assert cli.main(["forecast", "--config", config_path,
                     "--set", "dataset.d_x=1", "--set", "dataset.n=256",
                     "--ckpt", str(out / "model.ckpt"),
                     "--out", str(fc), "--samples", "7"]) == 0
    assert len(read_rows(fc / "ensemble.csv")) == 1 + 7 * 8


def test_forecast_short_context(trained, config_path, tmp_path, capsys):
    rc = cli.main(["forecast", "--config", config_path,
                   "--set", "windows.context_len=1000",
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "context" in capsys.readouterr().err


# -- analyze ----------------------------------------------------------------

def test_unknown_analyze_subcommand(config_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["analyze", "bogus", "--config", config_path])
    assert e.value.code == 2


def test_analyze_cv_levels_plus_one_rows(config_path, tmp_path):
    out = tmp_path / "cv"
    assert cli.main(["analyze", "cv", "--config", config_path,
                     "--out", str(out)]) == 0
    rows = read_rows(out / "cv.csv")
    assert rows[0] == ["level", "cv"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    # the synthetic grid is perfectly regular
    assert all(float(r[1]) == 0.0 for r in rows[1:])


def test_analyze_sensitivity_report(trained, config_path, tmp_path):
    out = tmp_path / "sens"
    rc = cli.main(["analyze", "sensitivity", "--config", config_path,
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(out), "--windows", "4"])
    assert rc == 0
    rows = read_rows(out / "sensitivity.csv")
    body = [r for r in rows[1:] if not r[0].startswith("#")]
    assert len(body) == 16
    assert all(float(r[1]) >= 0.0 for r in body)
    assert any(r[0].startswith("# r_squared") for r in rows)


def test_analyze_probe_requires_injection(trained, config_path, tmp_path,
                                          capsys):
    rc = cli.main(["analyze", "probe", "--config", config_path,
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "irregularity.fraction" in capsys.readouterr().err


def test_analyze_attention_weights_normalized(trained, config_path,
                                              tmp_path):
    out = tmp_path / "attn"
    rc = cli.main(["analyze", "attention", "--config", config_path,
                   "--ckpt", os.path.join(trained, "model.ckpt"),
                   "--out", str(out), "--windows", "1"])
    assert rc == 0
    rows = read_rows(out / "attention.csv")[1:]
    assert rows
    sums = {}
    for name, b, h, q, _, weight in rows:
        key = (name, b, h, q)
        sums[key] = sums.get(key, 0.0) + float(weight)
    assert all(abs(s - 1.0) < 1e-5 for s in sums.values())


# -- reproducibility --------------------------------------------------------

def test_outputs_reproduce_byte_for_byte(trained, config_path, tmp_path):
    """Identical config and seeds give identical files; only the manifest
    wall clock may differ."""
    ckpt = os.path.join(trained, "model.ckpt")
    outs = []
    for tag in ("a", "b"):
        ev = tmp_path / f"ev-{tag}"
        fc = tmp_path / f"fc-{tag}"
        assert cli.main(["evaluate", "--config", config_path,
                         "--ckpt", ckpt, "--out", str(ev),
                         "--samples", "6"]) == 0
        assert cli.main(["forecast", "--config", config_path,
                         "--ckpt", ckpt, "--out", str(fc),
                         "--samples", "4"]) == 0
        outs.append((ev, fc))
    (ev_a, fc_a), (ev_b, fc_b) = outs
    assert (ev_a / "evaluation.csv").read_bytes() == \
        (ev_b / "evaluation.csv").read_bytes()
    assert (fc_a / "ensemble.csv").read_bytes() == \
        (fc_b / "ensemble.csv").read_bytes()
    for a, b in ((ev_a, ev_b), (fc_a, fc_b)):
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        ma.pop("wall_clock"), mb.pop("wall_clock")
        assert ma == mb


def test_train_replay_reproduces_checkpoint(trained, config_path, tmp_path):
    out = tmp_path / "replay"
    assert cli.main(["train", "--config", config_path,
                     "--out", str(out)]) == 0
    a = open(os.path.join(trained, "model.ckpt"), "rb").read()
    b = (out / "model.ckpt").read_bytes()
    assert a == b
