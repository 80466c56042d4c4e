import json

import numpy as np
import pytest

from pmformer import cli, model as M
from pmformer.autodiff import make_rng
from pmformer.data import load_csv, synth_block_correlated, save_csv

SMALL = """\
[data]
synth_D = 4
synth_blocks = 2
synth_steps = 200
[model]
S = 2
T = 8
tau = 2
N_S = 2
d_h = 8
d_ff = 8
[train]
epochs = 2
batch_size = 32
[eval]
n_trials = 2
"""


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL)
    return p


@pytest.fixture
def trained(tmp_path, conf):
    out = tmp_path / "train"
    assert cli.main(["train", "--config", str(conf), "--out", str(out), "--quiet"]) == 0
    return out


def test_train_artifacts(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["checkpoint.npz", "report.json", "resolved_config.json"]
    report = json.loads((trained / "report.json").read_text())
    assert report["epochs_run"] == 2 and np.isfinite(report["test"]["mse"])


def test_override_reflected(tmp_path, conf):
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(conf), "--out", str(out), "--S", "4", "--quiet"]) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["config"]["model"]["S"] == 4
    _, mc, _ = M.load_checkpoint(out / "checkpoint.npz")
    assert mc.S == 4


def test_precedence(conf):
    cfg = cli.resolve_config(conf, ["model.S=3", "train.lr=0.01"], {"S": 1})
    assert cfg["model"]["S"] == 1 and cfg["train"]["lr"] == 0.01 and cfg["model"]["T"] == 8


def test_bad_key_lists_valid_keys(tmp_path, conf, capsys):
    rc = cli.main(["train", "--config", str(conf), "--out", str(tmp_path / "x"), "--set", "model.depth=3"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "model.depth" in err and "model.N_S" in err


def test_bad_key_in_file(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\nwidth = 3\n")
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "valid keys" in capsys.readouterr().err


def test_missing_dataset(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    rc = cli.main(["train", "--data", str(missing), "--out", str(tmp_path / "x")])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_snapshot_written_before_failure(tmp_path):
    out = tmp_path / "x"
    cli.main(["train", "--data", str(tmp_path / "absent.csv"), "--out", str(out), "--quiet"])
    assert (out / "resolved_config.json").exists()


def test_eval_deterministic(tmp_path, conf, trained, capsys):
    ck = str(trained / "checkpoint.npz")
    outs = []
    for i, n in enumerate(["1", "3", "3"]):
        out = tmp_path / f"e{i}"
        assert cli.main(["eval", "--config", str(conf), "--checkpoint", ck, "--out", str(out),
                         "--n-trials", n, "--quiet"]) == 0
        outs.append(json.loads((out / "eval_report.json").read_text())["metrics"])
    assert outs[1] == outs[2]
    assert "mse_per_horizon" in outs[0]


def test_eval_prints_horizons(tmp_path, conf, trained, capsys):
    cli.main(["eval", "--config", str(conf), "--checkpoint", str(trained / "checkpoint.npz"),
              "--out", str(tmp_path / "e")])
    text = capsys.readouterr().out
    assert "horizon   1" in text and "horizon   2" in text


def test_eval_d_mismatch(tmp_path, conf, trained, capsys):
    rc = cli.main(["eval", "--config", str(conf), "--set", "data.synth_D=6", "--set", "data.synth_blocks=3",
                   "--checkpoint", str(trained / "checkpoint.npz"), "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "D mismatch" in capsys.readouterr().err


def test_eval_corrupted(tmp_path, conf, capsys):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    rc = cli.main(["eval", "--config", str(conf), "--checkpoint", str(bad), "--out", str(tmp_path / "e")])
    assert rc == 1 and "bad.npz" in capsys.readouterr().err


def test_flops_output(tmp_path, capsys):
    assert cli.main(["flops", "--D", "862", "--S", "20", "--out", str(tmp_path / "f")]) == 0
    text = capsys.readouterr().out
    assert "pmformer:" in text and "full:" in text
    ratio = float(text.split("ratio:")[1].split()[0])
    assert abs(ratio - 44 * 400 / 862 ** 2) < 1e-10
    stored = json.loads((tmp_path / "f" / "flops.json").read_text())
    assert stored["flops"]["pmformer"] == 2 * stored["macs"]["pmformer"]


def test_synth_round_trip(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["synth", "--D", "4", "--blocks", "2", "--steps", "150", "--seed", "3", "--out", str(out),
                     "--quiet"]) == 0
    raw = load_csv(out / "synth.csv", has_timestamp=False)
    assert raw.values.shape == (150, 4)
    ref = synth_block_correlated(4, 2, 150, 0.3, make_rng(3))
    np.testing.assert_array_equal(raw.values, ref.values)
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.replace("synth_D = 4", f"path = {out / 'synth.csv'}\nhas_timestamp = false"))
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t"), "--quiet"]) == 0


def test_sweep_resume(tmp_path, conf, monkeypatch):
    out = tmp_path / "sw"
    argv = ["sweep", "--config", str(conf), "--axis", "S", "--values", "1,2", "--seeds", "0,1",
            "--out", str(out), "--quiet"]
    assert cli.main(argv) == 0
    first = json.loads((out / "sweep-S.json").read_text())
    assert len(first["rows"]) == 2 and first["seeds"] == [0, 1]
    import pmformer.experiments as ex
    monkeypatch.setattr(ex, "train", lambda *a, **k: pytest.fail("finished point recomputed"))
    assert cli.main(argv) == 0
    second = json.loads((out / "sweep-S.json").read_text())
    assert [r["mse_mean"] for r in first["rows"]] == [r["mse_mean"] for r in second["rows"]]


def test_sweep_ni_with_checkpoint(tmp_path, conf, trained, monkeypatch):
    import pmformer.experiments as ex
    monkeypatch.setattr(ex, "train", lambda *a, **k: pytest.fail("NI sweep retrained"))
    out = tmp_path / "ni"
    assert cli.main(["sweep", "--config", str(conf), "--axis", "NI", "--values", "1,2,4,8", "--seeds", "0-2",
                     "--checkpoint", str(trained / "checkpoint.npz"), "--out", str(out), "--quiet"]) == 0
    assert len(json.loads((out / "sweep-NI.json").read_text())["rows"]) == 4


def test_sweep_alpha(tmp_path, conf):
    out = tmp_path / "a"
    assert cli.main(["sweep", "--config", str(conf), "--axis", "alpha", "--values", "1,max", "--out", str(out),
                     "--quiet"]) == 0
    rows = json.loads((out / "sweep-alpha.json").read_text())["rows"]
    assert [r["setting"] for r in rows] == [1, "max"]


def test_robustness(tmp_path, conf, trained):
    out = tmp_path / "r"
    assert cli.main(["robustness", "--config", str(conf), "--checkpoint", str(trained / "checkpoint.npz"),
                     "--drop-fractions", "0,0.5", "--seeds", "0,1", "--out", str(out), "--quiet"]) == 0
    rows = json.loads((out / "robustness-partial.json").read_text())["rows"]
    assert rows[0]["increase_rate_mean"] == 0.0 and len(rows[1]["per_seed"]) == 2


def test_robustness_complete_needs_full_model(tmp_path, conf, trained):
    assert cli.main(["robustness", "--config", str(conf), "--checkpoint", str(trained / "checkpoint.npz"),
                     "--baseline", "complete", "--out", str(tmp_path / "r"), "--quiet"]) == 2


def test_env_output_root(tmp_path, conf, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "root"))
    assert cli.main(["flops", "--D", "8", "--S", "2", "--quiet"]) == 0
    assert (tmp_path / "root" / "flops" / "flops.json").exists()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["sweep", "--axis", "depth", "--values", "1"])
    assert info.value.code == 2


def test_parse_seeds():
    assert cli.parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("3, 7") == [3, 7]


def test_csv_dataset_config(tmp_path):
    path = save_csv(tmp_path / "d.csv", synth_block_correlated(4, 2, 120, 0.1, make_rng(0)))
    cfg = cli.resolve_config(None, [f"data.path={path}", "data.has_timestamp=no", "data.split=80,20,20"])
    ds = cli.load_dataset(cfg, 8, 2)
    assert ds.bounds["test"] == (100, 120)


def test_inline_comments(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nS = 3   ; subset size\ninstance_norm = true  # RevIN\n")
    cfg = cli.resolve_config(p, [], {})
    assert cfg["model"]["S"] == 3 and cfg["model"]["instance_norm"] is True
