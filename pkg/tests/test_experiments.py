import csv
import math

import numpy as np
import pytest

from pmformer import data, experiments as ex, model as M, training as tr
from pmformer.autodiff import make_rng
from pmformer.errors import ParameterError


@pytest.fixture(scope="module")
def ds():
    raw = data.synth_block_correlated(4, 2, 120, 0.2, make_rng(0))
    return data.make_windows(raw, 8, 2)


MC = M.ModelConfig(D=4, S=2, T=8, tau=2, N_S=2, d_h=8, n_h=2, d_ff=8)
TC = tr.TrainConfig(epochs=2, batch_size=16)


def count_train(monkeypatch):
    calls = []
    real = ex.train

    def wrapped(*a, **k):
        calls.append(1)
        return real(*a, **k)

    monkeypatch.setattr(ex, "train", wrapped)
    return calls


def test_s_sweep_trains_each_point(ds, monkeypatch, tmp_path):
    calls = count_train(monkeypatch)
    rep = ex.sweep(ds, MC, TC, "S", [1, 2, 4], seeds=[0, 1], out_dir=tmp_path)
    assert len(calls) == 6 and len(rep.rows) == 3
    for row in rep.rows:
        vals = [p["mse"] for p in row["per_seed"]]
        assert row["mse_mean"] == pytest.approx(np.mean(vals), abs=1e-15)
        assert row["mse_std"] == pytest.approx(np.std(vals), abs=1e-15)
    assert rep.rows[2]["flops"]["ratio"] == 1.0
    assert (tmp_path / "sweep-S.json").exists()


def test_resume_skips_finished_points(ds, monkeypatch, tmp_path):
    first = ex.sweep(ds, MC, TC, "S", [1, 2], seeds=[0], out_dir=tmp_path)
    (tmp_path / "points" / "S-2-seed0.json").unlink()
    calls = count_train(monkeypatch)
    second = ex.sweep(ds, MC, TC, "S", [1, 2], seeds=[0], out_dir=tmp_path)
    assert len(calls) == 1
    assert first.means() == second.means()


def test_stale_point_is_recomputed(ds, monkeypatch, tmp_path):
    ex.sweep(ds, MC, TC, "S", [2], seeds=[0], out_dir=tmp_path)
    calls = count_train(monkeypatch)
    ex.sweep(ds, MC, tr.TrainConfig(epochs=1, batch_size=16), "S", [2], seeds=[0], out_dir=tmp_path)
    assert len(calls) == 1


def test_ni_sweep_no_retraining(ds, monkeypatch):
    params = M.init_params(MC, make_rng(0))
    calls = count_train(monkeypatch)
    rep = ex.sweep(ds, MC, TC, "NI", [1, 2, 4, 8], seeds=[0, 1], checkpoint=(params, MC))
    assert len(calls) == 0 and [r["setting"] for r in rep.rows] == [1, 2, 4, 8]


def test_ni_sweep_trains_one_base(ds, monkeypatch):
    calls = count_train(monkeypatch)
    ex.sweep(ds, MC, TC, "NI", [1, 3], seeds=[0, 1, 2])
    assert len(calls) == 1


def test_alpha_sweep_uses_pool(ds, monkeypatch):
    seen = []
    real = tr.train_step

    def spy(batch, state, mc, tc):
        out = real(batch, state, mc, tc)
        seen.append((tc.pool, state.last_subsets))
        return out

    monkeypatch.setattr(tr, "train_step", spy)
    rep = ex.sweep(ds, MC, TC, "alpha", [1, "max"], seeds=[0])
    assert [r["setting"] for r in rep.rows] == [1, "max"]
    finite = [(p, s) for p, s in seen if not p.is_max]
    assert finite and all(all(sub in p for sub in s) for p, s in finite)
    assert all(len(p.subsets) == 2 for p, _ in finite)


def test_mode_axis(ds):
    rep = ex.sweep(ds, MC, TC, "mode", ["partition", "sampling"], seeds=[0])
    assert rep.rows[0]["coverage_mean"] == 1.0
    with pytest.raises(ParameterError):
        ex.sweep(ds, MC, TC, "mode", ["bogus"], seeds=[0])


def test_bad_axis(ds):
    with pytest.raises(ParameterError):
        ex.sweep(ds, MC, TC, "depth", [1], seeds=[0])
    with pytest.raises(ParameterError):
        ex.sweep(ds, MC, TC, "S", [], seeds=[0])


def test_report_round_trip(tmp_path):
    rep = ex.ExperimentReport("r", {"a": 1}, [0, 1])
    rep.add_row(2, [{"mse": 1.0, "mae": 0.5, "coverage_mean": 1.0}, {"mse": 3.0, "mae": 1.5}])
    back = ex.ExperimentReport.read(rep.write(tmp_path / "r.json"))
    assert back.rows[0]["mse_mean"] == 2.0 and back.rows[0]["mse_std"] == 1.0
    assert back.per_seed() == {2: [1.0, 3.0]}
    assert "FLOPs = 2 x MACs" in back.meta["flops_convention"]


def test_predictions_csv(tmp_path):
    pred = np.arange(12.0).reshape(2, 3, 2)
    path = ex.write_predictions_csv(tmp_path / "p.csv", pred, pred + 1, ["x", "y"])
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 12
    assert rows[3] == {"window": "0", "horizon": "1", "feature": "y", "pred": "3.0", "truth": "4.0"}


def test_flops_summary():
    s = ex.flops_summary(M.ModelConfig(D=8, S=2, T=8, tau=2, N_S=4, d_h=8, n_h=2))
    assert s["flops_pmformer"] == 2 * s["macs_pmformer"] == 2 * 4 * 4 * 2 * 4 * 8
    assert math.isclose(s["ratio"], 4 * 4 / 64)


def test_max_pool_equals_plain_sampling(ds):
    a = ex.sweep(ds, MC, TC, "alpha", ["max"], seeds=[0])
    b = ex.sweep(ds, MC, TC, "mode", ["sampling"], seeds=[0])
    assert a.rows[0]["per_seed"][0]["mse"] == b.rows[0]["per_seed"][0]["mse"]
