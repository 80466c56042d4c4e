"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or execute this file).
The long training criteria share one S sweep and one pool sweep; their
artifacts go to ``$PMFORMER_ACCEPTANCE_DIR`` when set (reruns then resume
finished points), otherwise to a pytest temp directory.
"""

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from pmformer import autodiff as ad
from pmformer import data, evaluation as ev, experiments as ex, model as M, training as tr
from pmformer.autodiff import make_rng, numerical_grad, relative_error
from pmformer.errors import ParameterError
from pmformer.subsets import build_pool, check_partition, n_subsets, random_partition

SEEDS = [0, 1, 2, 3, 4]
# block-correlated synthetic set: D=8, four blocks of 2, 4000 steps
SYNTH = dict(D=8, blocks=4, N_steps=4000, noise=0.5, ar_scale=0.1, ar_coef=0.99, seed=2024)
WINDOW = dict(T=48, tau=12)
BASE = M.ModelConfig(D=8, S=2, T=48, tau=12, N_S=4, d_h=16, n_h=2, L=1, d_ff=32, instance_norm=True)
TRAIN = tr.TrainConfig(epochs=30, batch_size=128, lr=1e-3, patience=None)
N_I = 3


@pytest.fixture
def verdict(capsys):
    def emit(tag: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, f"{tag}: {detail}"
    return emit


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    root = os.environ.get("PMFORMER_ACCEPTANCE_DIR")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def synth_ds():
    s = SYNTH
    raw = data.synth_block_correlated(s["D"], s["blocks"], s["N_steps"], s["noise"], make_rng(s["seed"]),
                                      ar_coef=s["ar_coef"], ar_scale=s["ar_scale"])
    return data.make_windows(raw, WINDOW["T"], WINDOW["tau"])


@pytest.fixture(scope="session")
def s_sweep(synth_ds, workdir):
    t0 = time.perf_counter()
    rep = ex.sweep(synth_ds, BASE, TRAIN, "S", [1, 2, 4, 8], SEEDS, out_dir=workdir / "S", eval_n_trials=N_I)
    rep.timings["fixture_s"] = time.perf_counter() - t0
    return rep


@pytest.fixture(scope="session")
def alpha_sweep(synth_ds, workdir):
    t0 = time.perf_counter()
    rep = ex.sweep(synth_ds, BASE, TRAIN, "alpha", [1, 4, "max"], SEEDS, out_dir=workdir / "alpha",
                   eval_n_trials=N_I)
    rep.timings["fixture_s"] = time.perf_counter() - t0
    return rep


def _ckpt(workdir, S, seed):
    params, mc, _ = M.load_checkpoint(workdir / "S" / "points" / f"S-{S}-seed{seed}.npz")
    return params, mc


def _fmt(d):
    return ", ".join(f"{k}={v:.5f}" for k, v in d.items())


# 1 -------------------------------------------------------------------------

def test_ac1_gradients(verdict):
    cfg = M.ModelConfig(D=4, S=2, T=8, tau=2, N_S=2, d_h=8, n_h=2, L=1, d_ff=8)
    t0 = time.perf_counter()
    worst, n_checked = 0.0, 0
    for seed in SEEDS:
        rng = make_rng(seed, 77)
        params = M.init_params(cfg, rng)
        # move off the zero-bias init so every parameter has a generic gradient
        for p in params.values():
            p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
        x, y = rng.standard_normal((3, 8, 4)), rng.standard_normal((3, 2, 4))
        subsets = random_partition(4, 2, rng).as_array()
        ad.backward(tr.subset_loss(x, y, subsets, params, cfg))
        for name, p in params.items():
            def f():
                with ad.no_grad():
                    return tr.subset_loss(x, y, subsets, params, cfg).item()
            num = numerical_grad(f, p.data, step=1e-4)
            worst = max(worst, relative_error(p.grad, num))
            n_checked += p.data.size
    dt = time.perf_counter() - t0
    verdict("AC1", worst < 1e-4 and dt < 60,
            f"max relative error {worst:.2e} over {n_checked} parameter entries x 5 seeds (tol 1e-4), {dt:.1f}s")


# 2 -------------------------------------------------------------------------

def test_ac2_partitions(verdict):
    t0 = time.perf_counter()
    bad = []
    for D, S in [(6, 3), (7, 3), (21, 7), (40, 8)]:
        rng = make_rng(D, S)
        R = D % S
        for _ in range(1000):
            part = random_partition(D, S, rng)
            try:
                check_partition(part, D, S)
            except Exception as exc:  # recorded, reported below
                bad.append(f"{D},{S}: {exc}")
                continue
            flat = [i for s in part.subsets for i in s]
            dup = len(flat) - len(set(flat))
            want = 0 if R == 0 else S - R
            if dup != want or len(part.augmented) != want or part.n_subsets != n_subsets(D, S):
                bad.append(f"{D},{S}: {dup} duplicates, expected {want}")
    dt = time.perf_counter() - t0
    verdict("AC2", not bad and dt < 10, f"4000 partitions, {len(bad)} violations, {dt:.2f}s")


# 3 -------------------------------------------------------------------------

def test_ac3_boundaries(verdict):
    rng = make_rng(3)
    x, y = rng.standard_normal((6, 8, 4)), rng.standard_normal((6, 2, 4))
    full = M.ModelConfig(D=4, S=4, T=8, tau=2, N_S=2, d_h=8, n_h=2, d_ff=8)
    tc = tr.TrainConfig(seed=5)
    state = tr.init_state(full, tc)
    with ad.no_grad():
        direct = ad.mse_reduce(M.forward(x, np.arange(4), state.params, full), y).item()
    gap = abs(tr.train_step((x, y), state, full, tc) - direct)

    uni = full.replace(S=1)
    trace = M.ForwardTrace()
    M.forward(x[:, :, :1], [2], M.init_params(uni, rng), uni, trace=trace)
    probs = np.concatenate([p.ravel() for p in trace.feature_probs])
    exact_one = bool(np.all(probs == 1.0))
    verdict("AC3", gap <= 1e-12 and exact_one,
            f"S=D |loss - direct| = {gap:.1e} (tol 1e-12); S=1 feature attention weights all exactly 1: {exact_one}")


# 4 -------------------------------------------------------------------------

def test_ac4_u_shape(verdict, s_sweep):
    m = s_sweep.means()
    best_mid = min(m[2], m[4])
    ok = best_mid < m[1] and best_mid < m[8]
    verdict("AC4", ok, f"mean test MSE over 5 seeds: {_fmt({f'S={k}': v for k, v in m.items()})}; "
                       f"best of S in {{2,4}} = {best_mid:.5f}; {s_sweep.timings['fixture_s']:.0f}s")


# 5 -------------------------------------------------------------------------

def test_ac5_pool_size(verdict, alpha_sweep):
    # alpha = 8 would need 8 * 4 = 32 distinct pairs out of C(8, 2) = 28
    with pytest.raises(ParameterError):
        build_pool(8, 2, 8, 4, make_rng(0))
    m = alpha_sweep.means()
    verdict("AC5", m["max"] <= m[1],
            f"mean test MSE: {_fmt({f'alpha={k}': v for k, v in m.items()})} "
            f"(alpha=8 infeasible for D=8,S=2, alpha=4 used); {alpha_sweep.timings['fixture_s']:.0f}s")


# 6 -------------------------------------------------------------------------

def test_ac6_n_i(verdict, synth_ds, s_sweep, workdir):
    t0 = time.perf_counter()
    params, mc = _ckpt(workdir, 2, 0)
    rep = ex.sweep(synth_ds, mc, TRAIN, "NI", [1, 8], SEEDS, checkpoint=(params, mc))
    m = rep.means()
    x, _ = synth_ds.split_arrays("test")
    mean, trials = ev.infer_partition_averaged(x[:64], params, mc, 8, make_rng(1), return_trials=True)
    gap = float(np.max(np.abs(mean - np.mean(np.stack(trials), axis=0))))
    dt = time.perf_counter() - t0
    verdict("AC6", m[8] <= m[1] and gap <= 1e-12 and dt < 300,
            f"N_I=1 {m[1]:.5f}, N_I=8 {m[8]:.5f} (5 eval seeds, S=2 seed-0 checkpoint); "
            f"averaging identity gap {gap:.1e}; {dt:.0f}s")


# 7 -------------------------------------------------------------------------

def test_ac7_robustness(verdict, synth_ds, s_sweep, workdir):
    t0 = time.perf_counter()
    x, y = synth_ds.split_arrays("test")
    partial, complete = [], []
    for seed in SEEDS:
        p2, c2 = _ckpt(workdir, 2, seed)
        p8, c8 = _ckpt(workdir, 8, seed)
        partial.append(ev.robustness_drop(x, y, p2, c2, [0.25], "partial", seed=seed, n_trials=N_I)[0.25]["increase_rate"])
        complete.append(ev.robustness_drop(x, y, p8, c8, [0.25], "complete", seed=seed)[0.25]["increase_rate"])
    mp, mc = float(np.mean(partial)), float(np.mean(complete))
    dt = time.perf_counter() - t0
    verdict("AC7", mp < mc,
            f"drop 0.25 increase rate: S=2 partial {mp:.4f} vs S=D zero-padded {mc:.4f} "
            f"(per seed {np.round(partial, 4).tolist()} vs {np.round(complete, 4).tolist()}); {dt:.0f}s")


# 8 -------------------------------------------------------------------------

def test_ac8_flops(verdict):
    t0 = time.perf_counter()
    rng = make_rng(8)
    mismatches = []
    for _ in range(20):
        D = int(rng.integers(1, 25))
        S = int(rng.integers(1, D + 1))
        N_S = int(rng.choice([1, 2, 4]))
        n_h = int(rng.choice([1, 2, 4]))
        d_h = n_h * int(rng.integers(1, 5))
        L = int(rng.integers(1, 3))
        cfg = M.ModelConfig(D=D, S=S, T=4 * N_S, tau=2, N_S=N_S, d_h=d_h, n_h=n_h, L=L, d_ff=4)
        params = M.init_params(cfg, rng)
        for scheme in ("pmformer", "full"):
            counted = ev.counted_inter_feature_macs(params, cfg, rng, scheme)
            closed = ev.flops_inter_feature(D, S, N_S, d_h, n_h, scheme)
            if counted != closed:
                mismatches.append((D, S, N_S, d_h, n_h, L, scheme, counted, closed))
    ratio = ev.flops_inter_feature(862, 20, 8, 256, 8) / ev.flops_inter_feature(862, 20, 8, 256, 8, "full")
    gap = abs(ratio - math.ceil(862 / 20) * 20 ** 2 / 862 ** 2)
    dt = time.perf_counter() - t0
    verdict("AC8", not mismatches and gap <= 1e-12 and dt < 60,
            f"20 random configs, {len(mismatches)} count mismatches; D=862,S=20 ratio {ratio:.6f}, "
            f"closed-form gap {gap:.1e}; {dt:.1f}s")


# 9 -------------------------------------------------------------------------

def test_ac9_etth1(verdict, capsys):
    path = os.environ.get("PMFORMER_ETTH1_CSV")
    if not path or not Path(path).is_file():
        with capsys.disabled():
            print("\nAC9 SKIP: set PMFORMER_ETTH1_CSV to an ETTh1.csv to run the optional sanity check", flush=True)
        pytest.skip("ETTh1 CSV not supplied")
    t0 = time.perf_counter()
    raw = data.load_csv(path)
    ds = data.make_windows(raw, 512, 96, split={"train": 8640, "val": 2880, "test": 2880})
    cfg = M.ModelConfig(D=raw.D, S=3, T=512, tau=96, N_S=64, d_h=64, n_h=4, L=1, d_ff=256, r_dropout=0.7)
    state, _ = tr.train(ds, cfg, tr.TrainConfig(epochs=10, batch_size=128, lr=1e-3, seed=0))
    mse = ev.evaluate_split(ds, "test", state.params, cfg, 3, seed=0)["mse"]
    dt = time.perf_counter() - t0
    ok = mse <= 0.45
    # non-gating by definition of the criterion: reported, never fails the suite
    with capsys.disabled():
        print(f"\nAC9 {'PASS' if ok else 'FAIL'} (non-gating): ETTh1 tau=96 test MSE {mse:.4f} "
              f"(threshold 0.45); {dt / 60:.1f} min", flush=True)


# 10 ------------------------------------------------------------------------

def test_ac10_sampling_vs_partition(verdict, s_sweep, alpha_sweep):
    # the alpha = Max pool is every C(8, 2) subset, i.e. plain random sampling
    part = s_sweep.means()[2]
    samp = alpha_sweep.means()["max"]
    rel = abs(samp - part) / part
    verdict("AC10", rel < 0.15,
            f"S=2 partitioning {part:.5f} vs sampling {samp:.5f}: relative gap {rel:.2%} (tol 15%)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
