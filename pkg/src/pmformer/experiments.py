"""Seeded sweeps over S, N_I, pool size and training mode, with resumable
per-point artifacts and a JSON report."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .autodiff import make_rng
from .errors import ParameterError
from .evaluation import FLOPS_PER_MAC, evaluate_split, flops_inter_feature
from .subsets import MAX, build_pool
from .training import TrainConfig, train

log = logging.getLogger(__name__)

AXES = ("S", "NI", "alpha", "mode")
_POOL_STREAM = 0xA1FA
FLOPS_NOTE = ("multiply-adds of the feature-attention QK^T and AV products per block, "
              "projections and softmax excluded; FLOPs = 2 x MACs")


@dataclass
class ExperimentReport:
    name: str
    config: dict
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=lambda: {"flops_convention": FLOPS_NOTE})

    def add_row(self, setting, per_seed: list[dict], **extra) -> dict:
        """Aggregate per-seed metric dicts; the raw values are kept alongside."""
        row = {"setting": setting, "per_seed": per_seed}
        for key in ("mse", "mae"):
            vals = np.array([p[key] for p in per_seed], dtype=np.float64)
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        cov = [p["coverage_mean"] for p in per_seed if p.get("coverage_mean") is not None]
        row["coverage_mean"] = float(np.mean(cov)) if cov else None
        row.update(extra)
        self.rows.append(row)
        return row

    def means(self, metric: str = "mse") -> dict:
        return {r["setting"]: r[f"{metric}_mean"] for r in self.rows}

    def per_seed(self, metric: str = "mse") -> dict:
        return {r["setting"]: [p[metric] for p in r["per_seed"]] for r in self.rows}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))
        return path

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls(**json.loads(Path(path).read_text()))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_predictions_csv(path, pred: np.ndarray, truth: np.ndarray, names=None) -> Path:
    """Flat ``window,horizon,feature,pred,truth`` rows for external plotting."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ParameterError(f"need matching (B, tau, D) arrays, got {pred.shape} and {truth.shape}")
    names = names or [f"f{j}" for j in range(pred.shape[2])]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "horizon", "feature", "pred", "truth"])
        for b, h, j in np.ndindex(pred.shape):
            w.writerow([b, h, names[j], repr(float(pred[b, h, j])), repr(float(truth[b, h, j]))])
    return path


def flops_summary(config: M.ModelConfig) -> dict:
    args = (config.D, config.S, config.N_S, config.d_h, config.n_h)
    macs = {s: flops_inter_feature(*args, scheme=s) for s in ("pmformer", "full")}
    return {
        "macs_pmformer": macs["pmformer"],
        "macs_full": macs["full"],
        "flops_pmformer": FLOPS_PER_MAC * macs["pmformer"],
        "flops_full": FLOPS_PER_MAC * macs["full"],
        "ratio": macs["pmformer"] / macs["full"],
    }


def _label(value) -> str:
    return str(value).replace("/", "_")


def _point_config(axis, value, model_config: M.ModelConfig, train_config: TrainConfig, seed: int):
    """Model and train configs for one sweep point."""
    tc = dataclasses.replace(train_config, seed=seed)
    mc = model_config
    if axis == "S":
        mc = model_config.replace(S=int(value))
    elif axis == "alpha":
        alpha = value if value == MAX else int(value)
        n_u = tc.resolve_n_subsets(mc.D, mc.S) if not tc.use_random_partition else math.ceil(mc.D / mc.S)
        pool = build_pool(mc.D, mc.S, alpha, n_u, make_rng(seed, _POOL_STREAM))
        tc = dataclasses.replace(tc, use_random_partition=False, n_subsets=n_u, pool=pool)
    elif axis == "mode":
        if value not in ("partition", "sampling"):
            raise ParameterError(f"mode values are 'partition' or 'sampling', got {value!r}")
        tc = dataclasses.replace(tc, use_random_partition=value == "partition", pool=None)
    return mc, tc


def _key(mc: M.ModelConfig, tc: TrainConfig, dataset, eval_n_trials: int) -> dict:
    return {
        "model": mc.to_dict(),
        "train": tc.to_dict(),
        "data": {"D": dataset.D, "T": dataset.T, "tau": dataset.tau, "bounds": dataset.bounds},
        "eval_n_trials": eval_n_trials,
    }


def _load_point(path: Path, key: dict):
    if not path.exists():
        return None
    try:
        stored = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    # round-trip the key through JSON so tuples compare equal to lists
    if stored.get("key") != json.loads(json.dumps(key, default=_json_default)):
        log.warning("ignoring stale point artifact %s", path)
        return None
    return stored["result"]


def _save_point(path: Path, key: dict, result: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"key": key, "result": result}, indent=2, default=_json_default))
    tmp.replace(path)


def train_point(dataset, mc: M.ModelConfig, tc: TrainConfig, eval_n_trials: int = 1,
                checkpoint_path=None) -> tuple[dict, M.Params]:
    """Train one model and score it on the test split."""
    state, report = train(dataset, mc, tc)
    t0 = time.perf_counter()
    metrics = evaluate_split(dataset, "test", state.params, mc, eval_n_trials, seed=tc.seed)
    result = {
        "seed": tc.seed,
        "mse": metrics["mse"],
        "mae": metrics["mae"],
        "mse_per_horizon": metrics.get("mse_per_horizon"),
        "coverage_mean": report["coverage_mean"],
        "coverage_min": report["coverage_min"],
        "best_val": report["best_val"],
        "best_epoch": report["best_epoch"],
        "epochs_run": report["epochs_run"],
        "wall_clock_train_s": report["wall_clock_s"],
        "wall_clock_eval_s": time.perf_counter() - t0,
    }
    if checkpoint_path is not None:
        M.save_checkpoint(checkpoint_path, state.params, mc, {"seed": tc.seed, "test_mse": result["mse"]})
    return result, state.params


def sweep(dataset, model_config: M.ModelConfig, train_config: TrainConfig, axis: str, values,
          seeds, out_dir=None, eval_n_trials: int = 1, checkpoint=None, name: str | None = None,
          progress=None) -> ExperimentReport:
    """Train (S, alpha, mode axes) or re-evaluate (NI axis) per value per seed.

    With ``out_dir`` every finished point is stored as JSON (plus a checkpoint
    for trained points) and a rerun skips points whose stored configuration
    matches.  For the NI axis ``checkpoint`` is a ``(params, config)`` pair or
    a checkpoint path; when omitted one model is trained with
    ``train_config.seed`` and ``seeds`` act as evaluation seeds.
    """
    if axis not in AXES:
        raise ParameterError(f"axis must be one of {AXES}, got {axis!r}")
    values, seeds = list(values), [int(s) for s in seeds]
    if not values or not seeds:
        raise ParameterError("sweep needs at least one value and one seed")
    out = Path(out_dir) if out_dir is not None else None
    report = ExperimentReport(
        name or f"sweep-{axis}",
        {"axis": axis, "values": values, "model": model_config.to_dict(),
         "train": train_config.to_dict(), "eval_n_trials": eval_n_trials},
        seeds,
    )
    t_start = time.perf_counter()

    if axis == "NI":
        params, mc = _ni_checkpoint(dataset, model_config, train_config, checkpoint, out)
        for value in values:
            n_i = int(value)
            per_seed = []
            for seed in seeds:
                path = out / "points" / f"NI-{n_i}-seed{seed}.json" if out else None
                key = {"checkpoint": mc.to_dict(), "n_i": n_i, "seed": seed,
                       "data": {"D": dataset.D, "bounds": dataset.bounds}}
                res = _load_point(path, key) if path else None
                if res is None:
                    t0 = time.perf_counter()
                    m = evaluate_split(dataset, "test", params, mc, n_i, seed=seed)
                    res = {"seed": seed, "mse": m["mse"], "mae": m["mae"],
                           "mse_per_horizon": m.get("mse_per_horizon"),
                           "wall_clock_eval_s": time.perf_counter() - t0}
                    if path:
                        _save_point(path, key, res)
                per_seed.append(res)
                if progress:
                    progress(axis, value, seed, res)
            report.add_row(value, per_seed, flops=flops_summary(mc))
    else:
        for value in values:
            per_seed = []
            for seed in seeds:
                mc, tc = _point_config(axis, value, model_config, train_config, seed)
                key = _key(mc, tc, dataset, eval_n_trials)
                stem = f"{axis}-{_label(value)}-seed{seed}"
                path = out / "points" / f"{stem}.json" if out else None
                res = _load_point(path, key) if path else None
                if res is None:
                    ckpt = out / "points" / f"{stem}.npz" if out else None
                    res, _ = train_point(dataset, mc, tc, eval_n_trials, ckpt)
                    if path:
                        _save_point(path, key, res)
                per_seed.append(res)
                if progress:
                    progress(axis, value, seed, res)
            report.add_row(value, per_seed, flops=flops_summary(mc))

    report.timings["total_s"] = time.perf_counter() - t_start
    report.timings["train_s"] = sum(p.get("wall_clock_train_s", 0.0) for r in report.rows for p in r["per_seed"])
    report.timings["eval_s"] = sum(p.get("wall_clock_eval_s", 0.0) for r in report.rows for p in r["per_seed"])
    if out is not None:
        report.write(out / f"{report.name}.json")
    return report


def _ni_checkpoint(dataset, model_config, train_config, checkpoint, out):
    if isinstance(checkpoint, (str, Path)):
        params, mc, _ = M.load_checkpoint(checkpoint)
        return params, mc
    if checkpoint is not None:
        return checkpoint
    path = out / "points" / f"NI-base-seed{train_config.seed}.npz" if out else None
    if path is not None and path.exists():
        params, mc, _ = M.load_checkpoint(path)
        if mc == model_config:
            return params, mc
    state, _ = train(dataset, model_config, train_config)
    if path is not None:
        M.save_checkpoint(path, state.params, model_config, {"seed": train_config.seed})
    return state.params, model_config
