"""Command-line front end: train, eval, sweep, robustness, flops, synth.

Configuration precedence, lowest to highest: built-in defaults, the INI file
given with ``--config``, ``--set section.key=value`` pairs, dedicated flags
such as ``--S``.  The output root defaults to ``$PMFORMER_OUT`` (or ``runs``)
joined with the command name.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as ev
from . import model as M
from .autodiff import make_rng
from .errors import (CheckpointError, ConfigError, DataError, ParameterError, PMformerError,
                     TrainingError)
from .experiments import ExperimentReport, flops_summary, sweep, write_predictions_csv
from .subsets import MAX, build_pool
from .training import TrainConfig, train

log = logging.getLogger("pmformer")

ENV_OUT = "PMFORMER_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s is None or str(s).strip().lower() in ("", "none") else int(s)


def _opt_float(s):
    return None if s is None or str(s).strip().lower() in ("", "none") else float(s)


def _opt_str(s):
    return None if s is None or str(s).strip() == "" else str(s)


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "path": (_opt_str, None),
        "has_timestamp": (_bool, True),
        "normalization": (str, "standard"),
        "split": (str, "0.7,0.1,0.2"),
        "synth_D": (_opt_int, None),
        "synth_blocks": (int, 1),
        "synth_steps": (int, 2000),
        "synth_noise": (float, 0.3),
        "synth_seed": (int, 0),
    },
    "model": {
        "S": (int, 2),
        "T": (int, 48),
        "tau": (int, 12),
        "N_S": (int, 4),
        "d_h": (int, 16),
        "n_h": (int, 2),
        "L": (int, 1),
        "d_ff": (int, 32),
        "r_dropout": (float, 0.0),
        "activation": (str, "gelu"),
        "prenorm": (_bool, False),
        "instance_norm": (_bool, False),
    },
    "train": {
        "mode": (str, "partition"),
        "n_subsets": (_opt_int, None),
        "alpha": (_opt_str, None),
        "epochs": (int, 30),
        "lr": (float, 1e-3),
        "batch_size": (int, 128),
        "patience": (_opt_int, 10),
        "grad_clip": (_opt_float, None),
    },
    "eval": {
        "n_trials": (int, 3),
    },
    "run": {
        "seed": (int, 0),
        "seeds": (str, "0"),
    },
}

# dedicated override flags: flag dest -> (section, key)
FLAG_KEYS = {
    "data": ("data", "path"),
    "S": ("model", "S"),
    "T": ("model", "T"),
    "tau": ("model", "tau"),
    "N_S": ("model", "N_S"),
    "d_h": ("model", "d_h"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "mode": ("train", "mode"),
    "n_trials": ("eval", "n_trials"),
    "seed": ("run", "seed"),
    "seeds": ("run", "seeds"),
}


def _valid_keys() -> str:
    return ", ".join(f"{sec}.{k}" for sec, keys in SCHEMA.items() for k in keys)


def resolve_config(config_path=None, sets=(), flags: dict | None = None) -> dict:
    """Merge defaults, file, ``--set`` pairs and flags into typed sections."""
    raw = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    layers = []
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.optionxform = str  # keys are case sensitive (S vs s)
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for sec in cp.sections():
            for k, v in cp.items(sec):
                layers.append((sec, k, v, str(path)))
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, v = item.split("=", 1)
        sec, k = lhs.split(".", 1)
        layers.append((sec.strip(), k.strip(), v.strip(), "--set"))
    for dest, v in (flags or {}).items():
        if v is not None:
            sec, k = FLAG_KEYS[dest]
            layers.append((sec, k, v, f"--{dest}"))
    for sec, k, v, origin in layers:
        if sec not in SCHEMA or k not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key '{sec}.{k}' (from {origin}); valid keys: {_valid_keys()}")
        parse = SCHEMA[sec][k][0]
        try:
            raw[sec][k] = parse(v)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {v!r} for {sec}.{k} (from {origin})") from None
    return raw


def parse_seeds(text) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive)."""
    seeds = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _parse_split(text: str):
    parts = [p.strip() for p in text.split(",")]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"split must be three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise ConfigError(f"split must have three entries, got {text!r}")
    if all(v.is_integer() and v > 1 for v in vals):
        return dict(zip(D.SPLITS, (int(v) for v in vals)))
    return tuple(vals)


def load_series(cfg: dict) -> D.RawSeries:
    d = cfg["data"]
    if d["path"] is not None:
        return D.load_csv(d["path"], has_timestamp=d["has_timestamp"])
    if d["synth_D"] is None:
        raise ConfigError("no dataset: set data.path or data.synth_D")
    return D.synth_block_correlated(d["synth_D"], d["synth_blocks"], d["synth_steps"], d["synth_noise"],
                                    make_rng(d["synth_seed"]))


def load_dataset(cfg: dict, T: int | None = None, tau: int | None = None) -> D.WindowedDataset:
    raw = load_series(cfg)
    T = cfg["model"]["T"] if T is None else T
    tau = cfg["model"]["tau"] if tau is None else tau
    return D.make_windows(raw, T, tau, split=_parse_split(cfg["data"]["split"]),
                          normalization=cfg["data"]["normalization"])


def model_config(cfg: dict, D_: int) -> M.ModelConfig:
    return M.ModelConfig(D=D_, **cfg["model"])


def train_config(cfg: dict, mc: M.ModelConfig, seed: int) -> TrainConfig:
    t = cfg["train"]
    if t["mode"] not in ("partition", "sampling"):
        raise ConfigError(f"train.mode must be 'partition' or 'sampling', got {t['mode']!r}")
    pool = None
    if t["alpha"] is not None:
        if t["mode"] != "sampling":
            raise ConfigError("train.alpha needs train.mode = sampling")
        alpha = MAX if t["alpha"] == MAX else int(t["alpha"])
        n_u = t["n_subsets"] or -(-mc.D // mc.S)
        pool = build_pool(mc.D, mc.S, alpha, n_u, make_rng(seed, 0xA1FA))
    tc = TrainConfig(use_random_partition=t["mode"] == "partition", n_subsets=t["n_subsets"],
                     epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"], seed=seed, pool=pool,
                     patience=t["patience"], grad_clip=t["grad_clip"], eval_n_trials=cfg["eval"]["n_trials"])
    tc.validate(mc)
    return tc


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_default))
    return path


def _default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT, "runs")) / args.command


def _snapshot(out: Path, args, cfg: dict | None, extra: dict | None = None) -> None:
    """Write the resolved configuration before any other side effect."""
    snap = {"command": args.command, "config": cfg, **(extra or {})}
    write_json(out / "resolved_config.json", snap)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    seed = cfg["run"]["seed"]
    _snapshot(out, args, cfg)
    ds = load_dataset(cfg)
    mc = model_config(cfg, ds.D)
    tc = train_config(cfg, mc, seed)
    state, report = train(ds, mc, tc)
    metrics = ev.evaluate_split(ds, "test", state.params, mc, cfg["eval"]["n_trials"], seed=seed)
    report["test"] = metrics
    report["flops"] = flops_summary(mc)
    M.save_checkpoint(out / "checkpoint.npz", state.params, mc, {"seed": seed, "names": ds.names})
    write_json(out / "report.json", report)
    if args.predictions:
        pred, y = ev.predict_split(ds, "test", state.params, mc, cfg["eval"]["n_trials"], seed)
        write_predictions_csv(out / "predictions.csv", pred, y, ds.names)
    _say(args, f"trained {report['epochs_run']} epochs, best val {report['best_val']}, "
               f"test mse {metrics['mse']:.6f} mae {metrics['mae']:.6f}")
    _say(args, f"artifacts in {out}")
    return EXIT_OK


def _load_ckpt(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    return M.load_checkpoint(path)


def _check_d(mc: M.ModelConfig, ds) -> None:
    if mc.D != ds.D:
        raise ConfigError(f"D mismatch: checkpoint was trained with D={mc.D} but the dataset has D={ds.D}")


def cmd_eval(args, cfg) -> int:
    out = _out_dir(args)
    seed = cfg["run"]["seed"]
    n_i = cfg["eval"]["n_trials"]
    _snapshot(out, args, cfg, {"checkpoint": args.checkpoint})
    params, mc, _ = _load_ckpt(args.checkpoint)
    ds = load_dataset(cfg, mc.T, mc.tau)
    _check_d(mc, ds)
    metrics = ev.evaluate_split(ds, args.split, params, mc, n_i, seed=seed)
    write_json(out / "eval_report.json", {"checkpoint": args.checkpoint, "split": args.split,
                                          "n_trials": n_i, "seed": seed, "metrics": metrics})
    _say(args, f"{args.split}: mse {metrics['mse']:.6f} mae {metrics['mae']:.6f} "
               f"({metrics['n_windows']} windows, N_I={n_i})")
    for h, (a, b) in enumerate(zip(metrics.get("mse_per_horizon", []), metrics.get("mae_per_horizon", []))):
        _say(args, f"  horizon {h + 1:3d}: mse {a:.6f} mae {b:.6f}")
    return EXIT_OK


def _parse_values(axis: str, text: str) -> list:
    vals = []
    for v in (s.strip() for s in text.split(",")):
        if not v:
            continue
        if axis == "alpha" and v == MAX:
            vals.append(MAX)
        else:
            try:
                vals.append(int(v))
            except ValueError:
                raise ConfigError(f"bad {axis} value {v!r}") from None
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(args, cfg) -> int:
    out = _out_dir(args)
    values = _parse_values(args.axis, args.values)
    seeds = parse_seeds(cfg["run"]["seeds"])
    _snapshot(out, args, cfg, {"axis": args.axis, "values": values, "seeds": seeds})
    ds = load_dataset(cfg)
    mc = model_config(cfg, ds.D)
    if args.axis == "alpha":
        cfg = {**cfg, "train": {**cfg["train"], "mode": "sampling", "alpha": None}}
    tc = train_config(cfg, mc, cfg["run"]["seed"])
    checkpoint = None
    if args.axis == "NI" and args.checkpoint:
        params, ck_mc, _ = _load_ckpt(args.checkpoint)
        _check_d(ck_mc, ds)
        checkpoint = (params, ck_mc)

    def progress(axis, value, seed, res):
        _say(args, f"{axis}={value} seed={seed}: test mse {res['mse']:.6f}")

    rep = sweep(ds, mc, tc, args.axis, values, seeds, out_dir=out, eval_n_trials=cfg["eval"]["n_trials"],
                checkpoint=checkpoint, name=f"sweep-{args.axis}", progress=progress)
    for row in rep.rows:
        _say(args, f"{args.axis}={row['setting']}: mse {row['mse_mean']:.6f} ± {row['mse_std']:.6f} "
                   f"mae {row['mae_mean']:.6f} ± {row['mae_std']:.6f}")
    return EXIT_OK


def cmd_robustness(args, cfg) -> int:
    out = _out_dir(args)
    try:
        fractions = [float(f) for f in args.drop_fractions.split(",") if f.strip()]
    except ValueError:
        raise ConfigError(f"bad --drop-fractions {args.drop_fractions!r}") from None
    seeds = parse_seeds(cfg["run"]["seeds"])
    _snapshot(out, args, cfg, {"checkpoint": args.checkpoint, "baseline": args.baseline,
                               "fractions": fractions, "seeds": seeds})
    params, mc, _ = _load_ckpt(args.checkpoint)
    ds = load_dataset(cfg, mc.T, mc.tau)
    _check_d(mc, ds)
    x, y = ds.split_arrays("test")
    rep = ExperimentReport(f"robustness-{args.baseline}", {"checkpoint": args.checkpoint, "config": cfg,
                                                          "fractions": fractions}, seeds)
    per_frac = {f: [] for f in fractions}
    for seed in seeds:
        res = ev.robustness_drop(x, y, params, mc, fractions, args.baseline, seed=seed,
                                 n_trials=cfg["eval"]["n_trials"])
        for f in fractions:
            r = res[f]
            per_frac[f].append({"seed": seed, "mse": r["mse_dropped"], "mae": float("nan"), **r})
    for f in fractions:
        row = rep.add_row(f, per_frac[f])
        rates = [p["increase_rate"] for p in per_frac[f]]
        row["increase_rate_mean"] = float(np.mean(rates))
        row["increase_rate_std"] = float(np.std(rates))
        _say(args, f"drop {f:.2f}: increase rate {row['increase_rate_mean']:.6f} ± {row['increase_rate_std']:.6f}")
    rep.write(out / f"{rep.name}.json")
    return EXIT_OK


def cmd_flops(args, cfg) -> int:
    out = _out_dir(args)
    _snapshot(out, args, None, {"D": args.D, "S": args.S, "N_S": args.N_S, "d_h": args.d_h, "n_h": args.n_h})
    if args.S is None:
        raise ConfigError("flops needs --S")
    counts = {s: ev.flops_inter_feature(args.D, args.S, args.N_S, args.d_h, args.n_h, s) for s in ("pmformer", "full")}
    ratio = counts["pmformer"] / counts["full"]
    write_json(out / "flops.json", {"D": args.D, "S": args.S, "N_S": args.N_S, "d_h": args.d_h, "n_h": args.n_h,
                                    "macs": counts, "flops": {k: ev.FLOPS_PER_MAC * v for k, v in counts.items()},
                                    "ratio": ratio, "convention": "FLOPs = 2 x multiply-adds"})
    # always printed: this is the command's result
    print(f"pmformer: {ev.FLOPS_PER_MAC * counts['pmformer']} FLOPs ({counts['pmformer']} MACs)")
    print(f"full:     {ev.FLOPS_PER_MAC * counts['full']} FLOPs ({counts['full']} MACs)")
    print(f"ratio:    {ratio:.10g}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    out = _out_dir(args)
    _snapshot(out, args, None, {"D": args.D, "blocks": args.blocks, "steps": args.steps,
                                "noise": args.noise, "seed": args.seed})
    raw = D.synth_block_correlated(args.D, args.blocks, args.steps, args.noise, make_rng(args.seed or 0))
    path = D.save_csv(out / "synth.csv", raw)
    _say(args, f"wrote {path} ({args.steps} rows, {args.D} features)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "flops": cmd_flops,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI config file")
    shared.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command> or runs/<command>)")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--seeds", help="comma list or inclusive range, e.g. 0-4")
    shared.add_argument("--quiet", action="store_true")
    shared.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key")

    over = argparse.ArgumentParser(add_help=False)
    over.add_argument("--data", help="CSV dataset path")
    for name, typ in (("S", int), ("T", int), ("tau", int), ("N_S", int), ("d_h", int), ("epochs", int),
                      ("lr", float), ("batch-size", int), ("n-trials", int)):
        over.add_argument(f"--{name}", type=typ)
    over.add_argument("--mode", choices=["partition", "sampling"])

    p = argparse.ArgumentParser(prog="pmformer", description="Partial-multivariate transformer forecasting.")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[shared, over], help="train a model")
    sp.add_argument("--predictions", action="store_true", help="also write test predictions CSV")
    sp = sub.add_parser("eval", parents=[shared, over], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=list(D.SPLITS))
    sp = sub.add_parser("sweep", parents=[shared, over], help="sweep S, N_I or pool size")
    sp.add_argument("--axis", required=True, choices=["S", "NI", "alpha"])
    sp.add_argument("--values", required=True, help="comma list; 'max' allowed for alpha")
    sp.add_argument("--checkpoint", help="fixed checkpoint for --axis NI")
    sp = sub.add_parser("robustness", parents=[shared, over], help="feature-drop robustness")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--drop-fractions", default="0,0.25")
    sp.add_argument("--baseline", choices=["partial", "complete"], default="partial")
    sp = sub.add_parser("flops", parents=[shared], help="inter-feature attention FLOPs")
    sp.add_argument("--D", type=int, required=True)
    sp.add_argument("--S", type=int)
    sp.add_argument("--N_S", type=int, default=8)
    sp.add_argument("--d_h", type=int, default=256)
    sp.add_argument("--n_h", type=int, default=8)
    sp = sub.add_parser("synth", parents=[shared], help="write a block-correlated synthetic CSV")
    sp.add_argument("--D", type=int, default=8)
    sp.add_argument("--blocks", type=int, default=4)
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--noise", type=float, default=0.3)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command not in ("flops", "synth"):
            flags = {k: getattr(args, k, None) for k in FLAG_KEYS}
            cfg = resolve_config(args.config, args.set, flags)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"pmformer {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, TrainingError, PMformerError, OSError) as exc:
        print(f"pmformer {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
