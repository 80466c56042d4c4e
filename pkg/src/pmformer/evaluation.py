"""Metrics, partition-averaged inference, attention-guided inference,
feature-drop robustness and inter-feature attention FLOPs accounting."""

from __future__ import annotations

import math

import numpy as np

from . import model as M
from .autodiff import make_rng, no_grad
from .errors import ContractError, ParameterError
from .subsets import FeaturePartition, attention_guided_subsets, random_partition

# multiply-adds per attention product; FLOPs = 2 * MACs
FLOPS_PER_MAC = 2


def mse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"mse shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"mae shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


# ---------------------------------------------------------------------------
# inference


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ContractError(f"expected input of shape (T, D) or (B, T, D), got {x.shape}")
    return x, False


def assemble(x: np.ndarray, partitions: list[FeaturePartition], params: M.Params,
             config: M.ModelConfig, features: np.ndarray | None = None,
             trace: M.ForwardTrace | None = None) -> np.ndarray:
    """Run every subset of each row's partition and stitch a ``(B, tau, n)`` forecast.

    ``partitions[b]`` indexes the ``n`` columns of ``x[b]``; ``features[b]``
    maps those columns to model feature ids (identity when omitted).
    Predictions for augmented repeats are discarded.
    """
    B, _, n = x.shape
    if features is None:
        features = np.broadcast_to(np.arange(n), (B, n))
    pos = np.stack([p.as_array() for p in partitions])  # (B, N_U, S)
    keep = np.stack([p.keep_mask() for p in partitions])
    n_u, s = pos.shape[1:]
    rows = np.arange(B)[:, None, None]
    feat_ids = features[rows, pos]  # (B, N_U, S)
    xs = np.take_along_axis(x[:, None, :, :], pos[:, :, None, :], axis=3)  # (B, N_U, T, S)
    xs = xs.reshape(B * n_u, config.T, s)
    with no_grad():
        out = M.forward(xs, feat_ids.reshape(B * n_u, s), params, config, trace=trace).data
    out = out.reshape(B, n_u, config.tau, s)
    pred = np.full((B, config.tau, n), np.nan)
    bb, gg, jj = np.nonzero(keep)
    pred[bb, :, pos[bb, gg, jj]] = out[bb, gg, :, jj]
    if np.isnan(pred).any():
        raise ContractError("assembled prediction does not cover every feature")
    return pred


def infer_partition_averaged(x, params: M.Params, config: M.ModelConfig, n_trials: int,
                             rng: np.random.Generator, features=None,
                             return_trials: bool = False, trace: M.ForwardTrace | None = None):
    """Average ``n_trials`` random-partition forecasts.

    ``x`` is ``(T, n)`` or ``(B, T, n)``.  Each trial draws a fresh partition
    per window.  With ``features`` (shape ``(n,)`` or ``(B, n)``) only those
    model features are partitioned, which is how dropped inputs are excluded.
    """
    if n_trials < 1:
        raise ParameterError(f"N_I must be >= 1, got {n_trials}")
    xb, single = _as_batch(x)
    B, _, n = xb.shape
    if features is not None:
        features = np.asarray(features, dtype=np.intp)
        features = np.broadcast_to(features, (B, n)) if features.ndim == 1 else features
        if features.shape != (B, n):
            raise ContractError(f"features shape {features.shape} does not match input {xb.shape}")
    elif n != config.D:
        raise ContractError(f"input has {n} columns but the model expects D={config.D}")
    if n < config.S:
        raise ParameterError(f"only {n} features available for subsets of size S={config.S}")
    trials = []
    for _ in range(n_trials):
        parts = [random_partition(n, config.S, rng) for _ in range(B)]
        trials.append(assemble(xb, parts, params, config, features, trace))
    mean = np.mean(trials, axis=0)
    if single:
        mean = mean[0]
        trials = [t[0] for t in trials]
    return (mean, trials) if return_trials else mean


def attention_scores(x, params: M.Params, config: M.ModelConfig) -> np.ndarray:
    """D x D feature-attention map of a full-set forward pass, averaged over
    windows, segments, heads and blocks."""
    xb, _ = _as_batch(x)
    trace = M.ForwardTrace()
    with no_grad():
        M.forward(xb, np.arange(config.D), params, config, trace=trace)
    return np.mean([p.reshape(-1, config.D, config.D).mean(axis=0) for p in trace.feature_probs], axis=0)


def infer_attention_guided(x, params: M.Params, config: M.ModelConfig, mode: str = "highest",
                           scores: np.ndarray | None = None, return_partition: bool = False):
    """Forecast with one partition grouped greedily from attention scores."""
    xb, single = _as_batch(x)
    if scores is None:
        scores = attention_scores(xb, params, config)
    part = attention_guided_subsets(scores, config.S, mode)
    pred = assemble(xb, [part] * xb.shape[0], params, config)
    pred = pred[0] if single else pred
    return (pred, part) if return_partition else pred


def predict_complete(x, params: M.Params, config: M.ModelConfig) -> np.ndarray:
    xb, single = _as_batch(x)
    with no_grad():
        pred = M.forward(xb, np.arange(config.D), params, config).data
    return pred[0] if single else pred


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def predict_split(dataset, split: str, params: M.Params, config: M.ModelConfig,
                  n_trials: int = 1, seed: int = 0, chunk: int = 256):
    """Normalised-space predictions and targets for every window of ``split``."""
    x, y = dataset.split_arrays(split)
    rng = make_rng(seed, 0xE7A1)
    preds = [infer_partition_averaged(x[sl], params, config, n_trials, rng)
             for sl in _chunks(len(x), chunk)]
    pred = np.concatenate(preds) if preds else np.zeros_like(y)
    return pred, y


def evaluate_split(dataset, split: str, params: M.Params, config: M.ModelConfig,
                   n_trials: int = 1, seed: int = 0) -> dict:
    pred, y = predict_split(dataset, split, params, config, n_trials, seed)
    if len(y) == 0:
        return {"mse": math.nan, "mae": math.nan, "n_windows": 0}
    err = pred - y
    return {
        "mse": mse(pred, y),
        "mae": mae(pred, y),
        "mse_per_horizon": (err ** 2).mean(axis=(0, 2)).tolist(),
        "mae_per_horizon": np.abs(err).mean(axis=(0, 2)).tolist(),
        "n_windows": int(len(y)),
    }


# ---------------------------------------------------------------------------
# robustness to missing features


def robustness_drop(x, y, params: M.Params, config: M.ModelConfig, fractions, baseline: str,
                    seed: int = 0, n_trials: int = 1, chunk: int = 256) -> dict[float, dict]:
    """MSE increase rate on undropped features when inputs lose features.

    ``partial`` partitions only the kept features; ``complete`` zero-fills the
    dropped columns and attends over all D.  The same partition stream is used
    for the full and the reduced pass so a zero fraction gives a zero rate.
    """
    if baseline not in ("partial", "complete"):
        raise ParameterError(f"baseline must be 'partial' or 'complete', got {baseline!r}")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    B, _, D = x.shape
    if D != config.D:
        raise ContractError(f"inputs have {D} features, model expects {config.D}")
    if baseline == "complete" and config.S != config.D:
        raise ParameterError("the complete baseline needs a model with S = D")
    results = {}
    for k, frac in enumerate(fractions):
        n_drop = math.floor(frac * D)
        if not 0.0 <= frac < 1.0 or n_drop >= D:
            raise ParameterError(f"invalid drop fraction {frac}")
        drop_rng = make_rng(seed, 0xD409, k)
        kept = np.stack([np.sort(drop_rng.choice(D, size=D - n_drop, replace=False)) for _ in range(B)])
        rows = np.arange(B)[:, None]
        y_kept = np.take_along_axis(y, kept[:, None, :], axis=2)
        if baseline == "partial":
            full, reduced = [], []
            for sl in _chunks(B, chunk):
                full.append(infer_partition_averaged(x[sl], params, config, n_trials,
                                                     make_rng(seed, 0xFA11, k, sl.start)))
                x_kept = np.take_along_axis(x[sl], kept[sl][:, None, :], axis=2)
                reduced.append(infer_partition_averaged(x_kept, params, config, n_trials,
                                                        make_rng(seed, 0xFA11, k, sl.start),
                                                        features=kept[sl]))
            full = np.take_along_axis(np.concatenate(full), kept[:, None, :], axis=2)
            reduced = np.concatenate(reduced)
        else:
            mask = np.zeros((B, D), dtype=bool)
            mask[rows, kept] = True
            x_zero = np.where(mask[:, None, :], x, 0.0)
            full = np.concatenate([predict_complete(x[sl], params, config) for sl in _chunks(B, chunk)])
            reduced = np.concatenate([predict_complete(x_zero[sl], params, config) for sl in _chunks(B, chunk)])
            full = np.take_along_axis(full, kept[:, None, :], axis=2)
            reduced = np.take_along_axis(reduced, kept[:, None, :], axis=2)
        m_full, m_drop = mse(full, y_kept), mse(reduced, y_kept)
        results[float(frac)] = {
            "mse_full": m_full,
            "mse_dropped": m_drop,
            "increase_rate": (m_drop - m_full) / m_full,
            "n_dropped": n_drop,
        }
    return results


# ---------------------------------------------------------------------------
# FLOPs


def flops_inter_feature(D: int, S: int, N_S: int, d_h: int, n_h: int, scheme: str = "pmformer") -> int:
    """Multiply-adds of the feature-attention score and value products, per block.

    Projection and softmax costs are excluded; they are identical across
    schemes.  ``n_h`` does not change the count since heads split ``d_h``.
    """
    if min(D, S, N_S, d_h, n_h) < 1 or S > D:
        raise ParameterError(f"invalid sizes D={D} S={S} N_S={N_S} d_h={d_h} n_h={n_h}")
    if scheme == "pmformer":
        return math.ceil(D / S) * N_S * 2 * S * S * d_h
    if scheme == "full":
        return N_S * 2 * D * D * d_h
    raise ParameterError(f"scheme must be 'pmformer' or 'full', got {scheme!r}")


def counted_inter_feature_macs(params: M.Params, config: M.ModelConfig, rng: np.random.Generator,
                               scheme: str = "pmformer") -> int:
    """Per-block feature-attention MACs measured by an instrumented forward pass
    on one random window."""
    x = rng.standard_normal((1, config.T, config.D))
    trace = M.ForwardTrace()
    if scheme == "pmformer":
        infer_partition_averaged(x, params, config, 1, rng, trace=trace)
    else:
        with no_grad():
            M.forward(x, np.arange(config.D), params, config, trace=trace)
    total = trace.macs["feature"]
    if total % config.L:
        raise ContractError("feature-attention count not evenly split across blocks")
    return total // config.L
