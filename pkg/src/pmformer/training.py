"""Training loop with random-partition or random-sampling subset selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import AdamState, make_rng
from .errors import ConfigError, DataError, TrainingError
from .evaluation import evaluate_split
from .subsets import SubsetPool, n_subsets, random_partition, random_subset

log = logging.getLogger(__name__)

# RNG stream ids derived from the run seed
_INIT, _SHUFFLE, _SUBSETS, _DROPOUT, _EVAL = range(5)


@dataclass
class TrainConfig:
    use_random_partition: bool = True
    n_subsets: int | None = None  # N_U; ceil(D/S) when partitioning
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    pool: SubsetPool | None = None
    patience: int | None = 10
    grad_clip: float | None = None
    eval_n_trials: int = 1

    def resolve_n_subsets(self, D: int, S: int) -> int:
        n_u = n_subsets(D, S)
        if self.use_random_partition:
            if self.n_subsets not in (None, n_u):
                raise ConfigError(f"random partitioning needs N_U = ceil(D/S) = {n_u}, got {self.n_subsets}")
            return n_u
        return n_u if self.n_subsets is None else int(self.n_subsets)

    def validate(self, model_config: M.ModelConfig) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"batch_size and epochs must be >= 1, got {self.batch_size}, {self.epochs}")
        if self.resolve_n_subsets(model_config.D, model_config.S) < 1:
            raise ConfigError("N_U must be >= 1")
        if self.pool is not None:
            if self.use_random_partition:
                raise ConfigError("a subset pool applies to random-sampling training only")
            if (self.pool.D, self.pool.S) != (model_config.D, model_config.S):
                raise ConfigError(f"pool built for D={self.pool.D}, S={self.pool.S} "
                                  f"but model has D={model_config.D}, S={model_config.S}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool"] = None if self.pool is None else {
            "alpha": self.pool.alpha,
            "size": None if self.pool.subsets is None else len(self.pool.subsets),
        }
        return d


@dataclass
class TrainState:
    params: M.Params
    adam: AdamState
    rng: np.random.Generator
    dropout_rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    train_losses: list[float] = field(default_factory=list)
    val_mses: list[float] = field(default_factory=list)
    coverage: list[float] = field(default_factory=list)
    last_subsets: np.ndarray | None = None


def init_state(model_config: M.ModelConfig, train_config: TrainConfig) -> TrainState:
    seed = train_config.seed
    params = M.init_params(model_config, make_rng(seed, _INIT))
    return TrainState(params, AdamState(), make_rng(seed, _SUBSETS), make_rng(seed, _DROPOUT))


def draw_subsets(D: int, S: int, train_config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """``(N_U, S)`` subsets for one iteration."""
    if train_config.use_random_partition:
        return random_partition(D, S, rng).as_array()
    n_u = train_config.resolve_n_subsets(D, S)
    if train_config.pool is not None:
        return np.array([train_config.pool.draw(rng) for _ in range(n_u)], dtype=np.intp)
    return np.array([random_subset(D, S, rng) for _ in range(n_u)], dtype=np.intp)


def stack_subsets(x: np.ndarray, subsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gather ``(B, L, D)`` columns into ``(N_U * B, L, S)`` plus per-row subset ids."""
    n_u, s = subsets.shape
    B, length, _ = x.shape
    xs = x[:, :, subsets]  # (B, L, N_U, S)
    xs = xs.transpose(2, 0, 1, 3).reshape(n_u * B, length, s)
    return xs, np.repeat(subsets, B, axis=0)


def subset_loss(x: np.ndarray, y: np.ndarray, subsets: np.ndarray, params: M.Params,
                config: M.ModelConfig, rng=None, train: bool = False) -> ad.Tensor:
    """Mean over subsets of per-subset MSE.

    All subsets share one size, so the mean of per-subset MSEs equals the MSE
    over the stacked batch and one forward pass covers every subset.
    """
    xs, rows = stack_subsets(x, subsets)
    ys, _ = stack_subsets(y, subsets)
    pred = M.forward(xs, rows, params, config, rng=rng, train=train)
    return ad.mse_reduce(pred, ys)


def train_step(batch, state: TrainState, model_config: M.ModelConfig,
               train_config: TrainConfig) -> float:
    x, y = (np.asarray(a, dtype=np.float64) for a in batch)
    D, S = model_config.D, model_config.S
    if x.ndim != 3 or x.shape[1:] != (model_config.T, D) or y.shape != (x.shape[0], model_config.tau, D):
        raise DataError(f"batch shapes {x.shape}, {y.shape} do not match config "
                        f"(T={model_config.T}, tau={model_config.tau}, D={D})")
    subsets = draw_subsets(D, S, train_config, state.rng)
    state.last_subsets = subsets
    state.coverage.append(len(np.unique(subsets)) / D)

    for p in state.params.values():
        p.zero_grad()
    loss = subset_loss(x, y, subsets, state.params, model_config, state.dropout_rng, train=True)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {state.epoch}, step {state.step}")
    ad.backward(loss)

    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.params.items()}
    if train_config.grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > train_config.grad_clip:
            grads = {k: g * (train_config.grad_clip / norm) for k, g in grads.items()}
    arrays = {k: p.data for k, p in state.params.items()}
    new, state.adam = ad.adam_step(arrays, grads, state.adam, lr=train_config.lr)
    for k, p in state.params.items():
        p.data = new[k]
    state.step += 1
    return value


def train(dataset, model_config: M.ModelConfig, train_config: TrainConfig,
          state: TrainState | None = None) -> tuple[TrainState, dict]:
    """Run epochs of shuffled mini-batches with validation-based early stopping.

    On return ``state.params`` holds the best-validation parameters (the last
    ones if there are no validation windows).
    """
    train_config.validate(model_config)
    if dataset.D != model_config.D:
        raise ConfigError(f"dataset has D={dataset.D} features, model config D={model_config.D}")
    if (dataset.T, dataset.tau) != (model_config.T, model_config.tau):
        raise ConfigError(f"dataset windows (T={dataset.T}, tau={dataset.tau}) do not match model "
                          f"(T={model_config.T}, tau={model_config.tau})")
    starts = dataset.starts("train")
    if len(starts) == 0:
        raise DataError("empty training split")
    has_val = len(dataset.starts("val")) > 0
    state = state or init_state(model_config, train_config)
    shuffle_rng = make_rng(train_config.seed, _SHUFFLE)
    t0 = time.perf_counter()
    stale = 0
    for epoch in range(train_config.epochs):
        state.epoch = epoch
        order = shuffle_rng.permutation(starts)
        losses = []
        for lo in range(0, len(order), train_config.batch_size):
            batch = dataset.batch(order[lo: lo + train_config.batch_size])
            losses.append(train_step(batch, state, model_config, train_config))
        state.train_losses.append(float(np.mean(losses)))
        if has_val:
            val = evaluate_split(dataset, "val", state.params, model_config,
                                 train_config.eval_n_trials, seed=train_config.seed + _EVAL)["mse"]
        else:
            val = math.nan
        state.val_mses.append(val)
        log.debug("epoch %d train %.5f val %.5f", epoch, state.train_losses[-1], val)
        if not has_val or val < state.best_val:
            if has_val:
                state.best_val = val
            state.best_epoch = epoch
            state.best_params = M.snapshot(state.params)
            stale = 0
        else:
            stale += 1
            if train_config.patience is not None and stale >= train_config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break
    for k, arr in state.best_params.items():
        state.params[k].data = arr.copy()
    report = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "seed": train_config.seed,
        "epochs_run": len(state.train_losses),
        "train_loss": state.train_losses,
        "val_mse": state.val_mses,
        "best_val": state.best_val if has_val else None,
        "best_epoch": state.best_epoch,
        "coverage_mean": float(np.mean(state.coverage)) if state.coverage else None,
        "coverage_min": float(np.min(state.coverage)) if state.coverage else None,
        "wall_clock_s": time.perf_counter() - t0,
    }
    return state, report
