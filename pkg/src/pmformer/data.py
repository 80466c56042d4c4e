"""CSV ingestion, normalisation, chronological splits, sliding windows and
synthetic block-correlated series."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class RawSeries:
    names: list[str]
    values: np.ndarray  # (N_steps, D)
    timestamps: list[str] | None = None

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]


def load_csv(path, has_timestamp: bool = True) -> RawSeries:
    """Read a header + comma-separated numeric body.

    Rows with missing or non-numeric cells are rejected with their 1-based
    file line and column name.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        first = 1 if has_timestamp else 0
        names = header[first:]
        if not names:
            raise DataError(f"{path}: no feature columns in header")
        rows, stamps = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
            vals = []
            for col, cell in zip(header[first:], row[first:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column {col!r}: non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {lineno}, column {col!r}: non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
            if has_timestamp:
                stamps.append(row[0])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawSeries(names, np.array(rows, dtype=np.float64), stamps if has_timestamp else None)


def save_csv(path, raw: RawSeries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        stamps = raw.timestamps
        w.writerow((["date"] if stamps else []) + list(raw.names))
        for i, row in enumerate(raw.values):
            w.writerow(([stamps[i]] if stamps else []) + [repr(float(v)) for v in row])
    return path


@dataclass
class WindowedDataset:
    normalized: np.ndarray  # (N_steps, D)
    norm_kind: str
    norm_stats: dict[str, np.ndarray]
    bounds: dict[str, tuple[int, int]]
    T: int
    tau: int
    names: list[str] = field(default_factory=list)

    @property
    def D(self) -> int:
        return self.normalized.shape[1]

    def starts(self, split: str) -> np.ndarray:
        lo, hi = self.bounds[split]
        n = hi - lo - (self.T + self.tau) + 1
        return np.arange(lo, lo + max(n, 0))

    @property
    def windows(self) -> list[tuple[int, str]]:
        return [(int(s), tag) for tag in SPLITS for s in self.starts(tag)]

    def batch(self, starts) -> tuple[np.ndarray, np.ndarray]:
        """Inputs ``(B, T, D)`` and targets ``(B, tau, D)`` for the given window starts."""
        starts = np.asarray(starts, dtype=np.intp)
        idx = starts[:, None] + np.arange(self.T + self.tau)[None, :]
        block = self.normalized[idx]
        return block[:, : self.T], block[:, self.T:]

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return self.batch(self.starts(split))

    def normalize(self, values: np.ndarray) -> np.ndarray:
        if self.norm_kind == "standard":
            return (values - self.norm_stats["mean"]) / self.norm_stats["std"]
        lo, hi = self.norm_stats["min"], self.norm_stats["max"]
        return (values - lo) / (hi - lo)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        if self.norm_kind == "standard":
            return values * self.norm_stats["std"] + self.norm_stats["mean"]
        lo, hi = self.norm_stats["min"], self.norm_stats["max"]
        return values * (hi - lo) + lo


def split_bounds(n_steps: int, split) -> dict[str, tuple[int, int]]:
    """Chronological split from ratios ``(train, val, test)`` or a dict of row counts."""
    if isinstance(split, dict):
        counts = [int(split.get(k, 0)) for k in SPLITS]
        if any(c < 0 for c in counts) or sum(counts) > n_steps:
            raise DataError(f"row counts {counts} invalid for {n_steps} rows")
        edges = np.cumsum([0] + counts)
    else:
        ratios = [float(r) for r in split]
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {split}")
        n_train = int(n_steps * ratios[0])
        n_test = int(n_steps * ratios[2])
        n_val = n_steps - n_train - n_test
        edges = np.cumsum([0, n_train, n_val, n_test])
    return {k: (int(edges[i]), int(edges[i + 1])) for i, k in enumerate(SPLITS)}


def make_windows(raw: RawSeries, T: int, tau: int, split=(0.7, 0.1, 0.2),
                 normalization: str = "standard") -> WindowedDataset:
    """Normalise with training-row statistics and index stride-1 windows per split.

    Windows never cross a split boundary.  A training split shorter than
    ``T + tau`` is an error; short val/test splits simply yield no windows.
    """
    if T < 1 or tau < 1:
        raise DataError(f"T and tau must be positive, got T={T}, tau={tau}")
    values = np.asarray(raw.values, dtype=np.float64)
    if np.isnan(values).any():
        rows = sorted(set(np.argwhere(np.isnan(values))[:, 0].tolist()))
        raise DataError(f"NaN values in rows {rows[:10]}")
    bounds = split_bounds(len(values), split)
    lo, hi = bounds["train"]
    if hi - lo < T + tau:
        raise DataError(f"train split has {hi - lo} rows, fewer than T + tau = {T + tau}")
    for tag in ("val", "test"):
        a, b = bounds[tag]
        if b - a < T + tau:
            log.warning("%s split has %d rows (< T + tau = %d); it yields no windows", tag, b - a, T + tau)
    train = values[lo:hi]
    if normalization == "standard":
        std = train.std(axis=0)
        stats = {"mean": train.mean(axis=0), "std": np.where(std > 0, std, 1.0)}
        normalized = (values - stats["mean"]) / stats["std"]
    elif normalization == "minmax":
        mn, mx = train.min(axis=0), train.max(axis=0)
        stats = {"min": mn, "max": np.where(mx > mn, mx, mn + 1.0)}
        normalized = (values - stats["min"]) / (stats["max"] - stats["min"])
    else:
        raise ParameterError(f"normalization must be 'standard' or 'minmax', got {normalization!r}")
    return WindowedDataset(normalized, normalization, stats, bounds, T, tau, list(raw.names))


def synth_block_correlated(D: int, blocks, N_steps: int, noise: float,
                           rng: np.random.Generator, ar_coef: float = 0.9,
                           ar_scale: float = 0.3) -> RawSeries:
    """Block-structured series: features in a block share one latent signal.

    Each latent is a sum of 2-3 sinusoids with random period, amplitude and
    phase plus an AR(1) process; each feature adds ``noise * N(0, 1)``.
    ``blocks`` is a list of index lists partitioning ``range(D)`` or an int
    number of equal contiguous blocks.
    """
    if isinstance(blocks, int):
        if blocks < 1 or D % blocks:
            raise ParameterError(f"cannot split D={D} into {blocks} equal blocks")
        size = D // blocks
        blocks = [list(range(b * size, (b + 1) * size)) for b in range(blocks)]
    flat = sorted(int(i) for b in blocks for i in b)
    if flat != list(range(D)) or any(len(b) == 0 for b in blocks):
        raise ParameterError(f"blocks {blocks} do not partition range({D})")
    if noise < 0 or N_steps < 1:
        raise ParameterError(f"need noise >= 0 and N_steps >= 1, got {noise}, {N_steps}")
    t = np.arange(N_steps, dtype=np.float64)
    values = np.empty((N_steps, D))
    for block in blocks:
        latent = np.zeros(N_steps)
        for _ in range(int(rng.integers(2, 4))):
            period = rng.uniform(8.0, 96.0)
            latent += rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        eps = rng.standard_normal(N_steps) * ar_scale
        ar = np.empty(N_steps)
        ar[0] = eps[0]
        for i in range(1, N_steps):
            ar[i] = ar_coef * ar[i - 1] + eps[i]
        latent += ar
        for j in block:
            values[:, j] = latent + noise * rng.standard_normal(N_steps)
    names = [f"f{j}" for j in range(D)]
    return RawSeries(names, values, None)


def drop_features(x: np.ndarray, fraction: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Remove ``floor(fraction * D)`` random columns of a ``(..., T, D)`` window."""
    if not 0.0 <= fraction < 1.0:
        raise ParameterError(f"drop fraction must lie in [0, 1), got {fraction}")
    x = np.asarray(x)
    D = x.shape[-1]
    n_drop = math.floor(fraction * D)
    if n_drop >= D:
        raise ParameterError(f"dropping {n_drop} of {D} features leaves none")
    dropped = rng.choice(D, size=n_drop, replace=False) if n_drop else np.array([], dtype=np.intp)
    kept = np.setdiff1d(np.arange(D), dropped)
    return x[..., kept], kept


def kept_indices_batch(D: int, fraction: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, D - floor(fraction * D))`` array of per-window kept feature indices."""
    out = [drop_features(np.zeros((1, D)), fraction, rng)[1] for _ in range(n)]
    return np.array(out, dtype=np.intp).reshape(n, -1)
