"""Feature-subset sampling: random subsets, random partitions, pools, and
attention-guided grouping."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ContractError, ParameterError

MAX = "max"


@dataclass(frozen=True)
class FeaturePartition:
    """``subsets`` covers every feature; ``augmented`` lists ``(position, index)``
    pairs for the padding repeats whose predictions are discarded on assembly."""

    subsets: tuple[tuple[int, ...], ...]
    augmented: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    @property
    def n_subsets(self) -> int:
        return len(self.subsets)

    def as_array(self) -> np.ndarray:
        return np.array(self.subsets, dtype=np.intp)

    def keep_mask(self) -> np.ndarray:
        """Boolean ``(N_U, S)`` mask, false where an entry is an augmented repeat."""
        mask = np.ones((len(self.subsets), len(self.subsets[0])), dtype=bool)
        for g, idx in self.augmented:
            mask[g, self.subsets[g].index(idx)] = False
        return mask

    def remap(self, labels: Sequence[int]) -> "FeaturePartition":
        """Rename position ``i`` to ``labels[i]`` (used when partitioning a kept subset)."""
        lab = list(labels)
        return FeaturePartition(
            tuple(tuple(lab[i] for i in sub) for sub in self.subsets),
            frozenset((g, lab[i]) for g, i in self.augmented),
        )


@dataclass(frozen=True)
class SubsetPool:
    """Restricted set of trainable subsets; ``subsets is None`` means all C(D, S)."""

    D: int
    S: int
    alpha: int | str
    subsets: tuple[tuple[int, ...], ...] | None

    @property
    def is_max(self) -> bool:
        return self.subsets is None

    def draw(self, rng: np.random.Generator) -> list[int]:
        if self.subsets is None:
            return random_subset(self.D, self.S, rng)
        return list(self.subsets[int(rng.integers(len(self.subsets)))])

    def __contains__(self, subset) -> bool:
        if self.subsets is None:
            s = sorted(int(i) for i in subset)
            return len(set(s)) == self.S and all(0 <= i < self.D for i in s)
        return tuple(sorted(int(i) for i in subset)) in set(self.subsets)


def _check_sizes(D: int, S: int) -> None:
    if D < 1 or S < 1:
        raise ParameterError(f"D and S must be positive, got D={D}, S={S}")
    if S > D:
        raise ParameterError(f"subset size S={S} exceeds feature count D={D}")


def n_subsets(D: int, S: int) -> int:
    return math.ceil(D / S)


def random_subset(D: int, S: int, rng: np.random.Generator) -> list[int]:
    """Uniform S-combination of range(D), ascending."""
    _check_sizes(D, S)
    return sorted(int(i) for i in rng.choice(D, size=S, replace=False))


def random_partition(D: int, S: int, rng: np.random.Generator) -> FeaturePartition:
    """Random partition of range(D) into ceil(D/S) subsets of size S.

    When S does not divide D, R = D % S features form the last subset together
    with S - R distinct repeats drawn from the remaining features.
    """
    _check_sizes(D, S)
    perm = rng.permutation(D)
    R = D % S
    if R == 0:
        chunks = perm.reshape(D // S, S)
        return FeaturePartition(tuple(tuple(sorted(int(i) for i in c)) for c in chunks))
    v_minus, v_plus = perm[:R], perm[R:]
    full = [tuple(sorted(int(i) for i in c)) for c in v_plus.reshape(-1, S)]
    repeats = rng.choice(v_plus, size=S - R, replace=False)
    last = tuple(sorted(int(i) for i in np.concatenate([v_minus, repeats])))
    g = len(full)
    return FeaturePartition(tuple(full) + (last,), frozenset((g, int(i)) for i in repeats))


def check_partition(part: FeaturePartition, D: int, S: int) -> None:
    """Raise ContractError unless ``part`` satisfies the partition invariants."""
    n_u = n_subsets(D, S)
    if part.n_subsets != n_u:
        raise ContractError(f"expected {n_u} subsets, got {part.n_subsets}")
    counts = np.zeros(D, dtype=int)
    for sub in part.subsets:
        if len(sub) != S or len(set(sub)) != S:
            raise ContractError(f"subset {sub} is not {S} distinct indices")
        for i in sub:
            if not 0 <= i < D:
                raise ContractError(f"index {i} out of range [0, {D})")
            counts[i] += 1
    repeated = {idx for _, idx in part.augmented}
    if len(repeated) != len(part.augmented):
        raise ContractError("an index is marked augmented twice")
    for g, idx in part.augmented:
        if idx not in part.subsets[g]:
            raise ContractError(f"augmented record {(g, idx)} not present in subset {g}")
    for i in range(D):
        want = 2 if i in repeated else 1
        if counts[i] != want:
            raise ContractError(f"feature {i} appears {counts[i]} times, expected {want}")
    if len(repeated) != n_u * S - D:
        raise ContractError(f"{len(repeated)} repeats recorded, expected {n_u * S - D}")


def build_pool(D: int, S: int, alpha: int | str, N_U: int | None,
               rng: np.random.Generator) -> SubsetPool:
    """Draw ``alpha * N_U`` distinct subsets uniformly; ``alpha='max'`` keeps all."""
    _check_sizes(D, S)
    if isinstance(alpha, str):
        if alpha.lower() != MAX:
            raise ParameterError(f"alpha must be a positive integer or 'max', got {alpha!r}")
        return SubsetPool(D, S, MAX, None)
    if alpha < 1:
        raise ParameterError(f"alpha must be >= 1, got {alpha}")
    n_u = n_subsets(D, S) if N_U is None else N_U
    size = alpha * n_u
    total = math.comb(D, S)
    if size > total:
        raise ParameterError(
            f"pool of alpha*N_U={alpha}*{n_u}={size} subsets exceeds C({D},{S})={total}")
    if total <= 200_000:
        combos = list(itertools.combinations(range(D), S))
        pick = rng.choice(total, size=size, replace=False)
        chosen = [combos[int(i)] for i in pick]
    else:
        seen: set[tuple[int, ...]] = set()
        chosen = []
        while len(chosen) < size:
            sub = tuple(random_subset(D, S, rng))
            if sub not in seen:
                seen.add(sub)
                chosen.append(sub)
    return SubsetPool(D, S, int(alpha), tuple(chosen))


def attention_guided_subsets(scores, S: int,
                             mode: Literal["highest", "lowest"] = "highest") -> FeaturePartition:
    """Greedy grouping from a D x D attention-score matrix.

    Seeds are taken in descending row-sum order (ties by index).  Each seed
    collects the S - 1 ungrouped features it scores highest (or lowest).  If
    fewer remain for the final group, it is topped up from already-grouped
    features by the same criterion and those entries are marked augmented.
    """
    A = np.asarray(scores, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"attention scores must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError("attention scores must be finite")
    if mode not in ("highest", "lowest"):
        raise ParameterError(f"mode must be 'highest' or 'lowest', got {mode!r}")
    D = A.shape[0]
    _check_sizes(D, S)
    sign = -1.0 if mode == "highest" else 1.0
    seed_order = np.argsort(-A.sum(axis=1), kind="stable")
    grouped = np.zeros(D, dtype=bool)
    subsets, augmented = [], set()
    for seed in seed_order:
        if grouped[seed]:
            continue
        grouped[seed] = True
        # stable sort: ties resolve to the lower feature index
        ranked = [int(j) for j in np.argsort(sign * A[seed], kind="stable") if j != seed]
        fresh = [j for j in ranked if not grouped[j]][: S - 1]
        grouped[fresh] = True
        members = [int(seed)] + fresh
        pad = [j for j in ranked if j not in members][: S - len(members)]
        g = len(subsets)
        augmented.update((g, j) for j in pad)
        subsets.append(tuple(sorted(members + pad)))
    return FeaturePartition(tuple(subsets), frozenset(augmented))


def at_least_once_probability(p: float, n_trials: int) -> float:
    """Probability that an event of per-trial probability ``p`` occurs in ``n_trials``."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"p must lie in [0, 1], got {p}")
    if n_trials < 1:
        raise ParameterError(f"N_I must be >= 1, got {n_trials}")
    return 1.0 - (1.0 - p) ** n_trials


# ---------------------------------------------------------------------------
# line-oriented audit format: one subset per line, space-separated indices;
# augmented entries carry a trailing '*'.


def format_subsets(subsets: FeaturePartition | SubsetPool | Sequence[Sequence[int]]) -> str:
    if isinstance(subsets, SubsetPool):
        if subsets.subsets is None:
            return f"# pool D={subsets.D} S={subsets.S} alpha=max\n"
        return "".join(" ".join(map(str, s)) + "\n" for s in subsets.subsets)
    if isinstance(subsets, FeaturePartition):
        lines = []
        for g, sub in enumerate(subsets.subsets):
            lines.append(" ".join(f"{i}*" if (g, i) in subsets.augmented else str(i) for i in sub))
        return "\n".join(lines) + "\n"
    return "".join(" ".join(str(int(i)) for i in s) + "\n" for s in subsets)


def parse_subsets(text: str) -> FeaturePartition:
    subsets, augmented = [], set()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sub = []
        for tok in line.split():
            if tok.endswith("*"):
                augmented.add((len(subsets), int(tok[:-1])))
                tok = tok[:-1]
            sub.append(int(tok))
        subsets.append(tuple(sub))
    return FeaturePartition(tuple(subsets), frozenset(augmented))


def write_subsets(path, subsets) -> Path:
    path = Path(path)
    path.write_text(format_subsets(subsets))
    return path
