"""PMformer: segment embedding, temporal/feature attention blocks, linear head.

Hidden states are laid out as ``(..., N_S, s, d_h)``: segment, feature slot,
hidden.  Any number of leading batch axes is accepted.  ``subset`` is either a
single index vector of length ``s`` shared by the batch, or an array of shape
``(B, s)`` giving one subset per leading row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ContractError

CHECKPOINT_FORMAT = "pmformer-checkpoint-v1"

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    D: int
    S: int
    T: int
    tau: int
    N_S: int
    d_h: int = 16
    n_h: int = 2
    L: int = 1
    d_ff: int = 32
    r_dropout: float = 0.0
    activation: str = "gelu"
    prenorm: bool = False
    instance_norm: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if not 1 <= self.S <= self.D:
            problems.append(f"1 <= S <= D (S={self.S}, D={self.D})")
        if self.T < 1 or self.N_S < 1 or self.T % self.N_S:
            problems.append(f"T divisible by N_S (T={self.T}, N_S={self.N_S})")
        if self.d_h < 1 or self.n_h < 1 or self.d_h % self.n_h:
            problems.append(f"d_h divisible by n_h (d_h={self.d_h}, n_h={self.n_h})")
        if self.L < 1:
            problems.append(f"L >= 1 (L={self.L})")
        if self.tau < 1:
            problems.append(f"tau >= 1 (tau={self.tau})")
        if self.d_ff < 1:
            problems.append(f"d_ff >= 1 (d_ff={self.d_ff})")
        if not 0.0 <= self.r_dropout < 1.0:
            problems.append(f"0 <= r_dropout < 1 (r_dropout={self.r_dropout})")
        if self.activation not in ad.ACTIVATIONS:
            problems.append(f"activation in {sorted(ad.ACTIVATIONS)} (got {self.activation!r})")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @property
    def segment_len(self) -> int:
        return self.T // self.N_S

    @property
    def head_dim(self) -> int:
        return self.d_h // self.n_h

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardTrace:
    """Optional instrumentation filled in during a forward pass.

    ``macs`` counts multiply-adds of the two attention products (scores and
    probabilities times values) per attention kind; ``feature_probs`` keeps
    the pre-dropout feature-attention probabilities of every block.
    """

    macs: dict[str, int] = field(default_factory=lambda: {"temporal": 0, "feature": 0})
    feature_probs: list[np.ndarray] = field(default_factory=list)
    temporal_probs: list[np.ndarray] = field(default_factory=list)
    subsets: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameters

_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_h, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "segment.weight": (config.segment_len, d),
        "segment.bias": (d,),
        "e_time": (config.N_S, d),
        "e_feat": (config.D, d),
    }
    for layer in range(config.L):
        pre = f"blocks.{layer}"
        for kind in ("temporal", "feature"):
            for k in _ATTN_KEYS:
                shapes[f"{pre}.{kind}.{k}"] = (d, d) if k[0] == "w" else (d,)
        shapes[f"{pre}.mlp.w1"] = (d, ff)
        shapes[f"{pre}.mlp.b1"] = (ff,)
        shapes[f"{pre}.mlp.w2"] = (ff, d)
        shapes[f"{pre}.mlp.b2"] = (d,)
        if config.prenorm:
            for norm in ("norm1", "norm2"):
                shapes[f"{pre}.{norm}.gain"] = (d,)
                shapes[f"{pre}.{norm}.bias"] = (d,)
    shapes["head.weight"] = (config.N_S * d, config.tau)
    shapes["head.bias"] = (config.tau,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases, N(0, 0.02^2) positional tables."""
    config.validate()
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name in ("e_time", "e_feat"):
            arr = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def param_count(params: Params) -> int:
    return sum(p.data.size for p in params.values())


def snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(a.copy(), requires_grad=True, name=k) for k, a in arrays.items()}


def _block(params: Params, layer: int) -> dict[str, Tensor]:
    pre = f"blocks.{layer}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------------------
# layers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def mhsa(q_in: Tensor, k_in: Tensor, v_in: Tensor, p: dict[str, Tensor], prefix: str,
         n_heads: int, dropout_p: float = 0.0, rng=None, train: bool = False,
         trace: ForwardTrace | None = None, kind: str = "") -> Tensor:
    """Multi-head attention over axis -2 of ``(..., n, d)`` inputs."""
    if q_in.shape != k_in.shape or k_in.shape != v_in.shape:
        raise ContractError(
            f"attention inputs must share shape: q{q_in.shape} k{k_in.shape} v{v_in.shape}")
    *lead, n, d = q_in.shape
    dk = d // n_heads

    def heads(x: Tensor, w: str, b: str) -> Tensor:
        y = _linear(x, p[prefix + w], p[prefix + b])
        return ad.swapaxes(y.reshape(*lead, n, n_heads, dk), -2, -3)

    q = heads(q_in, "wq", "bq")
    k = heads(k_in, "wk", "bk")
    v = heads(v_in, "wv", "bv")
    scores = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    probs = ad.softmax(scores, axis=-1)
    if trace is not None:
        rows = int(np.prod(lead, dtype=np.int64)) * n_heads
        trace.macs[kind] = trace.macs.get(kind, 0) + 2 * rows * n * n * dk
        getattr(trace, f"{kind}_probs").append(probs.data.copy())
    probs = ad.dropout(probs, dropout_p, rng, train)
    out = ad.swapaxes(ad.matmul(probs, v), -2, -3).reshape(*lead, n, d)
    return _linear(out, p[prefix + "wo"], p[prefix + "bo"])


def temporal_attention(h: Tensor, block: dict[str, Tensor], config: ModelConfig,
                       rng=None, train: bool = False, trace: ForwardTrace | None = None) -> Tensor:
    """Self-attention across the N_S segment tokens of each feature slot."""
    hs = ad.swapaxes(h, -2, -3)
    out = mhsa(hs, hs, hs, block, "temporal.", config.n_h, config.r_dropout, rng, train,
               trace, "temporal")
    return ad.swapaxes(out, -2, -3)


def feature_attention(h: Tensor, v: Tensor, block: dict[str, Tensor], config: ModelConfig,
                      rng=None, train: bool = False, trace: ForwardTrace | None = None) -> Tensor:
    """Attention across the feature slots at each segment; values come from ``v``."""
    if h.shape != v.shape:
        raise ContractError(f"feature attention needs h and v of equal shape: {h.shape} vs {v.shape}")
    return mhsa(h, h, v, block, "feature.", config.n_h, config.r_dropout, rng, train,
                trace, "feature")


def mlp(h: Tensor, block: dict[str, Tensor], config: ModelConfig, rng=None,
        train: bool = False) -> Tensor:
    z = ad.ACTIVATIONS[config.activation](_linear(h, block["mlp.w1"], block["mlp.b1"]))
    z = ad.dropout(z, config.r_dropout, rng, train)
    return _linear(z, block["mlp.w2"], block["mlp.b2"])


def block_forward(h: Tensor, block: dict[str, Tensor], config: ModelConfig, rng=None,
                  train: bool = False, trace: ForwardTrace | None = None) -> Tensor:
    """h_bar = h + FA(h, TA(h)); out = h_bar + MLP(h_bar)."""
    src = ad.layer_norm(h, block["norm1.gain"], block["norm1.bias"]) if config.prenorm else h
    h_bar = ad.add(h, feature_attention(src, temporal_attention(src, block, config, rng, train, trace),
                                        block, config, rng, train, trace))
    src = ad.layer_norm(h_bar, block["norm2.gain"], block["norm2.bias"]) if config.prenorm else h_bar
    return ad.add(h_bar, mlp(src, block, config, rng, train))


def _check_subset(subset, x_shape: tuple[int, ...], config: ModelConfig) -> np.ndarray:
    sub = np.asarray(subset, dtype=np.intp)
    if sub.ndim not in (1, 2) or sub.shape[-1] != x_shape[-1]:
        raise ContractError(f"subset shape {sub.shape} does not match input columns {x_shape}")
    if sub.ndim == 2 and (len(x_shape) != 3 or sub.shape[0] != x_shape[0]):
        raise ContractError(f"per-row subsets {sub.shape} need input of shape (B, T, s), got {x_shape}")
    if sub.size and (sub.min() < 0 or sub.max() >= config.D):
        raise IndexError(f"feature index out of range [0, {config.D}): {sub.tolist()}")
    return sub


def segment_embed(x, subset, params: Params, config: ModelConfig) -> Tensor:
    """Map ``(..., T, s)`` observations to ``(..., N_S, s, d_h)`` tokens."""
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != config.T:
        raise ContractError(f"input must have T={config.T} rows, got shape {x.shape}")
    if config.T % config.N_S:
        raise ConfigError(f"T={config.T} not divisible by N_S={config.N_S}")
    sub = _check_subset(subset, x.shape, config)
    *lead, _, s = x.shape
    segs = x.reshape(*lead, config.N_S, config.segment_len, s)
    segs = ad.swapaxes(segs, -1, -2)  # (..., N_S, s, P)
    h = _linear(segs, params["segment.weight"], params["segment.bias"])
    h = ad.add(h, params["e_time"].reshape(config.N_S, 1, config.d_h))
    feat = ad.take(params["e_feat"], sub, axis=0)  # (s, d) or (B, s, d)
    if sub.ndim == 2:
        feat = feat.reshape(sub.shape[0], *([1] * (len(lead) - 1)), 1, s, config.d_h)
    return ad.add(h, feat)


def decode(h: Tensor, params: Params, config: ModelConfig) -> Tensor:
    """Flatten each slot's N_S tokens and project to tau outputs: ``(..., tau, s)``."""
    *lead, n_s, s, d = h.shape
    flat = ad.swapaxes(h, -2, -3).reshape(*lead, s, n_s * d)
    out = _linear(flat, params["head.weight"], params["head.bias"])
    return ad.swapaxes(out, -1, -2)


def forward(x, subset, params: Params, config: ModelConfig, rng=None, train: bool = False,
            trace: ForwardTrace | None = None) -> Tensor:
    """Forecast ``(..., tau, s)`` for the feature columns named by ``subset``."""
    x = ad.as_tensor(x)
    if trace is not None:
        trace.subsets.append(np.array(subset, dtype=np.intp, copy=True))
    mu = sd = None
    if config.instance_norm:
        mu = x.data.mean(axis=-2, keepdims=True)
        sd = x.data.std(axis=-2, keepdims=True) + 1e-5
        x = Tensor((x.data - mu) / sd)
    h = segment_embed(x, subset, params, config)
    for layer in range(config.L):
        h = block_forward(h, _block(params, layer), config, rng, train, trace)
    out = decode(h, params, config)
    if mu is not None:
        out = ad.add(ad.mul(out, sd), mu)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Params | dict[str, np.ndarray], config: ModelConfig,
                    meta: dict | None = None) -> Path:
    """Write an ``.npz`` map ``param/<name>`` -> float64 array plus JSON config/meta."""
    path = Path(path)
    arrays = {f"param/{k}": np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
              for k, v in params.items()}
    arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
    arrays["__config__"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["__format__"])
            if fmt != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unsupported checkpoint format {fmt!r}")
            config = ModelConfig.from_dict(json.loads(str(z["__config__"])))
            meta = json.loads(str(z["__meta__"]))
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        raise CheckpointError(f"{path}: parameter names do not match config")
    for k, shape in expected.items():
        if arrays[k].shape != shape:
            raise CheckpointError(f"{path}: {k} has shape {arrays[k].shape}, expected {shape}")
    return restore(arrays), config, meta
