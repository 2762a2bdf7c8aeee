"""Tiny encoder-only masked-LM transformer with named parameters.

Pre-layernorm blocks, learned positional embeddings, and an output head
tied to the input embedding table. Downstream behavior is assembled from a
backbone parameter set plus task-specific adapted weights: either a
full-parameter displacement added elementwise, or bottleneck adapter
modules inserted after the attention and feed-forward sublayers.

Classification is prompt-style throughout: a verbalizer maps labels to
vocabulary tokens and predictions are read off the masked-LM head, so
adapted-weight schemas are identical across tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor


PAD_TOKEN = 0
MASK_TOKEN = 1
N_SPECIAL_TOKENS = 2

FULL_DELTA = "full_delta"
ADAPTER = "adapter"

LN_EPS = 1e-5


class ModelError(Exception):
    """Base class for model-layer failures."""


class SchemaError(ModelError):
    """Parameter sets disagree on segment names or shapes."""


class CompositionError(ModelError):
    """Backbone and adapted weights cannot be assembled."""


class ModelInputError(ModelError):
    """Token / position input violates the model contract."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 512
    max_seq_len: int = 64
    adapter_bottleneck: int = 16
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff,
               self.vocab_size, self.max_seq_len, self.adapter_bottleneck) <= 0:
            raise ModelError("all ModelConfig dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_bottleneck >= self.d_model:
            raise ModelError("adapter bottleneck must be smaller than d_model")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def structure(self) -> tuple:
        """Shape-determining fields (seed and dropout excluded)."""
        return (self.n_layers, self.n_heads, self.d_model, self.d_ff,
                self.vocab_size, self.max_seq_len, self.adapter_bottleneck)


class ParamVector:
    """Ordered name -> array map over a model's parameter segments.

    Behaves as a read-only mapping with elementwise algebra. flatten /
    unflatten round-trip bitwise against the owning schema. A ParamVector
    created from a ModelConfig carries that config along through algebra.
    """

    __slots__ = ("segments", "config")

    def __init__(self, segments: Mapping[str, np.ndarray], config: ModelConfig | None = None):
        self.segments = dict(segments)
        self.config = config

    def __getitem__(self, name) -> np.ndarray:
        return self.segments[name]

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def __contains__(self, name):
        return name in self.segments

    def items(self):
        return self.segments.items()

    def keys(self):
        return self.segments.keys()

    def values(self):
        return self.segments.values()

    def schema(self) -> tuple:
        return tuple((k, v.shape) for k, v in self.segments.items())

    def size(self) -> int:
        return sum(v.size for v in self.segments.values())

    def copy(self) -> "ParamVector":
        return ParamVector({k: v.copy() for k, v in self.segments.items()}, self.config)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector({k: v.astype(dtype) for k, v in self.segments.items()}, self.config)

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.segments.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamVector":
        if vec.size != self.size():
            raise SchemaError(f"flat vector has {vec.size} entries, schema needs {self.size()}")
        out, off = {}, 0
        for k, v in self.segments.items():
            out[k] = vec[off:off + v.size].reshape(v.shape).astype(v.dtype, copy=False)
            off += v.size
        return ParamVector(out, self.config)

    def _check_schema(self, other: "ParamVector", op: str):
        if self.schema() != other.schema():
            ours = {k: s for k, s in self.schema()}
            theirs = {k: s for k, s in other.schema()}
            for k in set(ours) | set(theirs):
                if ours.get(k) != theirs.get(k):
                    raise SchemaError(
                        f"{op}: segment {k!r} differs ({ours.get(k)} vs {theirs.get(k)})")
            raise SchemaError(f"{op}: segment ordering differs")

    def add(self, other: "ParamVector") -> "ParamVector":
        self._check_schema(other, "add")
        return ParamVector({k: v + other.segments[k] for k, v in self.segments.items()},
                           self.config or other.config)

    def sub(self, other: "ParamVector") -> "ParamVector":
        self._check_schema(other, "sub")
        return ParamVector({k: v - other.segments[k] for k, v in self.segments.items()},
                           self.config or other.config)

    def scale(self, c: float) -> "ParamVector":
        return ParamVector({k: v * c for k, v in self.segments.items()}, self.config)

    def equal(self, other: "ParamVector") -> bool:
        return (self.schema() == other.schema()
                and all(np.array_equal(v, other.segments[k]) for k, v in self.segments.items()))


@dataclass
class AdaptedWeights:
    """Task-specific delta: full displacement or adapter parameter set."""

    kind: str
    segments: ParamVector
    source_task: str | None = None
    source_checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in (FULL_DELTA, ADAPTER):
            raise ModelError(f"unknown adapted-weights kind {self.kind!r}")

    @property
    def config(self) -> ModelConfig | None:
        return self.segments.config

    def copy(self) -> "AdaptedWeights":
        return replace(self, segments=self.segments.copy())


@dataclass
class AttentionMap:
    """Row-stochastic attention weights of one head (query pos x key pos)."""

    layer: int
    head: int
    weights: np.ndarray


@dataclass
class EffectiveModel:
    """Deployable assembly of backbone weights and (optionally) adapters."""

    config: ModelConfig
    params: ParamVector
    adapters: ParamVector | None = None


# ---------------------------------------------------------------------------
# schemas and initialization


def param_schema(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    out = [("embed.token", (v, d)), ("embed.pos", (cfg.max_seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        out += [(f"{p}.ln1.gain", (d,)), (f"{p}.ln1.bias", (d,))]
        out += [(f"{p}.attn.w{m}", (d, d)) for m in "qkvo"]
        out += [(f"{p}.attn.b{m}", (d,)) for m in "qkvo"]
        out += [(f"{p}.ln2.gain", (d,)), (f"{p}.ln2.bias", (d,)),
                (f"{p}.ffn.w1", (d, ff)), (f"{p}.ffn.b1", (ff,)),
                (f"{p}.ffn.w2", (ff, d)), (f"{p}.ffn.b2", (d,))]
    out += [("final_ln.gain", (d,)), ("final_ln.bias", (d,)), ("head.bias", (v,))]
    return out


def adapter_schema(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, r = cfg.d_model, cfg.adapter_bottleneck
    out = []
    for i in range(cfg.n_layers):
        for place in ("attn", "ffn"):
            p = f"layer{i}.{place}_adapter"
            out += [(f"{p}.ln.gain", (d,)), (f"{p}.ln.bias", (d,)),
                    (f"{p}.down.w", (d, r)), (f"{p}.down.b", (r,)),
                    (f"{p}.up.w", (r, d)), (f"{p}.up.b", (d,))]
    return out


def _truncated_normal(rng, shape, std=0.02, dtype=T.DEFAULT_DTYPE):
    # resample beyond 2 sigma
    x = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(x, dtype=dtype)


def init_params(cfg: ModelConfig, seed: int | None = None,
                dtype=T.DEFAULT_DTYPE) -> ParamVector:
    """Deterministic init: truncated-normal weights (sigma 0.02), zero biases,
    unit layernorm gains."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    seg = {}
    for name, shape in param_schema(cfg):
        if name.endswith(".gain"):
            seg[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            seg[name] = np.zeros(shape, dtype=dtype)
        else:
            seg[name] = _truncated_normal(rng, shape, dtype=dtype)
    return ParamVector(seg, cfg)


def init_adapter_delta(cfg: ModelConfig, seed: int, dtype=T.DEFAULT_DTYPE,
                       source_task: str | None = None) -> AdaptedWeights:
    """Fresh adapter weights: random down-projection, zero up-projection, so
    the adapted model starts as an exact identity of its backbone."""
    rng = np.random.default_rng(seed)
    seg = {}
    for name, shape in adapter_schema(cfg):
        if name.endswith(".ln.gain"):
            seg[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".down.w"):
            seg[name] = _truncated_normal(rng, shape, dtype=dtype)
        else:
            seg[name] = np.zeros(shape, dtype=dtype)
    return AdaptedWeights(ADAPTER, ParamVector(seg, cfg), source_task=source_task)


def zero_delta(cfg: ModelConfig, kind: str = FULL_DELTA, dtype=T.DEFAULT_DTYPE) -> AdaptedWeights:
    """All-zero delta of either kind; composes to an exact identity."""
    schema = param_schema(cfg) if kind == FULL_DELTA else adapter_schema(cfg)
    return AdaptedWeights(kind, ParamVector({n: np.zeros(s, dtype=dtype) for n, s in schema}, cfg))


def full_delta_from(theta_adapted: ParamVector, theta0: ParamVector,
                    source_task: str | None = None) -> AdaptedWeights:
    """Displacement convention: delta = adapted - backbone."""
    return AdaptedWeights(FULL_DELTA, theta_adapted.sub(theta0), source_task=source_task)


def compose(theta0: ParamVector, delta: AdaptedWeights | None,
            config: ModelConfig | None = None) -> EffectiveModel:
    """Assemble backbone weights with adapted weights; mutates neither."""
    cfg = config or theta0.config
    if cfg is None:
        raise CompositionError("backbone carries no ModelConfig; pass one explicitly")
    if delta is None:
        return EffectiveModel(cfg, theta0)
    if delta.config is not None and delta.config.structure() != cfg.structure():
        raise CompositionError(
            f"delta config structure {delta.config.structure()} does not match "
            f"backbone structure {cfg.structure()}")
    if delta.kind == FULL_DELTA:
        try:
            return EffectiveModel(cfg, theta0.add(delta.segments))
        except SchemaError as e:
            raise CompositionError(str(e)) from e
    expected = tuple(adapter_schema(cfg))
    if delta.segments.schema() != expected:
        got = dict(delta.segments.schema())
        for name, shape in expected:
            if got.get(name) != shape:
                raise CompositionError(
                    f"adapter segment {name!r}: expected shape {shape}, got {got.get(name)}")
        raise CompositionError("adapter schema ordering differs from config schema")
    return EffectiveModel(cfg, theta0, adapters=delta.segments)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    """Graph handles produced by one forward pass."""

    logits_at: Tensor | None      # (n_positions, vocab) when positions given
    final: Tensor                 # (B, S, d) after the final layernorm
    hidden: list                  # per-layer residual stream, (B, S, d)
    attention: list               # per-layer row-stochastic maps, (B, H, S, S)
    batch_shape: tuple


def _transposed(x):
    return T.transpose(x, (1, 0)) if isinstance(x, Tensor) else np.asarray(x).T


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    dtype = x.value.dtype
    keep = (rng.random(x.shape) >= rate).astype(dtype) * dtype.type(1.0 / (1.0 - rate))
    return T.mul(x, keep)


def _linear(x2, seg, w_name, b_name):
    # 2-D operand keeps the projection a single GEMM
    return T.add(T.matmul(x2, seg[w_name]), seg[b_name])


def _adapter_pass(x2, seg, prefix):
    h = T.layer_norm(x2, seg[f"{prefix}.ln.gain"], seg[f"{prefix}.ln.bias"], LN_EPS)
    z = T.gelu(_linear(h, seg, f"{prefix}.down.w", f"{prefix}.down.b"))
    return T.add(x2, _linear(z, seg, f"{prefix}.up.w", f"{prefix}.up.b"))


def forward_graph(tape, cfg: ModelConfig, seg: Mapping, tokens: np.ndarray,
                  positions=None, *, train: bool = False,
                  dropout_rng=None) -> ForwardResult:
    """Run the transformer over a (B, S) token batch on the given tape.

    `seg` maps segment names to leaf Tensors (adapter names included when the
    model carries adapters). With `positions`, an (n, 2) array of (batch, seq)
    indices, masked-LM logits are computed at exactly those positions.
    Dropout fires only with train=True and a supplied rng.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ModelInputError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    b, s = tokens.shape
    if s > cfg.max_seq_len:
        raise ModelInputError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ModelInputError(f"token id out of range [0, {cfg.vocab_size})")

    has_adapters = any(k.endswith("_adapter.ln.gain") for k in seg)
    drop = dropout_rng if train else None
    d, heads = cfg.d_model, cfg.n_heads
    dh = d // heads
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    # the residual stream is kept as (B*S, d); big projections stay 2-D GEMMs
    x = T.add(T.take_rows(seg["embed.token"], tokens.reshape(-1)),
              T.take_rows(seg["embed.pos"], np.tile(np.arange(s), b)))
    x = _dropout(x, cfg.dropout_rate, drop)

    hidden, attention = [], []
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        h = T.layer_norm(x, seg[f"{p}.ln1.gain"], seg[f"{p}.ln1.bias"], LN_EPS)

        def heads_view(m2):
            return T.transpose(T.reshape(m2, (b, s, heads, dh)), (0, 2, 1, 3))

        q = heads_view(_linear(h, seg, f"{p}.attn.wq", f"{p}.attn.bq"))
        k = heads_view(_linear(h, seg, f"{p}.attn.wk", f"{p}.attn.bk"))
        v = heads_view(_linear(h, seg, f"{p}.attn.wv", f"{p}.attn.bv"))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        probs = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b * s, d))
        attn_out = _dropout(_linear(ctx, seg, f"{p}.attn.wo", f"{p}.attn.bo"),
                            cfg.dropout_rate, drop)
        x = T.add(x, attn_out)
        if has_adapters:
            x = _adapter_pass(x, seg, f"{p}.attn_adapter")

        h2 = T.layer_norm(x, seg[f"{p}.ln2.gain"], seg[f"{p}.ln2.bias"], LN_EPS)
        f = T.gelu(_linear(h2, seg, f"{p}.ffn.w1", f"{p}.ffn.b1"))
        f = _dropout(_linear(f, seg, f"{p}.ffn.w2", f"{p}.ffn.b2"),
                     cfg.dropout_rate, drop)
        x = T.add(x, f)
        if has_adapters:
            x = _adapter_pass(x, seg, f"{p}.ffn_adapter")

        hidden.append(T.reshape(x, (b, s, d)))
        attention.append(probs)

    final = T.layer_norm(x, seg["final_ln.gain"], seg["final_ln.bias"], LN_EPS)

    logits_at = None
    if positions is not None:
        positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        if positions.size and (positions[:, 0].max() >= b or positions[:, 1].max() >= s
                               or positions.min() < 0):
            raise ModelInputError("mask position outside the token batch")
        rows = T.take_rows(final, positions[:, 0] * s + positions[:, 1])
        # output head tied to the input embedding table
        logits_at = T.add(T.matmul(rows, _transposed(seg["embed.token"])), seg["head.bias"])

    return ForwardResult(logits_at, T.reshape(final, (b, s, d)), hidden, attention, (b, s))


def model_segments(tape, model: EffectiveModel, trainable=()) -> dict[str, Tensor]:
    """Materialize a model's segments as leaf tensors on a tape.

    `trainable` selects leaf names eligible for optimizer updates; gradients
    still flow through every segment either way.
    """
    trainable = set(trainable)
    seg = {k: tape.leaf(v, trainable=k in trainable) for k, v in model.params.items()}
    if model.adapters is not None:
        for k, v in model.adapters.items():
            seg[k] = tape.leaf(v, trainable=k in trainable)
    return seg


def forward_mlm(model: EffectiveModel, tokens: np.ndarray, mask_positions,
                *, train: bool = False, dropout_rng=None):
    """Evaluate the masked-LM: logits at masked positions, per-layer hidden
    states (raw and unit-normalized per position), and attention maps.

    Returns numpy arrays: (logits (n, V), hidden [L x (B,S,d)],
    hidden_normalized [L x (B,S,d)], attention [L x (B,H,S,S)]).
    """
    tape = T.Tape()
    seg = model_segments(tape, model)
    fwd = forward_graph(tape, model.config, seg, tokens, mask_positions,
                        train=train, dropout_rng=dropout_rng)
    hidden = [h.value for h in fwd.hidden]
    normed = [T.unit_normalize(h).value for h in fwd.hidden]
    attn = [a.value for a in fwd.attention]
    return fwd.logits_at.value, hidden, normed, attn


def attention_map(model: EffectiveModel, tokens: np.ndarray, layer: int, head: int) -> AttentionMap:
    """Extract one head's attention weights for a single (S,) token sequence."""
    cfg = model.config
    if not (0 <= layer < cfg.n_layers and 0 <= head < cfg.n_heads):
        raise ModelInputError(f"no head ({layer}, {head}) in a "
                              f"{cfg.n_layers}x{cfg.n_heads} model")
    tokens = np.asarray(tokens).reshape(1, -1)
    _, _, _, attn = forward_mlm(model, tokens, np.zeros((0, 2), dtype=np.int64))
    return AttentionMap(layer, head, attn[layer][0, head])


# ---------------------------------------------------------------------------
# prompt-style classification


def verbalizer_tokens(verbalizer: Mapping[int, int]) -> np.ndarray:
    """Token ids ordered by label id; duplicate tokens are rejected."""
    labels = sorted(verbalizer)
    toks = [verbalizer[l] for l in labels]
    if len(set(toks)) != len(toks):
        raise ModelInputError("verbalizer tokens must be distinct")
    return np.asarray(toks, dtype=np.int64)


def classify_batch(model: EffectiveModel, tokens: np.ndarray, mask_pos: np.ndarray,
                   verbalizer: Mapping[int, int]):
    """Vectorized classify: (predicted labels (B,), class distributions (B, C))."""
    tokens = np.asarray(tokens)
    mask_pos = np.asarray(mask_pos, dtype=np.int64)
    b = tokens.shape[0]
    positions = np.stack([np.arange(b), mask_pos], axis=1)
    logits, _, _, _ = forward_mlm(model, tokens, positions)
    toks = verbalizer_tokens(verbalizer)
    restricted = logits[:, toks]
    shifted = restricted - restricted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    dist = e / e.sum(axis=1, keepdims=True)
    # argmax takes the first maximum: ties resolve toward the lowest label id
    labels = np.asarray(sorted(verbalizer))
    return labels[np.argmax(restricted, axis=1)], dist


def classify(model: EffectiveModel, tokens: np.ndarray, mask_pos: int,
             verbalizer: Mapping[int, int]):
    """Predict a label for one example through the masked-LM head."""
    tokens = np.asarray(tokens)
    n_masks = int(np.count_nonzero(tokens == MASK_TOKEN))
    if n_masks != 1 or tokens[mask_pos] != MASK_TOKEN:
        raise ModelInputError(f"example must contain exactly one mask at mask_pos "
                              f"(found {n_masks} mask tokens)")
    pred, dist = classify_batch(model, tokens[None, :], np.array([mask_pos]), verbalizer)
    return int(pred[0]), dist[0]
