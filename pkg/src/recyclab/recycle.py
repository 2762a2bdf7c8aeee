"""Weight-recycling procedures and analyses between backbone generations.

Covers the full toolkit: direct application of outdated adapted weights to
an upgraded backbone, linear-path connectivity profiling with barrier
scalars, attention-distribution similarity, two-term knowledge
distillation (output KL plus hidden-state matching), distillation through
interpolated parameter points, training-free upgrading of adapter weights
via a learned low-rank projection, and parameter-distance diagnostics.

Teacher quantities are always baked into loss graphs as constants, so no
teacher parameter can ever appear in a gradient map.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import corpus as C
from . import model as M
from . import tensor as T
from . import train as TR
from .model import (ADAPTER, FULL_DELTA, AdaptedWeights, EffectiveModel,
                    MASK_TOKEN, ModelConfig, ParamVector)
from .tensor import Tensor


class RecycleError(Exception):
    """Base class for recycling-procedure failures."""


class InterpolationError(RecycleError):
    pass


class DistillationError(RecycleError):
    pass


class ProjectionError(RecycleError):
    pass


# ---------------------------------------------------------------------------
# linear interpolation and connectivity


def interpolate(theta_a: ParamVector, theta_b: ParamVector, mu: float) -> ParamVector:
    """Elementwise (1 - mu) * theta_a + mu * theta_b; bitwise at endpoints."""
    if theta_a.schema() != theta_b.schema():
        raise InterpolationError("endpoint schemas differ")
    if not 0.0 <= mu <= 1.0:
        warnings.warn(f"interpolation coefficient {mu} outside [0, 1]", stacklevel=2)
    if mu == 0.0:
        return theta_a.copy()
    if mu == 1.0:
        return theta_b.copy()
    w0 = 1.0 - mu
    return ParamVector({k: v * w0 + theta_b[k] * mu for k, v in theta_a.items()},
                       theta_a.config or theta_b.config)


@dataclass
class ConnectivityProfile:
    """Task performance along the straight parameter path between two
    adapted models."""

    endpoint_ids: tuple[str, str]
    mu: np.ndarray
    accuracy: np.ndarray
    loss: np.ndarray
    n_interior: int

    def rows(self) -> list[dict]:
        return [{"mu": float(m), "accuracy": float(a), "loss": float(l)}
                for m, a, l in zip(self.mu, self.accuracy, self.loss)]


def connectivity_profile(theta_a: ParamVector, theta_b: ParamVector,
                         dataset: C.TaskDataset, n_interior: int = 25, *,
                         config: ModelConfig | None = None,
                         endpoint_ids=("a", "b")) -> ConnectivityProfile:
    """Evaluate n_interior evenly spaced interpolations plus both endpoints.

    Inputs are fully composed parameter vectors; adapter-tuned models are
    composed with their backbone before profiling.
    """
    cfg = config or theta_a.config or theta_b.config
    mus = np.linspace(0.0, 1.0, n_interior + 2)
    accs, losses = [], []
    for mu in mus:
        model = M.compose(interpolate(theta_a, theta_b, float(mu)), None, cfg)
        acc, loss = TR.evaluate(model, dataset)
        accs.append(acc)
        losses.append(loss)
    return ConnectivityProfile(tuple(endpoint_ids), mus, np.asarray(accs),
                               np.asarray(losses), n_interior)


def barrier(profile: ConnectivityProfile) -> tuple[float, float]:
    """(accuracy barrier, loss barrier): worst shortfall of the path against
    the chord between endpoint values, clipped at zero."""
    mu = profile.mu
    acc_chord = (1.0 - mu) * profile.accuracy[0] + mu * profile.accuracy[-1]
    loss_chord = (1.0 - mu) * profile.loss[0] + mu * profile.loss[-1]
    acc_barrier = max(0.0, float(np.max(acc_chord - profile.accuracy)))
    loss_barrier = max(0.0, float(np.max(profile.loss - loss_chord)))
    return acc_barrier, loss_barrier


# ---------------------------------------------------------------------------
# compatibility sweep


def direct_apply_sweep(checkpoints, delta_old: AdaptedWeights,
                       dataset: C.TaskDataset) -> list[dict]:
    """Apply one set of outdated adapted weights to every checkpoint of a
    pretraining trajectory, recording applied and zero-shot accuracy."""
    rows = []
    for ckpt in checkpoints:
        applied, _ = TR.evaluate(M.compose(ckpt.params, delta_old, ckpt.config), dataset)
        zero_shot = TR.zero_shot_eval(ckpt.params, dataset, ckpt.config)
        rows.append({"step": ckpt.step, "accuracy": applied, "zero_shot": zero_shot})
    return rows


# ---------------------------------------------------------------------------
# attention similarity


def _jsd_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Jensen-Shannon divergence (natural log) along the last axis."""
    m = 0.5 * (p + q)

    def half(a):
        ratio = np.zeros_like(a)
        mask = a > 0
        ratio[mask] = a[mask] * (np.log(a[mask]) - np.log(m[mask]))
        return ratio.sum(axis=-1)

    return 0.5 * (half(p) + half(q))


def attention_divergence_maps(model_a: EffectiveModel, model_b: EffectiveModel,
                              inputs: np.ndarray):
    """Per-head mean JSD matrix (L, H) plus both models' raw attention maps."""
    if model_a.config.structure() != model_b.config.structure():
        raise RecycleError("models disagree on architecture")
    no_pos = np.zeros((0, 2), dtype=np.int64)
    _, _, _, attn_a = M.forward_mlm(model_a, inputs, no_pos)
    _, _, _, attn_b = M.forward_mlm(model_b, inputs, no_pos)
    cfg = model_a.config
    out = np.empty((cfg.n_layers, cfg.n_heads))
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            out[l, h] = float(_jsd_rows(attn_a[l][:, h], attn_b[l][:, h]).mean())
    return out, attn_a, attn_b


def attention_similarity(model_a: EffectiveModel, model_b: EffectiveModel,
                         inputs: np.ndarray, layer: int, head: int,
                         return_maps: bool = False):
    """Mean JSD between one head's attention rows across inputs and query
    positions; 0 means identical attention behavior, ln 2 is maximal."""
    cfg = model_a.config
    if not (0 <= layer < cfg.n_layers and 0 <= head < cfg.n_heads):
        raise RecycleError(f"no head ({layer}, {head}) in a "
                           f"{cfg.n_layers}x{cfg.n_heads} model")
    divergence, attn_a, attn_b = attention_divergence_maps(model_a, model_b, inputs)
    if return_maps:
        return float(divergence[layer, head]), attn_a[layer][:, head], attn_b[layer][:, head]
    return float(divergence[layer, head])


def mean_attention_divergence(model_a: EffectiveModel, model_b: EffectiveModel,
                              inputs: np.ndarray) -> float:
    """JSD averaged over every layer-head pair."""
    divergence, _, _ = attention_divergence_maps(model_a, model_b, inputs)
    return float(divergence.mean())


# ---------------------------------------------------------------------------
# knowledge distillation


@dataclass(frozen=True)
class KDConfig:
    """Two-term distillation loss settings.

    hidden_weight scales the summed per-layer MSE of unit-normalized hidden
    states; task_mix blends the supervised task loss with the distillation
    loss (1 = plain supervised tuning, 0 = zero-shot distillation);
    temperature softens both sides of the output KL.
    """

    hidden_weight: float = 12.5
    task_mix: float = 0.2
    temperature: float = 10.0
    unlabeled_source: str = "task"   # "task" | "corpus"

    def __post_init__(self):
        if not 0.0 <= self.task_mix <= 1.0:
            raise DistillationError("task_mix must lie in [0, 1]")
        if self.temperature <= 0:
            raise DistillationError("temperature must be > 0")
        if self.hidden_weight < 0:
            raise DistillationError("hidden_weight must be >= 0")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class UnlabeledPool(NamedTuple):
    """Inputs-only examples for distillation: token batches with mask slots."""

    tokens: np.ndarray
    mask_pos: np.ndarray


def task_inputs_pool(dataset: C.TaskDataset) -> UnlabeledPool:
    """Task inputs with labels discarded."""
    return UnlabeledPool(dataset.tokens, dataset.mask_pos)


def corpus_inputs_pool(stream: np.ndarray, seq_len: int, n: int, seed: int) -> UnlabeledPool:
    """Generic-corpus stand-in: stream windows with one mask slot inserted."""
    rng = np.random.default_rng((seed, 0xD1))
    tokens = C.corpus_windows(stream, seq_len, n, rng)
    mask_pos = rng.integers(0, seq_len, size=n)
    tokens[np.arange(n), mask_pos] = MASK_TOKEN
    return UnlabeledPool(tokens, mask_pos.astype(np.int64))


@dataclass
class TeacherOutputs:
    """Frozen teacher signals for one input batch."""

    probs: np.ndarray            # (B, C) temperature-softened label distribution
    hidden: list[np.ndarray]     # per layer, unit-normalized (B, S, d)


def teacher_outputs(teacher: EffectiveModel, tokens: np.ndarray, mask_pos: np.ndarray,
                    verbalizer: Mapping[int, int], temperature: float) -> TeacherOutputs:
    b = tokens.shape[0]
    positions = np.stack([np.arange(b), mask_pos], axis=1)
    logits, _, hidden_norm, _ = M.forward_mlm(teacher, tokens, positions)
    toks = M.verbalizer_tokens(verbalizer)
    restricted = logits[:, toks] / temperature
    shifted = restricted - restricted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return TeacherOutputs(e / e.sum(axis=1, keepdims=True), hidden_norm)


def kd_graph(tape, cfg: ModelConfig, seg: Mapping[str, Tensor], teacher_out: TeacherOutputs,
             tokens: np.ndarray, mask_pos: np.ndarray, verbalizer: Mapping[int, int],
             kd: KDConfig, *, train: bool = False, dropout_rng=None) -> Tensor:
    """Distillation loss on an existing tape: temperature-softened KL over
    the label space plus hidden_weight times the summed per-layer mean
    squared distance of unit-normalized hidden states."""
    b, s = tokens.shape
    positions = np.stack([np.arange(b), mask_pos], axis=1)
    fwd = M.forward_graph(tape, cfg, seg, tokens, positions,
                          train=train, dropout_rng=dropout_rng)
    toks = M.verbalizer_tokens(verbalizer)
    restricted = T.transpose(T.take_rows(T.transpose(fwd.logits_at, (1, 0)), toks), (1, 0))
    log_q = T.log_softmax(T.scale(restricted, 1.0 / kd.temperature), axis=-1)
    loss = T.kl_divergence(teacher_out.probs, log_q)
    if kd.hidden_weight > 0:
        n_positions = b * s
        acc = None
        for k, h in enumerate(fwd.hidden):
            diff = T.sub(T.unit_normalize(h), teacher_out.hidden[k])
            term = T.scale(T.sum_all(T.mul(diff, diff)), 1.0 / n_positions)
            acc = term if acc is None else T.add(acc, term)
        loss = T.add(loss, T.scale(acc, kd.hidden_weight))
    return loss


def kd_loss(teacher: EffectiveModel, student: EffectiveModel, tokens: np.ndarray,
            mask_pos: np.ndarray, verbalizer: Mapping[int, int], kd: KDConfig,
            *, tape=None) -> Tensor:
    """Distillation loss between two assembled models on one input batch.

    The teacher is evaluated without gradient tracking; the returned scalar
    node differentiates only into the student's parameters.
    """
    if teacher.config.structure() != student.config.structure():
        raise DistillationError("teacher and student disagree on architecture")
    tape = tape if tape is not None else T.Tape()
    t_out = teacher_outputs(teacher, tokens, mask_pos, verbalizer, kd.temperature)
    seg = M.model_segments(tape, student, trainable=())
    return kd_graph(tape, student.config, seg, t_out, tokens, mask_pos, verbalizer, kd)


def distill_adapt(theta_new0: ParamVector, teacher: EffectiveModel,
                  splits: Mapping[str, C.TaskDataset] | None, method: str,
                  kd: KDConfig, optim: TR.OptimConfig, *,
                  unlabeled: UnlabeledPool | None = None,
                  verbalizer: Mapping[int, int] | None = None,
                  init: AdaptedWeights | None = None,
                  config: ModelConfig | None = None,
                  eval_every: int = 25) -> TR.TuneResult:
    """Tune the upgraded backbone against the final blended loss
    task_mix * task loss + (1 - task_mix) * distillation loss.

    task_mix = 1 reduces exactly to plain supervised adaptation (identical
    trajectory for identical seeds); task_mix = 0 is the zero-shot setting
    and requires an unlabeled pool. Only the student's tunable segments
    receive gradients; combined with `init` this realizes recycling by
    initialization plus distillation.
    """
    cfg = config or theta_new0.config
    if cfg is None:
        raise TR.TrainingError("distill_adapt needs a ModelConfig")
    train_ds = splits.get("train") if splits else None
    dev_ds = splits.get("dev") if splits else None
    if kd.task_mix > 0 and (train_ds is None or len(train_ds) == 0):
        raise DistillationError("task_mix > 0 requires labeled training data")
    if verbalizer is None:
        if train_ds is None:
            raise DistillationError("zero-shot distillation needs an explicit verbalizer")
        verbalizer = train_ds.spec.verbalizer
    if kd.task_mix < 1 and unlabeled is None:
        if train_ds is None:
            raise DistillationError("distillation needs task inputs or an unlabeled pool")
        unlabeled = task_inputs_pool(train_ds)
    if teacher.config.structure() != cfg.structure():
        raise DistillationError("teacher and student disagree on architecture")

    def loss_builder(tape, seg, step):
        parts = []
        if kd.task_mix > 0:
            rng = TR._step_rng(optim.seed, step, "data")
            idx = TR.sample_batch(rng, len(train_ds), optim.batch_size)
            ce = TR.restricted_task_loss(tape, cfg, seg, train_ds, idx, train=True,
                                         dropout_rng=TR._step_rng(optim.seed, step, "dropout"))
            if kd.task_mix == 1.0:
                return ce  # bitwise-identical graph to plain adapt()
            parts.append(T.scale(ce, kd.task_mix))
        rng_u = TR._step_rng(optim.seed, step, "unlabeled")
        u_idx = TR.sample_batch(rng_u, unlabeled.tokens.shape[0], optim.batch_size)
        u_tokens = unlabeled.tokens[u_idx]
        u_mask = unlabeled.mask_pos[u_idx]
        t_out = teacher_outputs(teacher, u_tokens, u_mask, verbalizer, kd.temperature)
        kd_term = kd_graph(tape, cfg, seg, t_out, u_tokens, u_mask, verbalizer, kd,
                           train=True, dropout_rng=rng_u)
        parts.append(T.scale(kd_term, 1.0 - kd.task_mix))
        return parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])

    result = TR.tune_loop(theta_new0, cfg, method, init, optim, loss_builder,
                          dev_ds, eval_every)
    if train_ds is not None:
        result.delta.source_task = train_ds.spec.task_id
    return result


# ---------------------------------------------------------------------------
# interpolation distillation


def interp_distill_loss(tape, cfg: ModelConfig, seg: Mapping[str, Tensor],
                        teacher_params: ParamVector, dataset: C.TaskDataset, idx,
                        gamma: float, n_segments: int, *,
                        train: bool = False, dropout_rng=None) -> Tensor:
    """Task loss at the student endpoint plus gamma times the task loss at
    every interior interpolation point between teacher and student.

    `seg` holds the student's full parameter leaves; interpolated models are
    built as constant_teacher_share + mu * student, so gradients reach the
    student through every point, scaled by mu. n_segments = 2 uses the
    single midpoint.
    """
    if n_segments < 2:
        raise InterpolationError("n_segments must be at least 2")
    total = TR.restricted_task_loss(tape, cfg, seg, dataset, idx,
                                    train=train, dropout_rng=dropout_rng)
    for j in range(1, n_segments):
        mu = j / n_segments
        mix = {k: T.affine(seg[k], mu, (1.0 - mu) * teacher_params[k]) for k in teacher_params}
        point_loss = TR.restricted_task_loss(tape, cfg, mix, dataset, idx,
                                             train=train, dropout_rng=dropout_rng)
        total = T.add(total, T.scale(point_loss, gamma))
    return total


def interp_distill_adapt(theta_new0: ParamVector, teacher_params: ParamVector,
                         splits: Mapping[str, C.TaskDataset], optim: TR.OptimConfig,
                         *, gamma: float = 1.0, n_segments: int = 2,
                         init: AdaptedWeights | None = None,
                         config: ModelConfig | None = None,
                         eval_every: int = 25) -> TR.TuneResult:
    """Fine-tune with the interpolation-distillation objective.

    Full-parameter students only: the objective interpolates complete
    parameter vectors between the adapted teacher and the student.
    """
    cfg = config or theta_new0.config
    if init is not None and init.kind != FULL_DELTA:
        raise InterpolationError("interpolation distillation requires full-delta students")
    if teacher_params.schema() != theta_new0.schema():
        raise InterpolationError("teacher and student schemas differ")
    train_ds = splits["train"]

    def loss_builder(tape, seg, step):
        rng = TR._step_rng(optim.seed, step, "data")
        idx = TR.sample_batch(rng, len(train_ds), optim.batch_size)
        return interp_distill_loss(tape, cfg, seg, teacher_params, train_ds, idx,
                                   gamma, n_segments, train=True,
                                   dropout_rng=TR._step_rng(optim.seed, step, "dropout"))

    result = TR.tune_loop(theta_new0, cfg, TR.FINE_TUNE, init, optim, loss_builder,
                          splits.get("dev"), eval_every)
    result.delta.source_task = train_ds.spec.task_id
    return result


# ---------------------------------------------------------------------------
# training-free projection upgrading


@dataclass
class ProjectionNet:
    """Low-rank upgrade map for adapter weights: two 2-layer MLPs through a
    bottleneck, trained once on a source task and reusable across tasks."""

    config: ModelConfig
    bottleneck: int
    weights: dict[str, np.ndarray]
    source_task: str | None = None
    source_checkpoint: str | None = None
    target_checkpoint: str | None = None
    loss_history: list = field(default_factory=list)
    last_apply_seconds: float | None = None

    @property
    def schema(self) -> tuple:
        return tuple(M.adapter_schema(self.config))

    def parameter_count(self) -> int:
        return sum(v.size for v in self.weights.values())


def _projection_init(cfg: ModelConfig, bottleneck: int, seed: int, dtype) -> dict:
    delta_size = sum(int(np.prod(s)) for _, s in M.adapter_schema(cfg))
    hidden = 4 * bottleneck
    rng = np.random.default_rng((seed, 0x9E))

    def tn(shape):
        return M._truncated_normal(rng, shape, dtype=dtype)

    return {
        "down.w1": tn((delta_size, hidden)), "down.b1": np.zeros(hidden, dtype=dtype),
        "down.w2": tn((hidden, bottleneck)), "down.b2": np.zeros(bottleneck, dtype=dtype),
        "up.w1": tn((bottleneck, hidden)), "up.b1": np.zeros(hidden, dtype=dtype),
        # zero final map: the initial projected delta is exactly zero, so the
        # initial student coincides with the bare upgraded backbone
        "up.w2": np.zeros((hidden, delta_size), dtype=dtype),
        "up.b2": np.zeros(delta_size, dtype=dtype),
    }


def _projection_forward_graph(tape, weights: Mapping, flat_delta: np.ndarray):
    x = flat_delta.reshape(1, -1)
    z = T.gelu(T.add(T.matmul(x, weights["down.w1"]), weights["down.b1"]))
    z = T.add(T.matmul(z, weights["down.w2"]), weights["down.b2"])
    u = T.gelu(T.add(T.matmul(z, weights["up.w1"]), weights["up.b1"]))
    u = T.add(T.matmul(u, weights["up.w2"]), weights["up.b2"])
    return T.reshape(u, (flat_delta.size,))


def _slice_adapter_segments(vec: Tensor, schema) -> dict[str, Tensor]:
    out, off = {}, 0
    for name, shape in schema:
        size = int(np.prod(shape))
        out[name] = T.reshape(T.slice1d(vec, off, off + size), shape)
        off += size
    return out


def train_projection(delta_source_old: AdaptedWeights, theta_old0: ParamVector,
                     theta_new0: ParamVector, unlabeled: UnlabeledPool,
                     bottleneck: int, kd: KDConfig, optim: TR.OptimConfig, *,
                     verbalizer: Mapping[int, int],
                     config: ModelConfig | None = None) -> ProjectionNet:
    """Learn the upgrade projection on a source task's outdated adapter.

    The source delta stays frozen; only projection parameters train, against
    the distillation loss between the adapted old model (teacher) and the
    new backbone composed with the projected delta (student).
    """
    if delta_source_old.kind != ADAPTER:
        raise ProjectionError("projection upgrading supports adapter weights only")
    if bottleneck < 1:
        raise ProjectionError("bottleneck must be >= 1")
    if kd.task_mix != 0.0:
        raise DistillationError("projection learning is zero-shot: task_mix must be 0")
    cfg = config or theta_new0.config or delta_source_old.config
    dtype = theta_new0["embed.token"].dtype
    schema = tuple(M.adapter_schema(cfg))
    if delta_source_old.segments.schema() != schema:
        raise ProjectionError("source delta schema does not match the model config")

    weights = _projection_init(cfg, bottleneck, optim.seed, dtype)
    teacher = M.compose(theta_old0, delta_source_old, cfg)
    flat_delta = delta_source_old.segments.flatten().astype(dtype)

    opt = TR.AdamW(optim, weights)
    history = []
    for step in range(optim.max_steps):
        rng_u = TR._step_rng(optim.seed, step, "unlabeled")
        idx = TR.sample_batch(rng_u, unlabeled.tokens.shape[0], optim.batch_size)
        u_tokens, u_mask = unlabeled.tokens[idx], unlabeled.mask_pos[idx]
        t_out = teacher_outputs(teacher, u_tokens, u_mask, verbalizer, kd.temperature)

        tape = T.Tape()
        w_seg = {k: tape.leaf(v, trainable=True) for k, v in weights.items()}
        projected = _projection_forward_graph(tape, w_seg, flat_delta)
        seg = {k: tape.leaf(v) for k, v in theta_new0.items()}
        seg.update(_slice_adapter_segments(projected, schema))
        loss = kd_graph(tape, cfg, seg, t_out, u_tokens, u_mask, verbalizer, kd)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TR.TrainingError(f"non-finite projection loss at step {step}: {loss_val}")
        grads = tape.backward(loss)
        opt.step(weights, {k: grads[w_seg[k].nid] for k in weights}, TR.lr_at(step, optim))
        history.append({"step": step, "kd_loss": loss_val})

    return ProjectionNet(cfg, bottleneck, weights,
                         source_task=delta_source_old.source_task,
                         loss_history=history)


def apply_projection(proj: ProjectionNet, delta_target_old: AdaptedWeights) -> AdaptedWeights:
    """Upgrade outdated adapter weights with one projection forward pass.

    No training happens here; wall-clock time of the pass is recorded on
    the projection for efficiency comparisons.
    """
    if delta_target_old.kind != ADAPTER:
        raise ProjectionError("projection applies to adapter weights only")
    if delta_target_old.segments.schema() != proj.schema:
        raise ProjectionError("target delta schema does not match the projection")
    started = time.perf_counter()
    # row-vector shapes keep the arithmetic bitwise identical to the
    # training-time graph path
    x = delta_target_old.segments.flatten().astype(
        proj.weights["down.w1"].dtype).reshape(1, -1)

    def mlp(v, w1, b1, w2, b2):
        h = T.gelu_values(v @ proj.weights[w1] + proj.weights[b1])
        return h @ proj.weights[w2] + proj.weights[b2]

    z = mlp(x, "down.w1", "down.b1", "down.w2", "down.b2")
    vec = mlp(z, "up.w1", "up.b1", "up.w2", "up.b2").reshape(-1)
    out, off = {}, 0
    for name, shape in proj.schema:
        size = int(np.prod(shape))
        out[name] = vec[off:off + size].reshape(shape)
        off += size
    proj.last_apply_seconds = time.perf_counter() - started
    return AdaptedWeights(ADAPTER, ParamVector(out, proj.config),
                          source_task=delta_target_old.source_task)


# ---------------------------------------------------------------------------
# distance diagnostics


def param_distance(a, b=None) -> float:
    """Euclidean norm of the flattened difference (or of a single delta)."""
    first = a.segments if isinstance(a, AdaptedWeights) else a
    if b is None:
        return float(np.linalg.norm(first.flatten()))
    second = b.segments if isinstance(b, AdaptedWeights) else b
    diff = first.sub(second)
    return float(np.linalg.norm(diff.flatten()))
