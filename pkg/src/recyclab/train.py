"""Optimization engine: AdamW with linear warmup/decay, masked-LM
pretraining with resumable checkpoints, and downstream adaptation by
full fine-tuning or adapter tuning with dev-set model selection.

Every run is a pure function of (inputs, seed): per-step randomness is
derived statelessly from (seed, step), so resuming from a checkpoint —
parameters plus optimizer slots — reproduces the original trajectory
bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import corpus as C
from . import model as M
from . import tensor as T
from .model import (ADAPTER, FULL_DELTA, AdaptedWeights, EffectiveModel,
                    ModelConfig, ParamVector)


FINE_TUNE = "fine_tune"
ADAPTER_TUNE = "adapter_tune"

MLM_MASK_PROB = 0.15


class TrainingError(Exception):
    """Aborted optimization (non-finite loss, bad init, empty data)."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_frac: float = 0.06
    batch_size: int = 16
    max_steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainingError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError("betas must lie in [0, 1)")
        if not 0 <= self.warmup_frac < 1:
            raise TrainingError("warmup fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Piecewise-linear schedule: 0 -> lr over the warmup span, then linear
    decay to 0 at max_steps. lr(0) == 0 exactly whenever warmup is active."""
    warmup = int(cfg.warmup_frac * cfg.max_steps)
    if step >= cfg.max_steps:
        return 0.0
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    return cfg.lr * (cfg.max_steps - step) / max(1, cfg.max_steps - warmup)


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Updates arrays in place; 1-D segments (biases, layernorm gains) are
    exempt from decay. State (m, v, step) serializes for bitwise resume.
    """

    def __init__(self, cfg: OptimConfig, arrays: Mapping[str, np.ndarray],
                 state: dict | None = None):
        self.cfg = cfg
        if state is None:
            self.t = 0
            self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
            self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        else:
            self.t = int(state["step"])
            self.m = {k: v.copy() for k, v in state["m"].items()}
            self.v = {k: v.copy() for k, v in state["v"].items()}

    def step(self, arrays: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray], lr: float):
        b1, b2, eps, wd = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in arrays.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + eps)
            if wd > 0.0 and p.ndim > 1:
                update = update + wd * p
            p -= lr * update

    def state(self) -> dict:
        return {"step": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


@dataclass
class Checkpoint:
    """Model snapshot plus lineage metadata and optional optimizer slots."""

    params: ParamVector
    config: ModelConfig
    meta: dict = field(default_factory=dict)
    optim_state: dict | None = None

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


@dataclass
class Lineage:
    """Continually pre-trained model family plus the independent control.

    `stages` holds, per domain in training order, the checkpoint series
    saved during that domain's pretraining (final checkpoint last).
    """

    base: Checkpoint
    stages: list[tuple[str, list[Checkpoint]]] = field(default_factory=list)
    independent: Checkpoint | None = None

    def released(self, i: int) -> Checkpoint:
        """The model released after finishing domain i (1-based); 0 is the base."""
        if i == 0:
            return self.base
        return self.stages[i - 1][1][-1]


def _step_rng(seed: int, step: int, stream: str) -> np.random.Generator:
    return np.random.default_rng((seed, step, C_STREAMS[stream]))


C_STREAMS = {"data": 0, "mask": 1, "dropout": 2, "unlabeled": 3, "init": 4}


# ---------------------------------------------------------------------------
# masked-LM pretraining


def mlm_batch_loss(tape, cfg: ModelConfig, seg, batch, positions, targets,
                   *, train=False, dropout_rng=None):
    """Cross-entropy of masked targets; zero contribution when nothing masked."""
    fwd = M.forward_graph(tape, cfg, seg, batch, positions,
                          train=train, dropout_rng=dropout_rng)
    if positions.shape[0] == 0:
        return T.scale(T.sum_all(fwd.final), 0.0)
    return T.cross_entropy(fwd.logits_at, targets)


def mlm_eval_loss(theta: ParamVector, cfg: ModelConfig, stream: np.ndarray,
                  *, n_windows: int = 128, seq_len: int = 32, seed: int = 0) -> float:
    """Deterministic held-out MLM loss on fixed windows of a token stream."""
    rng = np.random.default_rng((seed, 0xEA))
    batch = C.corpus_windows(stream, seq_len, n_windows, rng)
    corrupted, positions, targets = C.mlm_mask(batch, MLM_MASK_PROB, rng,
                                               vocab_size=cfg.vocab_size)
    tape = T.Tape()
    seg = {k: tape.leaf(v) for k, v in theta.items()}
    loss = mlm_batch_loss(tape, cfg, seg, corrupted, positions, targets)
    return float(loss.value)


def pretrain(theta_start: ParamVector, stream: np.ndarray, steps: int,
             optim: OptimConfig, checkpoint_every: int, *,
             config: ModelConfig | None = None, seq_len: int = 32,
             domain_id: str = "", lineage: tuple = (),
             start_step: int = 0, optim_state: dict | None = None,
             curve_every: int = 50) -> tuple[list[Checkpoint], list[dict]]:
    """Optimize the MLM objective over random windows of a domain stream.

    Emits checkpoints every `checkpoint_every` optimizer steps and at the
    final step. Resuming from any emitted checkpoint (its params, step and
    optimizer slots) reproduces the remaining trajectory bitwise.
    Returns (checkpoints, loss curve records).
    """
    cfg = config or theta_start.config
    if cfg is None:
        raise TrainingError("pretrain needs a ModelConfig")
    if steps < 0:
        raise TrainingError("steps must be >= 0")
    meta = {"domain": domain_id, "lineage": tuple(lineage), "seed": optim.seed}

    work = {k: v.copy() for k, v in theta_start.items()}
    if steps == 0:
        ckpt = Checkpoint(ParamVector(work, cfg), cfg, dict(meta, step=start_step),
                          optim_state)
        return [ckpt], []

    opt = AdamW(optim, work, state=optim_state)
    checkpoints: list[Checkpoint] = []
    curve: list[dict] = []
    for local in range(steps):
        step = start_step + local
        rng_data = _step_rng(optim.seed, step, "data")
        batch = C.corpus_windows(stream, seq_len, optim.batch_size, rng_data)
        corrupted, positions, targets = C.mlm_mask(
            batch, MLM_MASK_PROB, _step_rng(optim.seed, step, "mask"),
            vocab_size=cfg.vocab_size)

        tape = T.Tape()
        seg = {k: tape.leaf(v, trainable=True) for k, v in work.items()}
        loss = mlm_batch_loss(tape, cfg, seg, corrupted, positions, targets,
                              train=True, dropout_rng=_step_rng(optim.seed, step, "dropout"))
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingError(f"non-finite pretraining loss at step {step}: {loss_val}")
        grads = tape.backward(loss)
        grad_arrays = {k: grads[seg[k].nid] for k in work}
        opt.step(work, grad_arrays, lr_at(step, optim))

        if local % curve_every == 0 or local == steps - 1:
            curve.append({"step": step + 1, "train_loss": loss_val})
        done = step + 1
        if done % checkpoint_every == 0 or local == steps - 1:
            if not (checkpoints and checkpoints[-1].step == done):
                checkpoints.append(Checkpoint(
                    ParamVector({k: v.copy() for k, v in work.items()}, cfg), cfg,
                    dict(meta, step=done), opt.state()))
    return checkpoints, curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: EffectiveModel, dataset: C.TaskDataset,
             batch_size: int = 128) -> tuple[float, float]:
    """(accuracy, mean restricted cross-entropy) over a dataset split."""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate an empty split")
    verb = dataset.spec.verbalizer
    labels = np.asarray(sorted(verb))
    hits, losses = 0, []
    for lo in range(0, len(dataset), batch_size):
        sl = slice(lo, min(lo + batch_size, len(dataset)))
        pred, dist = M.classify_batch(model, dataset.tokens[sl], dataset.mask_pos[sl], verb)
        gold = dataset.labels[sl]
        hits += int(np.sum(pred == gold))
        cols = np.searchsorted(labels, gold)
        losses.append(-np.log(np.maximum(dist[np.arange(len(gold)), cols], 1e-300)))
    return hits / len(dataset), float(np.concatenate(losses).mean())


def zero_shot_eval(theta0: ParamVector, dataset: C.TaskDataset,
                   config: ModelConfig | None = None) -> float:
    """Accuracy of the bare backbone (identity delta) on a test split."""
    return evaluate(M.compose(theta0, None, config), dataset)[0]


# ---------------------------------------------------------------------------
# downstream adaptation


@dataclass
class TuneResult:
    delta: AdaptedWeights
    curve: list[dict]            # step, train_loss, dev_acc, dev_loss
    best_step: int
    best_dev_acc: float


def restricted_task_loss(tape, cfg, seg, dataset: C.TaskDataset, idx,
                         *, train=False, dropout_rng=None):
    """Verbalizer-restricted cross-entropy on the selected examples."""
    tokens = dataset.tokens[idx]
    positions = np.stack([np.arange(len(idx)), dataset.mask_pos[idx]], axis=1)
    fwd = M.forward_graph(tape, cfg, seg, tokens, positions,
                          train=train, dropout_rng=dropout_rng)
    toks = M.verbalizer_tokens(dataset.spec.verbalizer)
    restricted = T.transpose(T.take_rows(T.transpose(fwd.logits_at, (1, 0)), toks), (1, 0))
    labels = np.asarray(sorted(dataset.spec.verbalizer))
    targets = np.searchsorted(labels, dataset.labels[idx])
    return T.cross_entropy(restricted, targets)


def sample_batch(rng, n: int, batch_size: int) -> np.ndarray:
    if n >= batch_size:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.integers(0, n, size=batch_size)


def tune_loop(theta0: ParamVector, cfg: ModelConfig, method: str,
              init_delta: AdaptedWeights | None, optim: OptimConfig,
              loss_builder: Callable, dev_ds: C.TaskDataset | None,
              eval_every: int = 25) -> TuneResult:
    """Generic adaptation loop shared by supervised and distillation tuning.

    `loss_builder(tape, seg, step)` returns the scalar loss for one step;
    segment leaves for trainable parameters are rebuilt every step. Model
    selection returns the trainable state with the best dev accuracy, ties
    resolved toward the earlier step.
    """
    if method not in (FINE_TUNE, ADAPTER_TUNE):
        raise TrainingError(f"unknown tuning method {method!r}")

    if method == FINE_TUNE:
        if init_delta is not None:
            if init_delta.kind != FULL_DELTA:
                raise TrainingError("fine-tune init requires a full-parameter delta")
            work = {k: v.copy() for k, v in M.compose(theta0, init_delta, cfg).params.items()}
        else:
            work = {k: v.copy() for k, v in theta0.items()}
        trainable = list(work)
        adapters = None
    else:
        if init_delta is not None:
            if init_delta.kind != ADAPTER:
                raise TrainingError("adapter init requires adapter-kind weights")
            expected = tuple(M.adapter_schema(cfg))
            if init_delta.segments.schema() != expected:
                raise TrainingError("adapter init schema does not match the model config")
            adapters = {k: v.copy() for k, v in init_delta.segments.items()}
        else:
            seed = int(np.random.default_rng((optim.seed, C_STREAMS["init"])).integers(2**31))
            fresh = M.init_adapter_delta(cfg, seed, dtype=theta0["embed.token"].dtype)
            adapters = dict(fresh.segments.items())
        work = {k: np.asarray(v) for k, v in theta0.items()}
        trainable = list(adapters)

    def current_model() -> EffectiveModel:
        pv = ParamVector(work, cfg)
        ad = ParamVector(adapters, cfg) if adapters is not None else None
        return EffectiveModel(cfg, pv, ad)

    def snapshot() -> dict:
        src = adapters if adapters is not None else work
        return {k: src[k].copy() for k in trainable}

    opt_arrays = {k: (adapters if adapters is not None else work)[k] for k in trainable}
    opt = AdamW(optim, opt_arrays)

    best = snapshot()
    best_acc, best_step = -1.0, 0
    curve: list[dict] = []
    if dev_ds is not None:
        acc0, loss0 = evaluate(current_model(), dev_ds)
        best_acc, best = acc0, snapshot()
        curve.append({"step": 0, "train_loss": float("nan"),
                      "dev_acc": acc0, "dev_loss": loss0})

    for step in range(optim.max_steps):
        tape = T.Tape()
        seg = {k: tape.leaf(v, trainable=k in trainable) for k, v in work.items()}
        if adapters is not None:
            seg.update({k: tape.leaf(v, trainable=True) for k, v in adapters.items()})
        loss = loss_builder(tape, seg, step)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingError(f"non-finite adaptation loss at step {step}: {loss_val}")
        grads = tape.backward(loss)
        grad_arrays = {k: grads[seg[k].nid] for k in trainable}
        opt.step(opt_arrays, grad_arrays, lr_at(step, optim))

        if dev_ds is not None and ((step + 1) % eval_every == 0 or step == optim.max_steps - 1):
            acc, dev_loss = evaluate(current_model(), dev_ds)
            curve.append({"step": step + 1, "train_loss": loss_val,
                          "dev_acc": acc, "dev_loss": dev_loss})
            if acc > best_acc:
                best_acc, best_step, best = acc, step + 1, snapshot()

    if dev_ds is None:
        best, best_step, best_acc = snapshot(), optim.max_steps, float("nan")

    if method == FINE_TUNE:
        theta_best = ParamVector(best, cfg)
        delta = M.full_delta_from(theta_best, theta0)
    else:
        delta = AdaptedWeights(ADAPTER, ParamVector(best, cfg))
    return TuneResult(delta, curve, best_step, best_acc)


def adapt(theta0: ParamVector, splits: Mapping[str, C.TaskDataset], method: str,
          optim: OptimConfig, *, init: AdaptedWeights | None = None,
          config: ModelConfig | None = None, eval_every: int = 25) -> TuneResult:
    """Supervised downstream adaptation against a task's train/dev splits.

    method selects full fine-tuning (delta = displacement of all weights)
    or adapter tuning (backbone frozen, only adapter segments trained).
    `init` recycles existing adapted weights as the starting point; steps=0
    with an init returns that init unchanged.
    """
    cfg = config or theta0.config
    if cfg is None:
        raise TrainingError("adapt needs a ModelConfig")
    train_ds = splits["train"]
    if len(train_ds) == 0:
        raise TrainingError("adapt requires a non-empty train split")
    dev_ds = splits.get("dev")

    if optim.max_steps == 0 and init is not None:
        return TuneResult(init.copy(), [], 0, float("nan"))

    def loss_builder(tape, seg, step):
        rng = _step_rng(optim.seed, step, "data")
        idx = sample_batch(rng, len(train_ds), optim.batch_size)
        return restricted_task_loss(tape, cfg, seg, train_ds, idx, train=True,
                                    dropout_rng=_step_rng(optim.seed, step, "dropout"))

    result = tune_loop(theta0, cfg, method, init, optim, loss_builder, dev_ds, eval_every)
    result.delta.source_task = train_ds.spec.task_id
    return result


def convergence_step(curve: list[dict]) -> int:
    """First evaluated step whose dev accuracy reaches 90% of the run's
    final dev accuracy."""
    entries = [(r["step"], r["dev_acc"]) for r in curve if not np.isnan(r["dev_acc"])]
    if not entries:
        raise TrainingError("curve carries no dev evaluations")
    threshold = 0.9 * entries[-1][1]
    for step, acc in entries:
        if acc >= threshold:
            return step
    return entries[-1][0]
