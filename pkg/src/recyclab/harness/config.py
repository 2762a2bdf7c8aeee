"""Flat key=value experiment configuration with dotted namespaces.

The format is line-oriented plain text: one `key = value` per line, `#`
comments, seed lists comma-separated. Every key has a typed default,
unknown keys are rejected, and serialization round-trips losslessly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..model import ModelConfig
from ..train import OptimConfig


class ConfigError(Exception):
    """Malformed or unknown configuration input."""


KINDS = ("pretrain", "adapt", "direct-apply", "connectivity", "attention",
         "init-recycle", "distill", "itp", "projection", "distance")


def _bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("true", "1", "yes"):
        return True
    if lv in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _seeds(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(",") if x.strip() != "")


# key -> (parser, default); insertion order is the canonical file order
REGISTRY: dict[str, tuple] = {
    "kind": (str, "pretrain"),
    "out": (str, "runs/out"),
    "seeds": (_seeds, (0, 1, 2)),
    "threads": (int, 1),
    "dtype": (str, "float32"),
    "lineage_dir": (str, ""),          # reuse checkpoints from a pretrain run

    "model.n_layers": (int, 4),
    "model.n_heads": (int, 4),
    "model.d_model": (int, 128),
    "model.d_ff": (int, 512),
    "model.vocab_size": (int, 512),
    "model.max_seq_len": (int, 64),
    "model.adapter_bottleneck": (int, 16),
    "model.dropout_rate": (float, 0.1),
    "model.seed": (int, 100),

    # adaptation optimizer; pretraining has its own group below
    "optim.lr": (float, 1e-3),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.98),
    "optim.eps": (float, 1e-6),
    "optim.weight_decay": (float, 0.01),
    "optim.warmup_frac": (float, 0.06),
    "optim.batch_size": (int, 16),
    "optim.max_steps": (int, 400),
    "optim.eval_every": (int, 25),
    "optim.finetune_lr": (float, 1e-4),

    "pretrain.steps": (int, 2000),
    "pretrain.batch_size": (int, 32),
    "pretrain.lr": (float, 3e-4),
    "pretrain.seq_len": (int, 24),
    "pretrain.checkpoint_every": (int, 250),
    "pretrain.corpus_tokens": (int, 300_000),
    "pretrain.extra_domains": (int, 0),   # continue the lineage past the first domain
    "pretrain.ind_seed": (int, 999),

    "task.n_train": (int, 256),
    "task.n_dev": (int, 64),
    "task.n_test": (int, 256),
    "task.seq_len": (int, 20),
    "task.seed": (int, 7),
    "task.family": (str, "presence"),
    "task.index": (int, 0),
    "task.domain": (str, "d1"),

    "backbone": (str, "m0"),           # which lineage member an adapt run tunes
    "method": (str, "adapter"),        # adapter | fine_tune | both

    "kd.hidden_weight": (float, 12.5),
    "kd.task_mix": (float, 0.2),
    "kd.temperature": (float, 10.0),
    "kd.unlabeled_source": (str, "task"),
    "distill.k_shot": (int, 32),
    "distill.teacher_full": (_bool, True),

    "itp.gamma": (float, 1.0),
    "itp.segments": (int, 2),

    "connectivity.n_interior": (int, 25),
    "attention.n_inputs": (int, 8),

    "projection.bottleneck": (int, 8),
    "projection.steps": (int, 400),
    "projection.lr": (float, 3e-3),
    "projection.family": (str, "position"),
}


@dataclass
class ExperimentConfig:
    """Typed view over the flat registry; every field has a default."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(REGISTRY)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        full = {}
        for key, (parse, default) in REGISTRY.items():
            if key not in self.values:
                full[key] = default
            else:
                raw = self.values[key]
                if isinstance(raw, str):
                    try:
                        full[key] = parse(raw)
                    except (ValueError, ConfigError) as e:
                        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})")
                elif parse is _seeds:
                    full[key] = _seeds(raw)
                else:
                    full[key] = raw
        self.values = full
        if self.values["kind"] not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.values['kind']!r}; "
                              f"choose from {KINDS}")
        if self.values["dtype"] not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.values["method"] not in ("adapter", "fine_tune", "both"):
            raise ConfigError("method must be adapter, fine_tune or both")

    def __getitem__(self, key: str):
        return self.values[key]

    def group(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.group("model"))

    def optim_config(self, seed: int, **overrides) -> OptimConfig:
        g = self.group("optim")
        g.pop("eval_every")
        g.pop("finetune_lr")
        g.update(overrides)
        return OptimConfig(seed=seed, **g)

    def pretrain_optim(self, seed: int) -> OptimConfig:
        return OptimConfig(lr=self["pretrain.lr"], batch_size=self["pretrain.batch_size"],
                           max_steps=self["pretrain.steps"], seed=seed,
                           beta1=self["optim.beta1"], beta2=self["optim.beta2"],
                           eps=self["optim.eps"], weight_decay=self["optim.weight_decay"],
                           warmup_frac=self["optim.warmup_frac"])

    def serialize(self) -> str:
        lines = []
        for key in REGISTRY:
            v = self.values[key]
            if key == "seeds":
                v = ",".join(str(s) for s in v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = val
        return cls(values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.serialize())
