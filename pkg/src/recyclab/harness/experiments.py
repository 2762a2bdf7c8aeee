"""Experiment recipes over a standard laboratory of domains and tasks.

The lab holds a base model pretrained on the base domain, a continually
pretrained successor (with intermediate checkpoints), an independently
initialized and trained control model, and a six-task downstream suite
(two tasks in each of the three rule families). Each recipe consumes the
lab, writes CSV metrics plus a JSON summary embedding the config hash,
and returns the summary. Given one config and seed list, outputs are a
pure function of the inputs; timestamps live only in run_info.json.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import corpus as C
from .. import model as M
from .. import recycle as R
from .. import train as TR
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig


class MissingInputError(Exception):
    """A referenced checkpoint or directory does not exist."""


FAMILY_ORDER = ("order", "presence", "position")
TASK_NAMES = {fam: (f"t_{fam}_a", f"t_{fam}_b") for fam in FAMILY_ORDER}


# ---------------------------------------------------------------------------
# standard laboratory


@dataclass
class Lab:
    config: ExperimentConfig
    model_cfg: M.ModelConfig
    domains: dict[str, C.DomainSpec]
    streams: dict[str, np.ndarray]
    lineage: TR.Lineage
    tasks: dict[str, C.TaskSpec] = field(default_factory=dict)
    _splits: dict = field(default_factory=dict)

    def splits(self, task_id: str) -> dict[str, C.TaskDataset]:
        if task_id not in self._splits:
            spec = self.tasks[task_id]
            self._splits[task_id] = C.make_task_dataset(
                spec, self.config["task.n_train"], self.config["task.seed"])
        # dev/test sizes track the train size; trim to the configured sizes
        out = dict(self._splits[task_id])
        out["dev"] = out["dev"].subset(np.arange(min(len(out["dev"]),
                                                     self.config["task.n_dev"])))
        out["test"] = out["test"].subset(np.arange(min(len(out["test"]),
                                                       self.config["task.n_test"])))
        return out

    def backbone(self, name: str) -> TR.Checkpoint:
        if name == "m0":
            return self.lineage.base
        if name == "m_ind":
            if self.lineage.independent is None:
                raise MissingInputError("lab has no independent control model")
            return self.lineage.independent
        if name.startswith("m"):
            return self.lineage.released(int(name[1:]))
        raise ConfigError(f"unknown backbone {name!r}")


def standard_domains(cfg: ExperimentConfig) -> dict[str, C.DomainSpec]:
    v = cfg["model.vocab_size"]
    domains = {"d0": C.DomainSpec("d0", block_index=0, overlap=1.0, vocab_size=v, seed=0)}
    n_extra = 1 + cfg["pretrain.extra_domains"]
    for i in range(1, n_extra + 1):
        overlap = 0.6 if i == 4 else 0.3
        domains[f"d{i}"] = C.DomainSpec(f"d{i}", block_index=i, overlap=overlap,
                                        vocab_size=v, seed=i)
    domains["d_ind"] = C.DomainSpec("d_ind", block_index=5, overlap=0.5,
                                    vocab_size=v, seed=9)
    return domains


def standard_tasks(cfg: ExperimentConfig, domains) -> dict[str, C.TaskSpec]:
    dom = domains[cfg["task.domain"]]
    tasks = {}
    for fam in FAMILY_ORDER:
        for idx, name in enumerate(TASK_NAMES[fam]):
            tasks[name] = C.TaskSpec(name, dom, fam, seed=3 + idx,
                                     seq_len=cfg["task.seq_len"])
    return tasks


def sibling_task(task_id: str) -> str:
    """The same-family partner task."""
    for fam, (a, b) in TASK_NAMES.items():
        if task_id == a:
            return b
        if task_id == b:
            return a
    raise ConfigError(f"unknown task {task_id!r}")


def other_family_task(task_id: str) -> str:
    """A fixed different-family source for the same task index."""
    for fam, names in TASK_NAMES.items():
        if task_id in names:
            idx = names.index(task_id)
            next_fam = FAMILY_ORDER[(FAMILY_ORDER.index(fam) + 1) % len(FAMILY_ORDER)]
            return TASK_NAMES[next_fam][idx]
    raise ConfigError(f"unknown task {task_id!r}")


def _dtype(cfg: ExperimentConfig):
    return np.float32 if cfg["dtype"] == "float32" else np.float64


def build_lab(cfg: ExperimentConfig, out_dir: Path, *, train_if_missing: bool = True) -> Lab:
    """Assemble the lab, loading lineage checkpoints from `lineage_dir` when
    configured, otherwise pretraining them into <out>/lineage."""
    model_cfg = M.ModelConfig(**cfg.group("model"))
    domains = standard_domains(cfg)
    streams = {d.domain_id: C.generate_domain_corpus(d, cfg["pretrain.corpus_tokens"],
                                                     seed=10 + i)
               for i, d in enumerate(domains.values())}

    lineage_dir = Path(cfg["lineage_dir"]) if cfg["lineage_dir"] else out_dir / "lineage"
    lineage = _load_or_train_lineage(cfg, model_cfg, domains, streams, lineage_dir,
                                     train_if_missing)
    lab = Lab(cfg, model_cfg, domains, streams, lineage)
    lab.tasks = standard_tasks(cfg, domains)
    return lab


def _lineage_paths(lineage_dir: Path, cfg: ExperimentConfig):
    n_stage_ckpts = max(1, cfg["pretrain.steps"] // cfg["pretrain.checkpoint_every"])
    steps = sorted({(i + 1) * cfg["pretrain.checkpoint_every"]
                    for i in range(n_stage_ckpts)} | {cfg["pretrain.steps"]})
    return steps


def _load_or_train_lineage(cfg, model_cfg, domains, streams, lineage_dir: Path,
                           train_if_missing: bool) -> TR.Lineage:
    marker = lineage_dir / "m0.rclb"
    if marker.exists():
        return _load_lineage(cfg, lineage_dir)
    if not train_if_missing:
        raise MissingInputError(f"lineage checkpoints not found under {lineage_dir}")
    return _train_lineage(cfg, model_cfg, domains, streams, lineage_dir)


def _train_lineage(cfg, model_cfg, domains, streams, lineage_dir: Path) -> TR.Lineage:
    dtype = _dtype(cfg)
    steps = cfg["pretrain.steps"]
    seq_len = cfg["pretrain.seq_len"]
    lineage_dir.mkdir(parents=True, exist_ok=True)

    theta = M.init_params(model_cfg, seed=cfg["model.seed"], dtype=dtype)
    ckpts, curve = TR.pretrain(theta, streams["d0"], steps, cfg.pretrain_optim(0),
                               checkpoint_every=steps or 1, seq_len=seq_len,
                               domain_id="d0", lineage=("d0",))
    base = ckpts[-1]
    base.meta["name"] = "m0"
    save_checkpoint(lineage_dir / "m0.rclb", base)
    write_csv(lineage_dir / "m0_loss.csv", curve)

    stages = []
    prev = base
    lineage_names = ["d0"]
    domain_ids = [d for d in domains if d not in ("d0", "d_ind")]
    for i, did in enumerate(domain_ids, start=1):
        lineage_names.append(did)
        ckpt_every = cfg["pretrain.checkpoint_every"] if i == 1 else (steps or 1)
        series, curve = TR.pretrain(prev.params, streams[did], steps,
                                    cfg.pretrain_optim(i), checkpoint_every=ckpt_every,
                                    seq_len=seq_len, domain_id=did,
                                    lineage=tuple(lineage_names))
        for ck in series:
            ck.meta["name"] = f"m{i}"
            save_checkpoint(lineage_dir / f"m{i}_step{ck.step}.rclb", ck)
        write_csv(lineage_dir / f"m{i}_loss.csv", curve)
        stages.append((did, series))
        prev = series[-1]

    theta_ind = M.init_params(model_cfg, seed=cfg["pretrain.ind_seed"], dtype=dtype)
    ind_ckpts, curve = TR.pretrain(theta_ind, streams["d_ind"], steps,
                                   cfg.pretrain_optim(9), checkpoint_every=steps or 1,
                                   seq_len=seq_len, domain_id="d_ind",
                                   lineage=("d_ind",))
    independent = ind_ckpts[-1]
    independent.meta["name"] = "m_ind"
    save_checkpoint(lineage_dir / "m_ind.rclb", independent)
    write_csv(lineage_dir / "m_ind_loss.csv", curve)

    return TR.Lineage(base, stages, independent)


def _load_lineage(cfg, lineage_dir: Path) -> TR.Lineage:
    base = load_checkpoint(lineage_dir / "m0.rclb")
    stages = []
    i = 1
    domain_ids = [f"d{j}" for j in range(1, 2 + cfg["pretrain.extra_domains"])]
    for did in domain_ids:
        series = []
        for step in _lineage_paths(lineage_dir, cfg):
            p = lineage_dir / f"m{i}_step{step}.rclb"
            if p.exists():
                series.append(load_checkpoint(p))
        if not series:
            break
        stages.append((did, series))
        i += 1
    ind_path = lineage_dir / "m_ind.rclb"
    independent = load_checkpoint(ind_path) if ind_path.exists() else None
    return TR.Lineage(base, stages, independent)


# ---------------------------------------------------------------------------
# artifact helpers


def write_csv(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_summary(out_dir: Path, cfg: ExperimentConfig, summary: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"kind": cfg["kind"], "config_hash": cfg.hash(), **summary}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
    cfg.save(out_dir / "config.cfg")
    with open(out_dir / "run_info.json", "w") as fh:
        json.dump({"finished_unix": time.time()}, fh)
    return summary


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON-serializable: {type(o)}")


def _map_seeds(cfg: ExperimentConfig, fn, seeds=None):
    """Run fn(seed) for each seed, optionally across a thread pool."""
    seeds = list(cfg["seeds"] if seeds is None else seeds)
    if cfg["threads"] > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg["threads"]) as pool:
            return dict(zip(seeds, pool.map(fn, seeds)))
    return {s: fn(s) for s in seeds}


def median(xs) -> float:
    return float(np.median(np.asarray(list(xs), dtype=np.float64)))


def _methods(cfg: ExperimentConfig) -> list[str]:
    m = cfg["method"]
    if m == "both":
        return [TR.ADAPTER_TUNE, TR.FINE_TUNE]
    return [TR.ADAPTER_TUNE if m == "adapter" else TR.FINE_TUNE]


def _adapt_optim(cfg: ExperimentConfig, method: str, seed: int, **overrides) -> TR.OptimConfig:
    lr = cfg["optim.lr"] if method == TR.ADAPTER_TUNE else cfg["optim.finetune_lr"]
    base = dict(lr=lr, batch_size=cfg["optim.batch_size"], max_steps=cfg["optim.max_steps"],
                beta1=cfg["optim.beta1"], beta2=cfg["optim.beta2"], eps=cfg["optim.eps"],
                weight_decay=cfg["optim.weight_decay"], warmup_frac=cfg["optim.warmup_frac"])
    base.update(overrides)
    return TR.OptimConfig(seed=seed, **base)


def _task_for(cfg: ExperimentConfig, lab: Lab) -> str:
    fam = cfg["task.family"]
    if fam not in FAMILY_ORDER:
        raise ConfigError(f"unknown task family {fam!r}")
    return TASK_NAMES[fam][cfg["task.index"]]


# ---------------------------------------------------------------------------
# recipes


def run_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    summary = {"domains": list(lab.domains)}
    for name in ["m0"] + [f"m{i+1}" for i in range(len(lab.lineage.stages))] + ["m_ind"]:
        ck = lab.backbone(name)
        did = ck.meta.get("domain", "")
        stream = lab.streams[did]
        summary[f"{name}_dev_loss"] = TR.mlm_eval_loss(ck.params, lab.model_cfg, stream,
                                                       seq_len=cfg["pretrain.seq_len"])
    if lab.lineage.stages:
        summary["m1_checkpoints"] = [c.step for c in lab.lineage.stages[0][1]]
        summary["m1_on_d0_loss"] = TR.mlm_eval_loss(
            lab.lineage.released(1).params, lab.model_cfg, lab.streams["d0"],
            seq_len=cfg["pretrain.seq_len"])
        summary["m0_on_d0_loss"] = TR.mlm_eval_loss(
            lab.lineage.base.params, lab.model_cfg, lab.streams["d0"],
            seq_len=cfg["pretrain.seq_len"])
    return write_summary(out, cfg, summary)


def run_adapt(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    task_id = _task_for(cfg, lab)
    splits = lab.splits(task_id)
    backbone = lab.backbone(cfg["backbone"])
    results = {}
    for method in _methods(cfg):
        def one(seed, method=method):
            res = TR.adapt(backbone.params, splits, method,
                           _adapt_optim(cfg, method, seed),
                           config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
            acc, loss = TR.evaluate(M.compose(backbone.params, res.delta, lab.model_cfg),
                                    splits["test"])
            write_csv(out / f"curve_{method}_seed{seed}.csv", res.curve)
            save_checkpoint(out / f"delta_{method}_seed{seed}.rclb", res.delta)
            return {"test_acc": acc, "test_loss": loss, "best_step": res.best_step,
                    "convergence_step": TR.convergence_step(res.curve)}
        per_seed = _map_seeds(cfg, one)
        results[method] = {"per_seed": per_seed,
                           "median_test_acc": median(r["test_acc"] for r in per_seed.values())}
    summary = {"task": task_id, "backbone": cfg["backbone"], "results": results,
               "zero_shot": TR.zero_shot_eval(backbone.params, splits["test"],
                                              lab.model_cfg)}
    return write_summary(out, cfg, summary)


def run_direct_apply(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    task_id = _task_for(cfg, lab)
    splits = lab.splits(task_id)
    m0 = lab.lineage.base
    series = [m0] + lab.lineage.stages[0][1]
    per_method = {}
    for method in _methods(cfg):
        def one(seed, method=method):
            res = TR.adapt(m0.params, splits, method, _adapt_optim(cfg, method, seed),
                           config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
            rows = R.direct_apply_sweep(series, res.delta, splits["test"])
            for r in rows:
                r.update(seed=seed, method=method)
            return rows
        rows_by_seed = _map_seeds(cfg, one)
        all_rows = [r for rows in rows_by_seed.values() for r in rows]
        write_csv(out / f"sweep_{method}.csv", all_rows)

        def props(rows):
            applied = [r["accuracy"] for r in rows if r["step"] > 0]
            zs = [r["zero_shot"] for r in rows if r["step"] > 0]
            above = all(a > z for a, z in zip(applied, zs))
            plateau = float(np.mean(applied[len(applied) // 2:]))
            return {"always_above_zero_shot": above,
                    "first_minus_plateau": applied[0] - plateau,
                    "initial_drop": applied[0] > plateau}
        per_seed_props = {s: props(rows) for s, rows in rows_by_seed.items()}
        per_method[method] = {
            "per_seed": per_seed_props,
            "pass_above_zero_shot": median(
                p["always_above_zero_shot"] for p in per_seed_props.values()) >= 1.0,
            "pass_initial_drop": median(
                p["first_minus_plateau"] for p in per_seed_props.values()) > 0.0,
        }
    summary = {"task": task_id, "methods": per_method,
               "n_checkpoints": len(series) - 1}
    return write_summary(out, cfg, summary)


def _adapted_thetas(lab: Lab, cfg, splits, method: str, seed: int, names):
    """Adapt each named backbone on the task; return composed full vectors."""
    out = {}
    for name in names:
        ck = lab.backbone(name)
        res = TR.adapt(ck.params, splits, method, _adapt_optim(cfg, method, seed),
                       config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
        out[name] = M.compose(ck.params, res.delta, lab.model_cfg).params
    return out


def run_connectivity(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    task_id = _task_for(cfg, lab)
    splits = lab.splits(task_id)
    n_interior = cfg["connectivity.n_interior"]
    per_method = {}
    for method in _methods(cfg):
        def one(seed, method=method):
            thetas = _adapted_thetas(lab, cfg, splits, method, seed,
                                     ("m0", "m1", "m_ind"))
            prof_cont = R.connectivity_profile(thetas["m0"], thetas["m1"],
                                               splits["test"], n_interior,
                                               config=lab.model_cfg,
                                               endpoint_ids=("m0", "m1"))
            prof_ind = R.connectivity_profile(thetas["m0"], thetas["m_ind"],
                                              splits["test"], n_interior,
                                              config=lab.model_cfg,
                                              endpoint_ids=("m0", "m_ind"))
            rows = []
            for tag, prof in (("continual", prof_cont), ("independent", prof_ind)):
                for r in prof.rows():
                    rows.append({"pair": tag, "seed": seed, "method": method, **r})
            acc_c, loss_c = R.barrier(prof_cont)
            acc_i, loss_i = R.barrier(prof_ind)
            return {"rows": rows, "barriers": {"continual_acc": acc_c,
                                               "continual_loss": loss_c,
                                               "independent_acc": acc_i,
                                               "independent_loss": loss_i}}
        per_seed = _map_seeds(cfg, one)
        write_csv(out / f"profiles_{method}.csv",
                  [r for res in per_seed.values() for r in res["rows"]])
        bars = {k: median(res["barriers"][k] for res in per_seed.values())
                for k in ("continual_acc", "continual_loss",
                          "independent_acc", "independent_loss")}
        per_method[method] = {
            "per_seed": {s: r["barriers"] for s, r in per_seed.items()},
            "median_barriers": bars,
            "pass_barrier_ordering": bars["continual_acc"] < 0.5 * bars["independent_acc"],
        }
    summary = {"task": task_id, "n_interior": n_interior, "methods": per_method}
    return write_summary(out, cfg, summary)


def run_attention(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    task_id = _task_for(cfg, lab)
    splits = lab.splits(task_id)
    inputs = splits["test"].tokens[:cfg["attention.n_inputs"]]

    def one(seed):
        thetas = _adapted_thetas(lab, cfg, splits, TR.FINE_TUNE, seed,
                                 ("m0", "m1", "m_ind"))
        models = {k: M.compose(v, None, lab.model_cfg) for k, v in thetas.items()}
        div_cont, _, _ = R.attention_divergence_maps(models["m0"], models["m1"], inputs)
        div_ind, _, _ = R.attention_divergence_maps(models["m0"], models["m_ind"], inputs)
        rows = [{"pair": pair, "seed": seed, "layer": l, "head": h,
                 "jsd": float(d[l, h])}
                for pair, d in (("continual", div_cont), ("independent", div_ind))
                for l in range(d.shape[0]) for h in range(d.shape[1])]
        return {"rows": rows, "continual": float(div_cont.mean()),
                "independent": float(div_ind.mean())}

    per_seed = _map_seeds(cfg, one)
    write_csv(out / "attention_jsd.csv",
              [r for res in per_seed.values() for r in res["rows"]])
    cont = median(r["continual"] for r in per_seed.values())
    ind = median(r["independent"] for r in per_seed.values())
    summary = {"task": task_id, "n_inputs": int(inputs.shape[0]),
               "per_seed": {s: {"continual": r["continual"], "independent": r["independent"]}
                            for s, r in per_seed.items()},
               "median_continual_jsd": cont, "median_independent_jsd": ind,
               "pass_similarity_ordering": cont < ind}
    return write_summary(out, cfg, summary)


def run_init_recycle(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    method = _methods(cfg)[0]
    m0, m1 = lab.lineage.base, lab.lineage.released(1)

    sources = {}
    for task_id in lab.tasks:
        res = TR.adapt(m0.params, lab.splits(task_id), method,
                       _adapt_optim(cfg, method, cfg["seeds"][0]),
                       config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
        sources[task_id] = res.delta
        save_checkpoint(out / f"source_{task_id}.rclb", res.delta)

    init_classes = ("random", "same", "sim", "diff")
    rows, results = [], {}
    for task_id in lab.tasks:
        splits = lab.splits(task_id)
        init_map = {"random": None, "same": sources[task_id],
                    "sim": sources[sibling_task(task_id)],
                    "diff": sources[other_family_task(task_id)]}
        results[task_id] = {}
        for klass in init_classes:
            def one(seed, init=init_map[klass]):
                res = TR.adapt(m1.params, splits, method,
                               _adapt_optim(cfg, method, seed), init=init,
                               config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
                acc, _ = TR.evaluate(M.compose(m1.params, res.delta, lab.model_cfg),
                                     splits["test"])
                return {"test_acc": acc, "convergence_step": TR.convergence_step(res.curve)}
            per_seed = _map_seeds(cfg, one)
            entry = {"per_seed": per_seed,
                     "median_acc": median(r["test_acc"] for r in per_seed.values()),
                     "median_convergence": median(r["convergence_step"]
                                                  for r in per_seed.values())}
            results[task_id][klass] = entry
            rows.append({"task": task_id, "init": klass, **{
                k: entry[k] for k in ("median_acc", "median_convergence")}})
    write_csv(out / "init_recycle.csv", rows)

    mean_acc = {k: float(np.mean([results[t][k]["median_acc"] for t in lab.tasks]))
                for k in init_classes}
    conv_ok = sum(results[t]["same"]["median_convergence"]
                  <= results[t]["random"]["median_convergence"] for t in lab.tasks)
    summary = {
        "method": method, "results": results, "mean_acc": mean_acc,
        "same_converges_no_later_in": f"{conv_ok}/{len(lab.tasks)}",
        "pass_convergence": conv_ok >= (len(lab.tasks) + 1) // 2
                            and all(results[t]["same"]["median_convergence"]
                                    <= results[t]["random"]["median_convergence"]
                                    or results[t]["same"]["median_acc"]
                                    >= results[t]["random"]["median_acc"]
                                    for t in lab.tasks),
        "pass_final_accuracy": mean_acc["same"] >= mean_acc["random"],
        "reported_ordering_same_sim_diff": (mean_acc["same"], mean_acc["sim"],
                                            mean_acc["diff"]),
    }
    return write_summary(out, cfg, summary)


def _distill_tasks(lab: Lab) -> list[str]:
    return [TASK_NAMES[fam][0] for fam in FAMILY_ORDER]


def _teacher_for(lab, cfg, task_id, method) -> tuple[M.EffectiveModel, M.AdaptedWeights]:
    splits = lab.splits(task_id)
    if not cfg["distill.teacher_full"]:
        splits = dict(splits, train=C.sample_kshot(splits["train"], cfg["distill.k_shot"],
                                                   seed=cfg["seeds"][0]))
    m0 = lab.lineage.base
    res = TR.adapt(m0.params, splits, method,
                   _adapt_optim(cfg, method, cfg["seeds"][0]),
                   config=lab.model_cfg, eval_every=cfg["optim.eval_every"])
    return M.compose(m0.params, res.delta, lab.model_cfg), res.delta


def run_distill(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    method = _methods(cfg)[0]
    m1 = lab.lineage.released(1)
    kd = R.KDConfig(hidden_weight=cfg["kd.hidden_weight"], task_mix=cfg["kd.task_mix"],
                    temperature=cfg["kd.temperature"],
                    unlabeled_source=cfg["kd.unlabeled_source"])
    arms = ("task_only", "l_final", "l_final_init")
    results, rows = {}, []
    for task_id in _distill_tasks(lab):
        teacher, teacher_delta = _teacher_for(lab, cfg, task_id, method)
        splits = lab.splits(task_id)
        teacher_acc, _ = TR.evaluate(teacher, splits["test"])

        def one_arm(arm, seed):
            few = dict(splits,
                       train=C.sample_kshot(splits["train"], cfg["distill.k_shot"], seed))
            init = teacher_delta if arm == "l_final_init" else None
            arm_kd = R.KDConfig(hidden_weight=kd.hidden_weight,
                                task_mix=1.0 if arm == "task_only" else kd.task_mix,
                                temperature=kd.temperature,
                                unlabeled_source=kd.unlabeled_source)
            res = R.distill_adapt(m1.params, teacher, few, method, arm_kd,
                                  _adapt_optim(cfg, method, seed), init=init,
                                  config=lab.model_cfg,
                                  eval_every=cfg["optim.eval_every"])
            acc, _ = TR.evaluate(M.compose(m1.params, res.delta, lab.model_cfg),
                                 splits["test"])
            return acc

        results[task_id] = {"teacher_acc": teacher_acc}
        for arm in arms:
            per_seed = _map_seeds(cfg, lambda s, a=arm: one_arm(a, s))
            results[task_id][arm] = {"per_seed": per_seed,
                                     "median_acc": median(per_seed.values())}
            rows.append({"task": task_id, "arm": arm,
                         "median_acc": results[task_id][arm]["median_acc"]})
    write_csv(out / "distill.csv", rows)

    kd_wins = sum(results[t]["l_final"]["median_acc"] >= results[t]["task_only"]["median_acc"]
                  for t in results)
    mean_final = float(np.mean([results[t]["l_final"]["median_acc"] for t in results]))
    mean_init = float(np.mean([results[t]["l_final_init"]["median_acc"] for t in results]))
    summary = {"method": method, "results": results,
               "kd_wins": f"{kd_wins}/{len(results)}",
               "pass_kd_helps": kd_wins >= 2,
               "mean_l_final": mean_final, "mean_l_final_init": mean_init,
               "pass_init_helps": mean_init >= mean_final}
    return write_summary(out, cfg, summary)


def run_itp(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    m1 = lab.lineage.released(1)
    kd = R.KDConfig(hidden_weight=cfg["kd.hidden_weight"], task_mix=cfg["kd.task_mix"],
                    temperature=cfg["kd.temperature"])
    results, rows = {}, []
    for task_id in _distill_tasks(lab):
        teacher, _ = _teacher_for(lab, cfg, task_id, TR.FINE_TUNE)
        splits = lab.splits(task_id)

        def one(seed):
            few = dict(splits,
                       train=C.sample_kshot(splits["train"], cfg["distill.k_shot"], seed))
            optim = _adapt_optim(cfg, TR.FINE_TUNE, seed)
            base = R.distill_adapt(m1.params, teacher, few, TR.FINE_TUNE, kd, optim,
                                   config=lab.model_cfg,
                                   eval_every=cfg["optim.eval_every"])
            itp = R.interp_distill_adapt(m1.params, teacher.params, few, optim,
                                         gamma=cfg["itp.gamma"],
                                         n_segments=cfg["itp.segments"],
                                         config=lab.model_cfg,
                                         eval_every=cfg["optim.eval_every"])
            acc_b, _ = TR.evaluate(M.compose(m1.params, base.delta, lab.model_cfg),
                                   splits["test"])
            acc_i, _ = TR.evaluate(M.compose(m1.params, itp.delta, lab.model_cfg),
                                   splits["test"])
            return {"l_final": acc_b, "l_itp": acc_i}

        per_seed = _map_seeds(cfg, one)
        results[task_id] = {
            "per_seed": per_seed,
            "median_l_final": median(r["l_final"] for r in per_seed.values()),
            "median_l_itp": median(r["l_itp"] for r in per_seed.values())}
        rows.append({"task": task_id, **{k: v for k, v in results[task_id].items()
                                         if k != "per_seed"}})
    write_csv(out / "itp.csv", rows)
    mean_final = float(np.mean([results[t]["median_l_final"] for t in results]))
    mean_itp = float(np.mean([results[t]["median_l_itp"] for t in results]))
    summary = {"results": results, "mean_l_final": mean_final, "mean_l_itp": mean_itp,
               "pass_itp_helps": mean_itp >= mean_final}
    return write_summary(out, cfg, summary)


def run_projection(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    fam = cfg["projection.family"]
    source_id, target_id = TASK_NAMES[fam]
    m0, m1 = lab.lineage.base, lab.lineage.released(1)
    kd = R.KDConfig(hidden_weight=cfg["kd.hidden_weight"], task_mix=0.0,
                    temperature=cfg["kd.temperature"])

    def one(seed):
        src_splits = lab.splits(source_id)
        tgt_splits = lab.splits(target_id)
        optim = _adapt_optim(cfg, TR.ADAPTER_TUNE, seed)
        delta_src = TR.adapt(m0.params, src_splits, TR.ADAPTER_TUNE, optim,
                             config=lab.model_cfg,
                             eval_every=cfg["optim.eval_every"]).delta
        delta_tgt_old = TR.adapt(m0.params, tgt_splits, TR.ADAPTER_TUNE, optim,
                                 config=lab.model_cfg,
                                 eval_every=cfg["optim.eval_every"]).delta
        proj_optim = TR.OptimConfig(lr=cfg["projection.lr"],
                                    batch_size=cfg["optim.batch_size"],
                                    max_steps=cfg["projection.steps"], seed=seed,
                                    warmup_frac=cfg["optim.warmup_frac"])
        proj = R.train_projection(delta_src, m0.params, m1.params,
                                  R.task_inputs_pool(src_splits["train"]),
                                  cfg["projection.bottleneck"], kd, proj_optim,
                                  verbalizer=lab.tasks[source_id].verbalizer,
                                  config=lab.model_cfg)
        upgraded = R.apply_projection(proj, delta_tgt_old)
        acc, _ = TR.evaluate(M.compose(m1.params, upgraded, lab.model_cfg),
                             tgt_splits["test"])
        zs = TR.zero_shot_eval(m1.params, tgt_splits["test"], lab.model_cfg)

        t0 = time.perf_counter()
        TR.adapt(m1.params, tgt_splits, TR.ADAPTER_TUNE, optim, config=lab.model_cfg,
                 eval_every=cfg["optim.eval_every"])
        tune_seconds = time.perf_counter() - t0
        return {"projected_acc": acc, "zero_shot": zs,
                "apply_seconds": proj.last_apply_seconds,
                "tune_seconds": tune_seconds,
                "speedup": tune_seconds / max(proj.last_apply_seconds, 1e-9),
                "kd_loss_first": proj.loss_history[0]["kd_loss"],
                "kd_loss_last": proj.loss_history[-1]["kd_loss"]}

    per_seed = _map_seeds(cfg, one)
    write_csv(out / "projection.csv",
              [{"seed": s, **r} for s, r in per_seed.items()])
    med_acc = median(r["projected_acc"] for r in per_seed.values())
    med_zs = median(r["zero_shot"] for r in per_seed.values())
    med_speed = median(r["speedup"] for r in per_seed.values())
    summary = {"source": source_id, "target": target_id, "per_seed": per_seed,
               "median_projected_acc": med_acc, "median_zero_shot": med_zs,
               "median_speedup": med_speed,
               "pass_beats_zero_shot": med_acc > med_zs,
               "pass_speedup_100x": med_speed >= 100.0}
    return write_summary(out, cfg, summary)


def run_distance(cfg: ExperimentConfig, out: Path) -> dict:
    lab = build_lab(cfg, out)
    series = [lab.lineage.base] + lab.lineage.stages[0][1]
    interval = cfg["pretrain.checkpoint_every"]
    rows = []
    for prev, nxt in zip(series, series[1:]):
        rows.append({"kind": "pretrain_interval", "from_step": prev.step,
                     "to_step": nxt.step,
                     "distance": R.param_distance(prev.params, nxt.params)})

    task_id = _task_for(cfg, lab)
    splits = lab.splits(task_id)

    def one(seed):
        optim = _adapt_optim(cfg, TR.FINE_TUNE, seed, max_steps=interval)
        res = TR.adapt(lab.lineage.base.params, splits, TR.FINE_TUNE, optim,
                       config=lab.model_cfg, eval_every=max(interval // 4, 1))
        return R.param_distance(res.delta)

    per_seed = _map_seeds(cfg, one)
    delta_norm = median(per_seed.values())
    for s, v in per_seed.items():
        rows.append({"kind": "adaptation_delta", "from_step": 0, "to_step": interval,
                     "distance": v})
    write_csv(out / "distances.csv", rows)
    pre_dists = [r["distance"] for r in rows if r["kind"] == "pretrain_interval"]
    summary = {"task": task_id, "interval_steps": interval,
               "pretrain_interval_distances": pre_dists,
               "median_adaptation_delta_norm": delta_norm,
               "per_seed_delta_norm": per_seed,
               "pass_delta_smaller": delta_norm < min(pre_dists)}
    return write_summary(out, cfg, summary)


RECIPES = {
    "pretrain": run_pretrain,
    "adapt": run_adapt,
    "direct-apply": run_direct_apply,
    "connectivity": run_connectivity,
    "attention": run_attention,
    "init-recycle": run_init_recycle,
    "distill": run_distill,
    "itp": run_itp,
    "projection": run_projection,
    "distance": run_distance,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute one experiment recipe; returns its summary dict."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return RECIPES[cfg["kind"]](cfg, out)
