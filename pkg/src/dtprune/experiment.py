"""Run configuration files and the end-to-end pipelines behind the CLI.

A run config is a JSON object::

    {
      "seed": 0,
      "output_dir": "runs/rings",
      "data":   {"kind": "concentric-rings", "n_samples": 512, "noise": 0.1,
                 "test_samples": 1024},
      "model":  {"hidden": [32, 32], "pretrain_steps": 1000},
      "prune":  {"ratio": 0.5, "epsilon": 1.0, "prune_steps": 5000,
                 "finetune_steps": 1000},
      "budget": {"target": 0.5, "penalty": 100.0}
    }

``data`` takes either a generator ``kind`` or a CSV ``path`` (plus an
optional ``test_path``). ``budget`` is optional; it may carry an ``arch``
object with ``kernel_areas``, ``channels`` and ``feature_areas``. Every
other key of ``prune`` maps onto :class:`~dtprune.pruner.PruneConfig`.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import diffcalc as dc
from . import netlab
from .budget import ArchDescriptor, BudgetSpec, budget_prune_train
from .ot_core import PrunerState, build_cost_matrix, plan_to_mask, proximal_step
from .pruner import (
    SGD,
    AblationRow,
    PruneConfig,
    RunMetrics,
    derive_architecture,
    finetune,
    kept_counts,
    mask_norm_correlation,
    pretrain,
    prune_train,
    sinkhorn_steps_ablation,
    train_dense_baseline,
)


class ConfigError(ValueError):
    """Invalid run config; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataSpec:
    kind: Optional[str] = None
    path: Optional[str] = None
    test_path: Optional[str] = None
    n_samples: int = 512
    test_samples: int = 1024
    noise: float = 0.1
    classes: int = 2


@dataclass
class ModelSpec:
    hidden: List[int] = field(default_factory=lambda: [32, 32])
    mask_first: bool = False
    pretrain_steps: int = 0


@dataclass
class BudgetSection:
    spec: BudgetSpec
    arch: Optional[ArchDescriptor] = None
    theta_lr: float = 0.01


@dataclass
class RunConfig:
    data: DataSpec
    model: ModelSpec
    prune: PruneConfig
    budget: Optional[BudgetSection] = None
    seed: int = 0
    output_dir: Optional[str] = None


def _check_keys(blob, allowed, required, prefix):
    if not isinstance(blob, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    for key in blob:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    for key in required:
        if key not in blob:
            raise ConfigError(f"{prefix}{key}", "missing required key")


def _build(cls, blob, prefix):
    try:
        return cls(**blob)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip("."), str(exc)) from exc


def parse_run_config(blob: dict) -> RunConfig:
    """Validate a decoded config object. Raises :class:`ConfigError`."""
    _check_keys(blob, {"seed", "output_dir", "data", "model", "prune", "budget"},
                ("data", "model", "prune"), "")
    seed = blob.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")

    data_blob = blob["data"]
    _check_keys(data_blob, {f.name for f in fields(DataSpec)}, (), "data.")
    if ("kind" in data_blob) == ("path" in data_blob):
        raise ConfigError("data.kind", "give exactly one of data.kind or data.path")
    data = _build(DataSpec, data_blob, "data.")
    if data.kind is not None and data.kind not in netlab.DATASET_KINDS:
        raise ConfigError("data.kind", f"unknown dataset kind {data.kind!r}")
    if data.kind is not None and data.classes != 2 and data.kind != "concentric-rings":
        raise ConfigError("data.classes", f"{data.kind} supports only two classes")

    model_blob = blob["model"]
    _check_keys(model_blob, {f.name for f in fields(ModelSpec)}, ("hidden",), "model.")
    model = _build(ModelSpec, model_blob, "model.")
    if not model.hidden or any(not isinstance(h, int) or h < 1 for h in model.hidden):
        raise ConfigError("model.hidden", "must be a list of positive integers")

    prune_blob = blob["prune"]
    allowed = {f.name for f in fields(PruneConfig)} - {"seed"}
    _check_keys(prune_blob, allowed, ("ratio", "epsilon", "prune_steps"), "prune.")
    prune = _build(PruneConfig, {**prune_blob, "seed": seed}, "prune.")

    budget = None
    if "budget" in blob:
        b = blob["budget"]
        _check_keys(b, {"target", "penalty", "arch", "theta_lr"}, ("target",), "budget.")
        spec = _build(BudgetSpec, {k: v for k, v in b.items() if k in ("target", "penalty")},
                      "budget.")
        arch = None
        if "arch" in b:
            _check_keys(b["arch"], {"kernel_areas", "channels", "feature_areas"},
                        ("kernel_areas", "channels", "feature_areas"), "budget.arch.")
            arch = _build(ArchDescriptor, b["arch"], "budget.arch.")
        if prune.mode != "structured" or prune.scope != "layer":
            raise ConfigError("prune.mode", "budget mode needs structured, per-layer pruning")
        budget = BudgetSection(spec, arch, b.get("theta_lr", 0.01))
    return RunConfig(data, model, prune, budget, seed, blob.get("output_dir"))


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return parse_run_config(blob)


def with_overrides(cfg: RunConfig, epsilon=None, ratio=None, seed=None) -> RunConfig:
    prune = asdict(cfg.prune)
    if epsilon is not None:
        prune["epsilon"] = epsilon
    if ratio is not None:
        prune["ratio"] = ratio
    if seed is not None:
        prune["seed"] = seed
    try:
        new_prune = PruneConfig(**prune)
    except ValueError as exc:
        raise ConfigError("prune", str(exc)) from exc
    return RunConfig(cfg.data, cfg.model, new_prune, cfg.budget,
                     cfg.seed if seed is None else seed, cfg.output_dir)


# --- data and model --------------------------------------------------------------


def load_data(cfg: RunConfig):
    """(train, test) datasets. Generated data uses disjoint seeds per split."""
    spec = cfg.data
    if spec.path is not None:
        train = netlab.load_csv(spec.path)
        test = netlab.load_csv(spec.test_path) if spec.test_path else train
        return train, test
    make = lambda n, s: netlab.make_toy_dataset(spec.kind, n, seed=s, noise=spec.noise,
                                                classes=spec.classes)
    return make(spec.n_samples, 2 * cfg.seed), make(spec.test_samples, 2 * cfg.seed + 1)


def build_network(cfg: RunConfig, train: netlab.Dataset, seed: int) -> netlab.Network:
    """Fresh MLP for ``seed``, pre-trained densely if the config asks for it."""
    sizes = [train.features.shape[1], *cfg.model.hidden, train.num_classes]
    net = netlab.mlp(sizes, seed=seed, mode=cfg.prune.mode, mask_first=cfg.model.mask_first)
    if cfg.model.pretrain_steps:
        prune_cfg = PruneConfig(**{**asdict(cfg.prune), "seed": seed})
        net = pretrain(net, train, cfg.model.pretrain_steps, prune_cfg)
    return net


# --- pipelines -------------------------------------------------------------------


@dataclass
class PruneOutcome:
    summary: dict
    trained: netlab.Network
    states: List[PrunerState]
    pruned: netlab.Network
    metrics: RunMetrics


def run_prune(cfg: RunConfig, out_dir: Optional[str] = None) -> PruneOutcome:
    """Pre-train, prune (budget mode if configured), derive, finetune.

    With ``out_dir`` set, per-step records stream to ``metrics.jsonl`` and
    the pruned network lands in ``checkpoint.json``.
    """
    train, test = load_data(cfg)
    net = build_network(cfg, train, cfg.seed)
    sink = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        sink = open(os.path.join(out_dir, "metrics.jsonl"), "w")
    try:
        metrics = RunMetrics(sink=sink)
        summary = {}
        if cfg.budget is not None:
            res = budget_prune_train(net, train, cfg.prune, cfg.budget.spec,
                                     cfg.budget.arch, cfg.budget.theta_lr, metrics)
            trained, states = res.net, res.states
            summary["flops_fraction"] = res.flops()
            summary["realized_flops_fraction"] = res.realized_flops()
            summary["kept_ratios"] = [float(r) for r in res.ratios]
        else:
            trained, states, metrics = prune_train(net, train, cfg.prune, metrics=metrics)
        pruned = derive_architecture(trained, states, cfg.prune.scope)
        before = netlab.accuracy(pruned, test)
        tuned = finetune(pruned, train, cfg.prune, metrics)
        hardness = [r["hardness"] for r in metrics.records if "hardness" in r][-1]
        summary.update({
            "accuracy_before_finetune": before,
            "accuracy_after_finetune": netlab.accuracy(tuned, test),
            "params_dense": trained.parameter_count(),
            "params_pruned": tuned.parameter_count(),
            "hardness": hardness,
            "kept": {str(k): v for k, v in kept_counts(trained, states, cfg.prune.scope).items()},
            "site_sizes": {str(l): trained.layers[l].site_size for l in trained.sites},
        })
        if cfg.prune.mode == "structured":
            summary["mask_norm_correlation"] = mask_norm_correlation(
                trained, states, cfg.prune.scope)
        metrics.add({"summary": summary})
    finally:
        if sink is not None:
            sink.close()
    if out_dir:
        netlab.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), tuned, states,
                               extra={"summary": summary})
    return PruneOutcome(summary, trained, states, tuned, metrics)


def run_baseline(cfg: RunConfig) -> float:
    """Test accuracy of the unpruned network trained with the same recipe."""
    train, test = load_data(cfg)
    net = build_network(cfg, train, cfg.seed)
    return netlab.accuracy(train_dense_baseline(net, train, cfg.prune), test)


def run_ablation(cfg: RunConfig, steps_list: Sequence[int],
                 seeds: Sequence[int] = (0, 1, 2)) -> List[AblationRow]:
    train, test = load_data(cfg)
    return sinkhorn_steps_ablation(lambda seed: build_network(cfg, train, seed), train,
                                   cfg.prune, steps_list, eval_data=test, seeds=seeds)


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["inner_iters", "accuracy_mean", "accuracy_std", "ot_seconds"])
        for r in rows:
            writer.writerow([r.inner_iters, f"{r.accuracy_mean:.6f}",
                             f"{r.accuracy_std:.6f}", f"{r.ot_seconds:.6f}"])


# --- toy problem -------------------------------------------------------------------


TOY_WEIGHTS = (2.0, 1.0, 3.0)


def run_toy(steps: int = 1000, epsilon: float = 10.0, k: int = 1, lr: float = 0.1,
            init: float = 0.5, weights: Sequence[float] = TOY_WEIGHTS) -> List[dict]:
    """Learn a mask minimising ``weights . m`` under a keep-``k`` budget.

    Scores start at ``init`` and follow plain gradient descent. Each row holds
    the scores used at that step, the resulting mask and its loss.
    """
    w = np.asarray(weights, dtype=float)
    s = np.full(w.size, float(init))
    state = PrunerState.initial(w.size, k, epsilon)
    opt = SGD(momentum=0.0)
    rows = []
    for step in range(1, steps + 1):
        tape = dc.Tape()
        scores = tape.variable(s, "s")
        state = proximal_step(state, build_cost_matrix(scores))
        mask = plan_to_mask(state.plan).values
        loss = dc.dot(mask, w)
        grad = tape.backward(loss)[scores]
        rows.append({"step": step, "scores": s.tolist(),
                     "mask": [float(v) for v in mask.value], "loss": float(loss.value)})
        s = opt.update("s", s, grad, lr, decay=False)
        state = PrunerState(state.epsilon, state.marginals, state.plan.detached(),
                            state.g, state.step)
    return rows


def write_toy_csv(rows: Sequence[dict], path) -> None:
    n = len(rows[0]["scores"]) if rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *[f"s{i}" for i in range(n)],
                         *[f"m{i}" for i in range(n)], "loss"])
        for r in rows:
            writer.writerow([r["step"], *[repr(v) for v in r["scores"]],
                             *[repr(v) for v in r["mask"]], repr(r["loss"])])
