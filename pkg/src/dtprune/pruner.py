"""Joint SGD on weights and importance scores with one proximal OT step per batch.

The two-stage recipe is :func:`prune_train` (learn soft masks), then
:func:`derive_architecture` (keep exactly ``k`` units per site) and
:func:`finetune` (plain SGD on the smaller network).
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import diffcalc as dc
from . import netlab
from .ot_core import (
    PrunerState,
    build_cost_matrix,
    plan_to_mask,
    proximal_step,
    topk_indices,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"aborted at step {step}: {reason}")
        self.step = step


def ratio_to_k(ratio: float, n: int) -> int:
    """Keep count for a pruning ratio; rounds half away from zero."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"pruning ratio {ratio} outside [0, 1]")
    pruned = math.floor(ratio * n + 0.5)
    return min(max(n - pruned, 0), n)


# --- optimisation -----------------------------------------------------------


@dataclass
class LRSchedule:
    """Learning rate as a function of the 0-based step.

    ``cosine`` decays from ``base`` towards 0 at ``total_steps``;
    ``multistep`` multiplies by ``factors[i]`` once ``milestones[i]`` is reached.
    """

    kind: str = "cosine"
    base: float = 0.1
    total_steps: int = 1
    milestones: Sequence[int] = ()
    factors: Sequence[float] = ()

    def __post_init__(self):
        if self.kind not in ("cosine", "multistep", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not self.base > 0:
            raise ValueError("base learning rate must be positive")
        if len(self.milestones) != len(self.factors):
            raise ValueError("milestones and factors differ in length")

    def __call__(self, step: int) -> float:
        if self.kind == "cosine":
            return self.base * 0.5 * (1.0 + math.cos(math.pi * step / max(self.total_steps, 1)))
        if self.kind == "multistep":
            lr = self.base
            for milestone, factor in zip(self.milestones, self.factors):
                if step >= milestone:
                    lr *= factor
            return lr
        return self.base


class SGD:
    """Heavy-ball SGD with decoupled per-parameter weight-decay switch."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0 or weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight decay >= 0")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def update(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float,
               decay: bool = True) -> np.ndarray:
        if decay and self.weight_decay:
            grad = grad + self.weight_decay * param
        buf = self.velocity.get(key)
        if buf is None or buf.shape != param.shape:
            buf = np.array(grad, dtype=float)
        else:
            buf = self.momentum * buf + grad
        self.velocity[key] = buf
        return param - lr * buf


# --- configuration and metrics ---------------------------------------------


@dataclass
class PruneConfig:
    mode: str = "structured"
    ratio: Union[float, List[float]] = 0.5
    scope: str = "layer"  # "layer": one OT problem per site; "global": one for all
    epsilon: float = 1.0
    prune_steps: int = 1000
    finetune_steps: int = 0
    batch_size: int = 64
    seed: int = 0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    score_lr: Optional[float] = None
    finetune_lr: Optional[float] = None
    finetune_schedule: str = "cosine"
    inner_iters: int = 1
    snapshot_every: int = 0

    def __post_init__(self):
        ratios = self.ratio if isinstance(self.ratio, list) else [self.ratio]
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ValueError("ratio must lie in [0, 1]")
        if self.mode not in ("structured", "unstructured"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scope not in ("layer", "global"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.scope == "global" and isinstance(self.ratio, list):
            raise ValueError("global scope takes a single ratio")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.prune_steps < 1 or self.finetune_steps < 0 or self.batch_size < 1:
            raise ValueError("step counts and batch size out of range")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")

    def site_ratio(self, position: int) -> float:
        return self.ratio[position] if isinstance(self.ratio, list) else self.ratio


@dataclass
class RunMetrics:
    """Per-step training records, optionally mirrored to a JSON-lines file."""

    records: List[dict] = field(default_factory=list)
    ot_seconds: float = 0.0
    sink: Optional[object] = None

    def add(self, record: dict) -> None:
        self.records.append(record)
        if self.sink is not None:
            self.sink.write(json.dumps(record) + "\n")
            self.sink.flush()

    def series(self, key: str) -> list:
        return [r[key] for r in self.records if key in r]

    def dumps(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def _batches(rng, n_rows, batch_size):
    size = min(batch_size, n_rows)
    return rng.choice(n_rows, size=size, replace=False)


# --- the pruning loop ------------------------------------------------------


@dataclass
class _Site:
    layer: int
    size: int
    offset: int  # position inside the (possibly global) OT problem


@dataclass
class Problem:
    """How mask sites map onto OT problems."""

    sites: List[_Site]
    groups: List[List[int]]  # OT problem -> indices into ``sites``

    @classmethod
    def from_network(cls, net: netlab.Network, scope: str) -> "Problem":
        sites, offset = [], 0
        for layer in net.sites:
            size = net.layers[layer].site_size
            sites.append(_Site(layer, size, offset if scope == "global" else 0))
            offset += size
        if scope == "global":
            groups = [list(range(len(sites)))] if sites else []
        else:
            groups = [[i] for i in range(len(sites))]
        return cls(sites, groups)

    def group_size(self, g: int) -> int:
        return sum(self.sites[i].size for i in self.groups[g])


def initial_states(net: netlab.Network, config: PruneConfig,
                   problem: Optional[Problem] = None) -> List[PrunerState]:
    problem = problem or Problem.from_network(net, config.scope)
    states = []
    for g, members in enumerate(problem.groups):
        n = problem.group_size(g)
        k = ratio_to_k(config.site_ratio(members[0] if config.scope == "layer" else 0), n)
        states.append(PrunerState.initial(n, k, config.epsilon))
    return states


def _site_scores(net, layer_index, params, tape):
    layer = net.layers[layer_index]
    if layer.site == "structured":
        return tape.variable(net.scores[layer_index], f"s{layer_index}")
    return netlab.scores_unstructured(params[layer_index][0])


def _split_mask(mask_values, problem, group):
    members = problem.groups[group]
    if len(members) == 1:
        return {problem.sites[members[0]].layer: mask_values}
    out = {}
    for i in members:
        site = problem.sites[i]
        out[site.layer] = mask_values[site.offset: site.offset + site.size]
    return out


def soft_masks(net: netlab.Network, states: List[PrunerState],
               problem: Problem) -> Dict[int, np.ndarray]:
    masks = {}
    for g, st in enumerate(states):
        masks.update(_split_mask(plan_to_mask(st.plan).array, problem, g))
    return masks


def prune_train(net: netlab.Network, data: netlab.Dataset, config: PruneConfig,
                states: Optional[List[PrunerState]] = None,
                metrics: Optional[RunMetrics] = None,
                hook=None):
    """Learn soft masks jointly with the weights.

    Each step builds costs from the current scores, takes one proximal
    Sinkhorn step per OT problem, runs the masked forward pass and updates
    weights (with weight decay) and structured scores (without) by SGD.

    ``hook`` lets budget mode join the step: ``hook.before(tape, states)``
    returns ``(states, targets, extra_loss)`` and ``hook.after(grads, lr)``
    consumes the gradients.

    Returns:
        ``(net, states, metrics)``; ``net`` is a trained copy.
    """
    net = net.copy()
    problem = Problem.from_network(net, config.scope)
    if not problem.sites:
        raise ValueError("network has no mask sites")
    states = list(states) if states is not None else initial_states(net, config, problem)
    metrics = metrics if metrics is not None else RunMetrics()
    rng = np.random.default_rng(config.seed)
    schedule = LRSchedule(config.schedule, config.lr, config.prune_steps)
    score_schedule = LRSchedule(config.schedule, config.score_lr or config.lr,
                                config.prune_steps)
    opt = SGD(config.momentum, config.weight_decay)
    snap = config.snapshot_every

    for step in range(1, config.prune_steps + 1):
        lr = schedule(step - 1)
        idx = _batches(rng, len(data), config.batch_size)
        tape = dc.Tape()
        params = [(tape.variable(l.weights, f"w{j}"), tape.variable(l.bias, f"b{j}"))
                  for j, l in enumerate(net.layers)]
        try:
            targets, extra = {}, None
            if hook is not None:
                states, targets, extra = hook.before(tape, states)
            t0 = time.perf_counter()
            score_nodes = {s.layer: _site_scores(net, s.layer, params, tape)
                           for s in problem.sites}
            masks, new_states = {}, []
            for g, st in enumerate(states):
                members = [problem.sites[i].layer for i in problem.groups[g]]
                scores = (score_nodes[members[0]] if len(members) == 1
                          else dc.concatenate([score_nodes[m] for m in members]))
                st = proximal_step(st, build_cost_matrix(scores),
                                   inner_iters=config.inner_iters,
                                   target=targets.get(g))
                new_states.append(st)
                masks.update(_split_mask(plan_to_mask(st.plan).values, problem, g))
            metrics.ot_seconds += time.perf_counter() - t0
            logits = netlab.forward_masked(net, data.features[idx], masks, params)
            loss = netlab.cross_entropy_loss(logits, data.labels[idx])
            total = loss if extra is None else loss + extra
            grads = tape.backward(total)
        except dc.NonFiniteError as exc:
            raise TrainingAborted(step, str(exc)) from exc
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise TrainingAborted(step, "non-finite loss")

        for j, (layer, (w, b)) in enumerate(zip(net.layers, params)):
            layer.weights = opt.update(f"w{j}", layer.weights, grads[w], lr)
            layer.bias = opt.update(f"b{j}", layer.bias, grads[b], lr)
        score_lr = score_schedule(step - 1)
        for layer_index, node in score_nodes.items():
            if node.op == "variable":
                net.scores[layer_index] = opt.update(
                    f"s{layer_index}", net.scores[layer_index], grads[node],
                    score_lr, decay=False)
        if hook is not None:
            hook.after(grads, lr)
        # drop the tape: the next step only needs the plan values
        states = [_detach_state(st) for st in new_states]

        all_masks = np.concatenate([dc.value_of(masks[s.layer]) for s in problem.sites])
        record = {
            "step": step,
            "loss": loss_value,
            "hardness": float(np.mean(np.abs(all_masks - np.round(all_masks)))),
            "lr": lr,
        }
        if hook is not None:
            record.update(hook.record())
        if snap and (step % snap == 0 or step == config.prune_steps):
            record["masks"] = {str(l): [float(v) for v in dc.value_of(m)]
                               for l, m in masks.items()}
            record["scores"] = {str(l): [float(v) for v in s]
                                for l, s in net.scores.items()}
        metrics.add(record)
        if step % 500 == 0:
            log.info("prune step %d loss %.4f hardness %.4f", step, loss_value,
                     record["hardness"])
    return net, states, metrics


def _detach_state(state: PrunerState) -> PrunerState:
    return PrunerState(state.epsilon, state.marginals, state.plan.detached(),
                       np.array(state.g), state.step)


# --- architecture derivation -----------------------------------------------


def hard_masks(net: netlab.Network, states: List[PrunerState],
               scope: str = "layer") -> Dict[int, np.ndarray]:
    """Binary masks keeping the ``k`` largest soft-mask entries per OT problem."""
    problem = Problem.from_network(net, scope)
    if len(states) != len(problem.groups):
        raise ValueError("one pruner state per OT problem expected")
    out = {}
    for g, st in enumerate(states):
        soft = plan_to_mask(st.plan).array
        hard = np.zeros_like(soft)
        hard[topk_indices(soft, st.marginals.k)] = 1.0
        out.update(_split_mask(hard, problem, g))
    return out


def derive_architecture(net: netlab.Network, states: List[PrunerState],
                        scope: str = "layer") -> netlab.Network:
    """Physically remove pruned units (structured) or freeze zeros (unstructured)."""
    masks = hard_masks(net, states, scope)
    pruned = net.copy()
    for layer_index in sorted(masks):
        mask = masks[layer_index]
        layer = pruned.layers[layer_index]
        if layer.site == "structured":
            pruned = netlab.remove_units(pruned, layer_index, np.flatnonzero(mask))
        else:
            fixed = mask.reshape(layer.weights.shape)
            if layer.fixed_mask is not None:
                fixed = fixed * layer.fixed_mask
            layer.fixed_mask = fixed
            layer.weights = layer.weights * fixed
        pruned.layers[layer_index].site = "none"
        pruned.scores.pop(layer_index, None)
    return pruned


def kept_counts(net: netlab.Network, states: List[PrunerState],
                scope: str = "layer") -> Dict[int, int]:
    return {l: int(m.sum()) for l, m in hard_masks(net, states, scope).items()}


def unit_norms(net: netlab.Network, layer_index: int) -> np.ndarray:
    """L2 norm of each unit's incoming weights."""
    return np.sqrt(np.sum(net.layers[layer_index].weights ** 2, axis=1))


def mask_norm_correlation(net: netlab.Network, states: List[PrunerState],
                          scope: str = "layer") -> float:
    """Pearson correlation between soft masks and unit norms, pooled over sites."""
    problem = Problem.from_network(net, scope)
    masks = soft_masks(net, states, problem)
    if any(net.layers[l].site != "structured" for l in masks):
        raise ValueError("unit norms are defined for structured sites only")
    m = np.concatenate([masks[s.layer] for s in problem.sites])
    norms = np.concatenate([unit_norms(net, s.layer) for s in problem.sites])
    if np.std(m) == 0 or np.std(norms) == 0:
        return float("nan")
    return float(np.corrcoef(m, norms)[0, 1])


# --- plain training ---------------------------------------------------------


def train_plain(net: netlab.Network, data: netlab.Dataset, steps: int,
                schedule: LRSchedule, opt: SGD, seed: int, batch_size: int = 64,
                metrics: Optional[RunMetrics] = None, phase: str = "train",
                masks: Optional[Dict[int, np.ndarray]] = None) -> netlab.Network:
    """SGD on weights only; ``masks`` (if any) are fixed data."""
    if steps == 0:
        return net
    net = net.copy()
    rng = np.random.default_rng(seed)
    for step in range(1, steps + 1):
        lr = schedule(step - 1)
        idx = _batches(rng, len(data), batch_size)
        tape = dc.Tape()
        params = [(tape.variable(l.weights), tape.variable(l.bias)) for l in net.layers]
        try:
            logits = netlab.forward_masked(net, data.features[idx], masks, params)
            loss = netlab.cross_entropy_loss(logits, data.labels[idx])
            grads = tape.backward(loss)
        except dc.NonFiniteError as exc:
            raise TrainingAborted(step, str(exc)) from exc
        for j, (layer, (w, b)) in enumerate(zip(net.layers, params)):
            layer.weights = opt.update(f"{phase}w{j}", layer.weights, grads[w], lr)
            layer.bias = opt.update(f"{phase}b{j}", layer.bias, grads[b], lr)
            if layer.fixed_mask is not None:
                layer.weights = layer.weights * layer.fixed_mask
        if metrics is not None:
            metrics.add({"phase": phase, "step": step, "loss": float(loss.value), "lr": lr})
    return net


def _make_opt(config: PruneConfig) -> SGD:
    return SGD(config.momentum, config.weight_decay)


def finetune(net: netlab.Network, data: netlab.Dataset, config: PruneConfig,
             metrics: Optional[RunMetrics] = None) -> netlab.Network:
    """Plain SGD on the pruned network; no masks, no scores."""
    if config.finetune_steps == 0:
        return net
    schedule = LRSchedule(config.finetune_schedule, config.finetune_lr or config.lr,
                          config.finetune_steps)
    return train_plain(net, data, config.finetune_steps, schedule, _make_opt(config),
                       config.seed + 1, config.batch_size, metrics, phase="finetune")


def pretrain(net: netlab.Network, data: netlab.Dataset, steps: int,
             config: PruneConfig) -> netlab.Network:
    """Dense training before pruning; rescores structured sites afterwards."""
    schedule = LRSchedule(config.schedule, config.lr, max(steps, 1))
    net = train_plain(net, data, steps, schedule, _make_opt(config),
                      config.seed + 2, config.batch_size, phase="pretrain")
    net = net.copy()
    netlab.reset_scores(net)
    return net


def train_dense_baseline(net: netlab.Network, data: netlab.Dataset,
                         config: PruneConfig) -> netlab.Network:
    """The unpruned reference: same phases and schedules, no masks."""
    stage1 = train_plain(net, data, config.prune_steps,
                         LRSchedule(config.schedule, config.lr, config.prune_steps),
                         _make_opt(config), config.seed, config.batch_size,
                         phase="prune")
    return finetune(stage1, data, config)


# --- ablation ---------------------------------------------------------------


@dataclass
class AblationRow:
    inner_iters: int
    accuracy_mean: float
    accuracy_std: float
    ot_seconds: float
    accuracies: List[float]


def sinkhorn_steps_ablation(build_net: Callable[[int], netlab.Network],
                            data: netlab.Dataset, config: PruneConfig,
                            steps_list: Sequence[int],
                            eval_data: Optional[netlab.Dataset] = None,
                            seeds: Sequence[int] = (0, 1, 2)) -> List[AblationRow]:
    """Prune, derive and finetune once per (inner iteration count, seed).

    ``build_net(seed)`` returns the (pre-trained) network to prune. The OT
    time column is the median over seeds of the time spent in cost
    construction, proximal steps and mask extraction.
    """
    if any(j < 1 for j in steps_list):
        raise ValueError("inner iteration counts must be positive")
    eval_data = eval_data or data
    rows = []
    for j in sorted(steps_list):
        accs, times = [], []
        for seed in seeds:
            cfg = PruneConfig(**{**asdict(config), "inner_iters": j, "seed": seed})
            net = build_net(seed)
            trained, states, metrics = prune_train(net, data, cfg)
            pruned = finetune(derive_architecture(trained, states, cfg.scope), data, cfg)
            accs.append(netlab.accuracy(pruned, eval_data))
            times.append(metrics.ot_seconds)
        rows.append(AblationRow(j, float(np.mean(accs)), float(np.std(accs)),
                                float(statistics.median(times)), accs))
    return rows
