"""FLOPs-budgeted allocation of per-layer kept ratios.

Kept ratios are ``sigmoid(theta)`` and are trained by SGD on the task loss
plus ``penalty * (F(ratios) - target)**2``, where ``F`` is the fraction of
dense FLOPs the masked network still spends. Each step the keep counts are
re-derived from the current ratios and fed to the OT problems as new target
marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import diffcalc as dc
from . import netlab
from .pruner import (
    SGD,
    LRSchedule,
    PruneConfig,
    RunMetrics,
    initial_states,
    prune_train,
    ratio_to_k,
)


@dataclass
class ArchDescriptor:
    """Per-layer kernel areas ``K_j``, channel counts ``n_0..n_N`` and map areas ``A_j``."""

    kernel_areas: List[int]
    channels: List[int]
    feature_areas: List[int]

    def __post_init__(self):
        n = len(self.kernel_areas)
        if n < 1 or len(self.channels) != n + 1 or len(self.feature_areas) != n:
            raise ValueError("arch lengths must be N, N+1 and N")
        for name in ("kernel_areas", "channels", "feature_areas"):
            values = getattr(self, name)
            if any(int(v) != v or v < 1 for v in values):
                raise ValueError(f"{name} must hold positive integers")

    @property
    def n_layers(self) -> int:
        return len(self.kernel_areas)

    @classmethod
    def from_network(cls, net: netlab.Network) -> "ArchDescriptor":
        """Dense layers: unit kernel and feature-map areas."""
        channels = [net.layers[0].n_in] + [l.n_out for l in net.layers]
        ones = [1] * len(net.layers)
        return cls(list(ones), channels, list(ones))

    def to_dict(self) -> dict:
        return {"kernel_areas": list(self.kernel_areas), "channels": list(self.channels),
                "feature_areas": list(self.feature_areas)}


@dataclass
class BudgetSpec:
    target: float
    penalty: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.target <= 1.0:
            raise ValueError("budget target must lie in (0, 1]")
        if not self.penalty > 0:
            raise ValueError("penalty weight must be positive")


def _flops(ratios, arch: ArchDescriptor):
    k = np.asarray(arch.kernel_areas, dtype=float)
    n = np.asarray(arch.channels, dtype=float)
    a = np.asarray(arch.feature_areas, dtype=float)
    if arch.n_layers > 1:
        prev = dc.concatenate([np.ones(1), ratios[:-1]])
    else:
        prev = np.ones(1)
    return dc.sum((k * n[:-1] * prev + 1.0) * n[1:] * ratios * a)


def flops_fraction(ratios, arch: ArchDescriptor):
    """Masked-to-dense FLOPs ratio; the input-channel ratio is fixed at 1."""
    if np.shape(dc.value_of(ratios)) != (arch.n_layers,):
        raise ValueError(f"expected {arch.n_layers} ratios")
    # same arithmetic for numerator and denominator: all-ones gives exactly 1
    return _flops(ratios, arch) / float(_flops(np.ones(arch.n_layers), arch))


def budget_penalty(ratios, arch: ArchDescriptor, spec: BudgetSpec):
    gap = flops_fraction(ratios, arch) - spec.target
    return spec.penalty * gap * gap


def full_ratios(alpha, site_layers: List[int], n_layers: int):
    """Kept-ratio vector over all layers; layers without a mask site stay at 1."""
    pos = {layer: i for i, layer in enumerate(site_layers)}
    parts = [dc.reshape(alpha[pos[j]], (1,)) if j in pos else np.ones(1)
             for j in range(n_layers)]
    return dc.concatenate(parts)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class _BudgetHook:
    """Joins :func:`prune_train`: learns ``theta`` and re-targets the OT marginals."""

    def __init__(self, arch, spec, theta, site_layers, momentum, schedule):
        self.arch = arch
        self.spec = spec
        self.theta = np.array(theta, dtype=float)
        self.site_layers = site_layers
        self.opt = SGD(momentum, 0.0)
        self.schedule = schedule
        self.step = 0
        self._node = None
        self._last = {}

    def before(self, tape, states):
        self._node = tape.variable(self.theta, "theta")
        alpha = dc.sigmoid(self._node)
        flops = flops_fraction(
            full_ratios(alpha, self.site_layers, self.arch.n_layers), self.arch)
        gap = flops - self.spec.target
        penalty = self.spec.penalty * gap * gap
        new_states, targets, ks = [], {}, []
        for g, (st, layer) in enumerate(zip(states, self.site_layers)):
            n = st.marginals.n
            # a layer must keep at least one unit to stay connected
            k = max(1, ratio_to_k(1.0 - float(alpha.value[g]), n))
            st = st.with_budget(k)
            ks.append(k)
            if 0 < k < n:
                a_g = dc.reshape(alpha[g], (1,))
                targets[g] = dc.straight_through(
                    st.marginals.b, dc.concatenate([1.0 - a_g, a_g]))
            new_states.append(st)
        self._last = {"flops": float(flops.value),
                      "ratios": [float(v) for v in alpha.value], "k": ks}
        return new_states, targets, penalty

    def after(self, grads, lr):
        lr = self.schedule(self.step)
        self.step += 1
        self.theta = self.opt.update("theta", self.theta, grads[self._node], lr, decay=False)

    def record(self):
        return dict(self._last)


@dataclass
class BudgetResult:
    net: netlab.Network
    states: list
    metrics: RunMetrics
    theta: np.ndarray
    arch: ArchDescriptor
    site_layers: List[int] = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        return dc.sigmoid(self.theta)

    def flops(self) -> float:
        ratios = full_ratios(self.ratios, self.site_layers, self.arch.n_layers)
        return float(flops_fraction(ratios, self.arch))

    def realized_flops(self) -> float:
        """FLOPs fraction of the derived architecture (integer keep counts)."""
        kept = np.ones(self.arch.n_layers)
        for layer, st in zip(self.site_layers, self.states):
            kept[layer] = st.marginals.k / st.marginals.n
        return float(flops_fraction(kept, self.arch))


def budget_prune_train(net: netlab.Network, data: netlab.Dataset, config: PruneConfig,
                       spec: BudgetSpec, arch: Optional[ArchDescriptor] = None,
                       theta_lr: float = 0.01,
                       metrics: Optional[RunMetrics] = None) -> BudgetResult:
    """Structured pruning with learned per-layer kept ratios.

    ``theta`` starts at the logit of the configured kept ratio ``1 - ratio``
    for every site and is trained with momentum SGD (no weight decay) on a
    cosine schedule from ``theta_lr``. Larger rates with momentum tend to
    overshoot into the flat tails of the sigmoid.
    """
    if config.mode != "structured" or config.scope != "layer":
        raise ValueError("budget mode needs structured, per-layer pruning")
    arch = arch or ArchDescriptor.from_network(net)
    if arch.n_layers != len(net.layers):
        raise ValueError("arch descriptor does not match the network depth")
    sites = net.sites
    keep = [min(max(1.0 - config.site_ratio(i), 1e-3), 1.0 - 1e-3)
            for i in range(len(sites))]
    theta = np.array([logit(p) for p in keep])
    schedule = LRSchedule(config.schedule, theta_lr, config.prune_steps)
    hook = _BudgetHook(arch, spec, theta, sites, config.momentum, schedule)
    states = initial_states(net, config)
    trained, states, metrics = prune_train(net, data, config, states, metrics, hook=hook)
    return BudgetResult(trained, states, metrics, hook.theta, arch, list(sites))
