"""Randomised oracle checks of the OT layer and the gradient path.

Each check compares the implementation against an independent route to the
same quantity (brute-force enumeration, a converged Sinkhorn solve, the
primal objective, central finite differences) and reports the worst error
seen over its instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import diffcalc as dc
from . import netlab
from .ot_core import (
    MarginalPair,
    PrunerState,
    build_cost_matrix,
    dual_objective,
    exact_topk_plan,
    hard_topk_mask,
    plan_entropy,
    plan_to_mask,
    proximal_step,
    sinkhorn_solve,
    transport_cost,
)


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: worst error {self.worst:.3e} "
                f"(tol {self.tol:.0e}, {self.instances} instances)")


def brute_force_min_cost(cost: np.ndarray, k: int) -> float:
    """Cheapest hard plan: enumerate every size-``k`` keep set."""
    n = cost.shape[0]
    best = math.inf
    for kept in itertools.combinations(range(n), k):
        keep = np.zeros(n, dtype=bool)
        keep[list(kept)] = True
        best = min(best, (cost[~keep, 0].sum() + cost[keep, 1].sum()) / n)
    return best


def separated_scores(rng, n: int, gap: float = 0.05) -> np.ndarray:
    """Distinct scores in [-0.5, 1.5] at least ``gap`` apart."""
    while True:
        s = rng.uniform(-0.5, 1.5, size=n)
        if n < 2 or np.min(np.diff(np.sort(s))) >= gap:
            return s


def proximal_sequence(cost, marginals: MarginalPair, epsilon: float, steps: int,
                      tol: float = 1e-11) -> PrunerState:
    """``steps`` fully converged proximal updates from the uniform plan."""
    state = PrunerState.initial(marginals.n, marginals.k, epsilon)
    for _ in range(steps):
        state = proximal_step(state, cost, tol=tol)
    return state


# --- end-to-end gradient instance --------------------------------------------


@dataclass
class GradientInstance:
    """A masked MLP whose loss depends on scores through one proximal step."""

    net: netlab.Network
    features: np.ndarray
    labels: np.ndarray
    state: PrunerState

    @classmethod
    def random(cls, rng, n: int, epsilon: float = 1.0, warm_steps: int = 2):
        d, classes = 3, 3
        net = netlab.mlp([d, n, classes], seed=int(rng.integers(1 << 30)),
                         mode="structured", mask_first=True)
        net.scores[0] = rng.uniform(-0.2, 1.2, size=n)
        features = rng.normal(size=(6, d))
        labels = rng.integers(0, classes, size=6)
        k = int(rng.integers(1, n)) if n > 1 else 1
        state = PrunerState.initial(n, k, epsilon)
        for _ in range(warm_steps):
            state = proximal_step(state, build_cost_matrix(rng.uniform(0, 1, size=n)))
        return cls(net, features, labels, state)

    def loss(self, scores, weights, score_sign: float = 1.0):
        """Cross-entropy after one proximal step; arguments may be tape nodes."""
        nxt = proximal_step(self.state, build_cost_matrix(scores * score_sign))
        mask = plan_to_mask(nxt.plan).values
        params = [(weights, self.net.layers[0].bias),
                  (self.net.layers[1].weights, self.net.layers[1].bias)]
        logits = netlab.forward_masked(self.net, self.features, {0: mask}, params)
        return netlab.cross_entropy_loss(logits, self.labels)

    def tape_gradients(self, score_sign: float = 1.0):
        tape = dc.Tape()
        s = tape.variable(self.net.scores[0])
        w = tape.variable(self.net.layers[0].weights)
        grads = tape.backward(self.loss(s, w, score_sign))
        return grads[s], grads[w]

    def numeric_gradients(self, h: float = 1e-5):
        point = {"s": self.net.scores[0], "w": self.net.layers[0].weights}
        fd = dc.finite_difference_gradient(
            lambda p: float(self.loss(p["s"], p["w"])), point, h=h)
        return fd["s"], fd["w"]


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# --- the checks -----------------------------------------------------------------


def check_topk(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 9))
        k = int(rng.integers(0, n + 1))
        s = np.round(rng.uniform(-0.5, 1.5, size=n), 2)
        plan = exact_topk_plan(sign * s, k)
        mask_err = np.max(np.abs(plan_to_mask(plan).array - hard_topk_mask(s, k).array))
        cost = build_cost_matrix(s)
        gap = transport_cost(plan, cost) - brute_force_min_cost(cost, k)
        worst = max(worst, float(mask_err), abs(gap))
    return worst


def check_marginals(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 11))
        marg = MarginalPair(n, int(rng.integers(1, n)))
        plan = sinkhorn_solve(build_cost_matrix(sign * rng.uniform(-0.5, 1.5, n)),
                              marg, float(rng.uniform(0.05, 2.0))).plan
        mass = plan.mass
        worst = max(worst, np.max(np.abs(mass.sum(axis=1) - marg.a)),
                    np.max(np.abs(mass.sum(axis=0) - marg.b)))
    return float(worst)


def check_annealing(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 9))
        marg = MarginalPair(n, int(rng.integers(1, n)))
        s = rng.uniform(-0.5, 1.5, n)
        eps = float(rng.uniform(0.2, 2.0))
        steps = int(rng.choice([2, 5, 10]))
        state = proximal_sequence(build_cost_matrix(sign * s), marg, eps, steps)
        direct = sinkhorn_solve(build_cost_matrix(s), marg, eps / steps).plan
        worst = max(worst, float(np.max(np.abs(state.plan.mass - direct.mass))))
    return worst


def check_duality(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 11))
        marg = MarginalPair(n, int(rng.integers(1, n)))
        cost = build_cost_matrix(rng.uniform(-0.5, 1.5, n))
        eps = float(rng.uniform(0.1, 2.0))
        res = sinkhorn_solve(sign * cost, marg, eps)
        primal = transport_cost(res.plan, cost) - eps * plan_entropy(res.plan)
        dual = dual_objective(res.duals, cost, marg, eps)
        worst = max(worst, abs(dual - primal))
    return worst


def check_entropic_limit(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(2, 11))
        k = int(rng.integers(1, n))
        s = separated_scores(rng, n)
        soft = plan_to_mask(sinkhorn_solve(build_cost_matrix(sign * s),
                                           MarginalPair(n, k), 1e-3).plan).array
        worst = max(worst, float(np.max(np.abs(soft - hard_topk_mask(s, k).array))))
    return worst


def check_gradients(rng, count: int, sign: float) -> float:
    worst = 0.0
    for _ in range(count):
        inst = GradientInstance.random(rng, int(rng.integers(2, 17)))
        gs, gw = inst.tape_gradients(sign)
        fs, fw = inst.numeric_gradients()
        worst = max(worst, relative_error(gs, fs), relative_error(gw, fw))
    return worst


CHECKS: List[tuple] = [
    ("top-k plan matches sort and brute force", check_topk, 1e-12, 200),
    ("sinkhorn marginals", check_marginals, 1e-9, 50),
    ("eps/l kernel equivalence", check_annealing, 1e-5, 20),
    ("strong duality", check_duality, 1e-6, 50),
    ("entropic limit", check_entropic_limit, 1e-4, 30),
    ("end-to-end gradients", check_gradients, 1e-4, 10),
]


def run_oracle_suite(seed: int = 0, inject_fault: bool = False,
                     report: Callable[[str], None] = print) -> List[CheckResult]:
    """Run every check; ``inject_fault`` negates the scores the implementation sees."""
    sign = -1.0 if inject_fault else 1.0
    results = []
    for i, (name, check, tol, count) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        result = CheckResult(name, check(rng, count, sign), tol, count)
        report(result.line())
        results.append(result)
    return results
