"""Optimal transport between importance scores and the binary targets {0, 1}.

A layer with ``n`` prunable units and a keep budget ``k`` defines a transport
problem from the uniform source ``a = 1/n`` on the scores to the Bernoulli
target ``b = [(n-k)/n, k/n]`` on the mask values ``0`` and ``1``. Column 0 of
every plan and cost matrix corresponds to mask value 0 (prune) and column 1
to mask value 1 (keep).

Plans are stored in the log domain. Functions that take a cost matrix accept
either a numpy array or a :class:`~dtprune.diffcalc.Node`, so the same code
runs untracked and under the autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import diffcalc as dc

LOG_FLOOR = -700.0


class DegenerateKernelError(FloatingPointError):
    pass


def _as_scores(scores):
    values = dc.value_of(scores)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("scores must be a non-empty vector")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite input")
    return values


def _check_k(k, n):
    if not (0 <= k <= n) or int(k) != k:
        raise ValueError(f"k={k} out of range for n={n}")
    return int(k)


@dataclass(frozen=True)
class MarginalPair:
    """Uniform source marginal ``a`` and Bernoulli target marginal ``b``."""

    n: int
    k: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        _check_k(self.k, self.n)

    @property
    def a(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    @property
    def b(self) -> np.ndarray:
        return np.array([(self.n - self.k) / self.n, self.k / self.n])

    @property
    def degenerate(self) -> bool:
        return self.k == 0 or self.k == self.n


@dataclass
class TransportPlan:
    """An ``n x 2`` coupling stored as log-mass per cell (``-inf`` is zero)."""

    log_mass: object  # ndarray, or a Node when produced under the tape

    @property
    def n(self) -> int:
        return dc.value_of(self.log_mass).shape[0]

    @property
    def mass(self) -> np.ndarray:
        with np.errstate(under="ignore"):
            return np.exp(dc.value_of(self.log_mass))

    @classmethod
    def from_mass(cls, mass) -> "TransportPlan":
        mass = np.asarray(mass, dtype=float)
        if np.any(mass < 0):
            raise ValueError("transport plans cannot carry negative mass")
        with np.errstate(divide="ignore"):
            return cls(np.log(mass))

    def detached(self) -> "TransportPlan":
        return TransportPlan(np.array(dc.value_of(self.log_mass), dtype=float))


@dataclass
class DualPotentials:
    f: np.ndarray
    g: np.ndarray


@dataclass
class MaskVector:
    values: object  # ndarray, or a Node under the tape
    hard: bool

    @property
    def array(self) -> np.ndarray:
        return dc.value_of(self.values)


@dataclass
class PrunerState:
    """Proximal Sinkhorn state carried across training steps.

    ``plan`` is the latest plan. When it was produced under the tape its
    ``log_mass`` is a node; the next :func:`proximal_step` detaches it.
    """

    epsilon: float
    marginals: MarginalPair
    plan: TransportPlan
    g: np.ndarray
    step: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step < 1:
            raise ValueError("step must be >= 1")

    @classmethod
    def initial(cls, n: int, k: int, epsilon: float) -> "PrunerState":
        marginals = MarginalPair(n, k)
        plan = TransportPlan(np.full((n, 2), -math.log(2 * n)))
        return cls(epsilon=float(epsilon), marginals=marginals, plan=plan,
                   g=np.ones(2), step=1)

    def with_budget(self, k: int) -> "PrunerState":
        """Same annealing history, new keep count."""
        return replace(self, marginals=MarginalPair(self.marginals.n, k))


@dataclass
class SinkhornResult:
    plan: TransportPlan
    duals: DualPotentials
    iterations: int
    violation: float
    converged: bool

    def __iter__(self):
        yield self.plan
        yield self.duals


# ---------------------------------------------------------------------------


def build_cost_matrix(scores):
    """Squared distance from each score to the targets 0 and 1."""
    _as_scores(scores)
    if dc.is_node(scores):
        col = dc.reshape(scores, (-1, 1))
        return dc.concatenate([dc.square(col), dc.square(col - 1.0)], axis=1)
    s = np.asarray(scores, dtype=float)
    return np.stack([s**2, (s - 1.0) ** 2], axis=1)


def topk_indices(scores, k):
    """Indices of the ``k`` largest scores; ties keep the higher index."""
    n = len(scores)
    # stable ascending sort by (score, index): the last k entries win
    order = np.lexsort((np.arange(n), scores))
    return np.sort(order[n - k:]) if k else np.array([], dtype=int)


def exact_topk_plan(scores, k: int) -> TransportPlan:
    s = _as_scores(scores)
    n = s.size
    k = _check_k(k, n)
    mass = np.zeros((n, 2))
    mass[:, 0] = 1.0 / n
    kept = topk_indices(s, k)
    mass[kept, 0] = 0.0
    mass[kept, 1] = 1.0 / n
    return TransportPlan.from_mass(mass)


def _hard_pattern(log_mass: np.ndarray, n: int):
    """Keep-column indicator if every cell holds 0 or 1/n, else ``None``.

    Cells at or below the log floor count as empty. A cell holds 1/n when its
    log-mass is ``-log(n)`` up to a few ulps, the round-off of log storage.
    """
    empty = log_mass <= LOG_FLOOR
    full = np.abs(log_mass + math.log(n)) <= 4 * np.finfo(float).eps * max(1.0, math.log(n))
    if not np.all(empty | full) or not np.all(full.sum(axis=1) == 1):
        return None
    return full[:, 1]


def plan_to_mask(plan: TransportPlan) -> MaskVector:
    """Soft mask ``m_i = n * P[i, keep]``.

    Hard plans (every cell empty or ``1/n``) give an exact 0/1 mask when
    untracked; on the tape the formula is kept so gradients still flow.
    """
    log_mass = plan.log_mass
    n = plan.n
    keep = _hard_pattern(np.asarray(dc.value_of(log_mass), dtype=float), n)
    if dc.is_node(log_mass):
        values = dc.exp(log_mass[:, 1]) * float(n)
    elif keep is not None:
        values = keep.astype(float)
    else:
        with np.errstate(under="ignore"):
            values = n * np.exp(np.asarray(log_mass, dtype=float)[:, 1])
    return MaskVector(values, keep is not None)


def hard_topk_mask(scores, k: int) -> MaskVector:
    s = _as_scores(scores)
    k = _check_k(k, s.size)
    values = np.zeros(s.size)
    values[topk_indices(s, k)] = 1.0
    return MaskVector(values, True)


def transport_cost(plan: TransportPlan, cost) -> float:
    """Frobenius product ``<C, P>``."""
    mass = plan.mass
    c = np.asarray(dc.value_of(cost), dtype=float)
    if c.shape != mass.shape:
        raise ValueError(f"shape mismatch: cost {c.shape} vs plan {mass.shape}")
    return float(np.sum(c * mass))


def plan_entropy(plan: TransportPlan) -> float:
    """``H(P) = -sum P (log P - 1)`` with ``0 log 0 = 0``."""
    log_mass = np.asarray(dc.value_of(plan.log_mass), dtype=float)
    mass = plan.mass
    live = mass > 0
    return float(-np.sum(mass[live] * (log_mass[live] - 1.0)))


def dual_objective(duals: DualPotentials, cost, marginals: MarginalPair,
                   epsilon: float) -> float:
    """``<f, a> + <g, b> - eps * sum exp((f_i + g_j - C_ij) / eps)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    c = np.asarray(dc.value_of(cost), dtype=float)
    f = np.asarray(duals.f, dtype=float)
    g = np.asarray(duals.g, dtype=float)
    exponent = (f[:, None] + g[None, :] - c) / epsilon
    mass_term = epsilon * math.exp(dc.logsumexp(exponent))
    return float(f @ marginals.a + g @ marginals.b - mass_term)


def _log_marginals(marginals: MarginalPair):
    with np.errstate(divide="ignore"):
        return np.log(marginals.a), np.log(marginals.b)


def _short_circuit_plan(marginals: MarginalPair) -> np.ndarray:
    n = marginals.n
    log_mass = np.full((n, 2), LOG_FLOOR)
    log_mass[:, 1 if marginals.k == n else 0] = -math.log(n)
    return log_mass


def _row_violation(log_plan, marginals):
    mass = np.exp(np.asarray(dc.value_of(log_plan)))
    return float(np.max(np.abs(mass.sum(axis=1) - marginals.a)))


def _sinkhorn_iterations(log_kernel, g, eps, log_a, log_b, iters):
    """``iters`` block-coordinate updates; returns (f, g) after the last one."""
    f = None
    for _ in range(iters):
        f = eps * log_a - eps * dc.logsumexp(log_kernel + g / eps, axis=1)
        g = eps * log_b - eps * dc.logsumexp(
            log_kernel + dc.reshape(f, (-1, 1)) / eps, axis=0
        )
    return f, g


def _assemble_plan(log_kernel, f, g, eps):
    return dc.reshape(f, (-1, 1)) / eps + log_kernel + g / eps


def _lse(x, axis):
    top = np.max(x, axis=axis, keepdims=True)
    return (top + np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True))).squeeze(axis)


STALL_CHECK = 500


def _column_offset(log_kernel, log_a, b_keep: float) -> float:
    """Scalar ``t`` solving ``sum_i a_i sigmoid(t + d_i) = b_keep``.

    With two columns the Sinkhorn fixed point only depends on
    ``t = (g_1 - g_0) / eps``, and ``d_i`` is the log-kernel column gap.
    Safeguarded Newton inside a bracket that always holds the root.
    """
    d = log_kernel[:, 1] - log_kernel[:, 0]
    a = np.exp(log_a)
    target = math.log(b_keep / (1.0 - b_keep))
    lo, hi = target - float(d.max()), target - float(d.min())
    t = 0.5 * (lo + hi)
    for _ in range(200):
        p = dc.sigmoid(t + d)
        h = float(a @ p) - b_keep
        if h == 0.0:
            break
        if h < 0:
            lo = t
        else:
            hi = t
        slope = float(a @ (p * (1.0 - p)))
        step = t - h / slope if slope > 0 else math.nan
        t = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(t)):
            break
    return t


def _solve_at(log_kernel, g, epsilon, marginals, log_a, log_b, tol, max_iter):
    """Untracked Sinkhorn sweeps on a fixed kernel until the row error < ``tol``.

    Sweeps converge linearly and can crawl when masks saturate. Every
    ``STALL_CHECK`` sweeps, if the error has not at least halved, ``g`` is
    moved to the exact fixed point of the column update before sweeping on.
    """
    violation, it, f, log_plan = math.inf, 0, None, None
    checkpoint = math.inf
    with np.errstate(under="ignore"):
        for it in range(1, max_iter + 1):
            f = epsilon * log_a - epsilon * _lse(log_kernel + g / epsilon, 1)
            g = epsilon * log_b - epsilon * _lse(log_kernel + f[:, None] / epsilon, 0)
            log_plan = f[:, None] / epsilon + log_kernel + g / epsilon
            violation = float(np.max(np.abs(np.exp(log_plan).sum(axis=1) - marginals.a)))
            if violation < tol:
                break
            if it % STALL_CHECK == 0:
                if violation > 0.5 * checkpoint:
                    t = _column_offset(log_kernel, log_a, float(marginals.b[1]))
                    g = np.array([0.0, epsilon * t])
                checkpoint = violation
    return f, g, log_plan, violation, it


def sinkhorn_solve(cost, marginals: MarginalPair, epsilon: float,
                   tol: float = 1e-10, max_iter: int = 100_000,
                   scaling: bool = True) -> SinkhornResult:
    """Entropic OT solved to convergence by log-domain block coordinate ascent.

    Converges when the L-inf violation of the row marginal, measured right
    after a g-update, drops below ``tol``. For ``epsilon < 1`` and
    ``scaling`` on, the potentials are first warm-started by solving at
    ``1, 1/2, 1/4, ...`` down to ``epsilon``: cold starts at small
    temperatures move the potentials very slowly. The solution is the same.
    """
    if not epsilon > 0 or not tol > 0:
        raise ValueError("epsilon and tol must be positive")
    c = np.asarray(dc.value_of(cost), dtype=float)
    n = c.shape[0]
    if marginals.degenerate:
        log_plan = _short_circuit_plan(marginals)
        return SinkhornResult(TransportPlan(log_plan),
                              DualPotentials(np.zeros(n), np.zeros(2)), 0, 0.0, True)
    log_a, log_b = _log_marginals(marginals)
    g = np.zeros(2)
    total = 0
    stage = 1.0
    while scaling and stage > epsilon:
        # warm-up stages only need to land near the right potentials
        _, g, _, _, it = _solve_at(-c / stage, g, stage, marginals, log_a, log_b, 1e-6,
                                   min(max_iter, 2000))
        total += it
        stage /= 2.0
    f, g, log_plan, violation, it = _solve_at(-c / epsilon, g, epsilon, marginals,
                                              log_a, log_b, tol, max_iter)
    plan = TransportPlan(np.maximum(log_plan, LOG_FLOOR))
    return SinkhornResult(plan, DualPotentials(f, g), total + it, violation,
                          violation < tol)


def proximal_step(state: PrunerState, cost, inner_iters: int = 1,
                  tol: Optional[float] = None, target=None) -> PrunerState:
    """One Bregman-proximal Sinkhorn update of the plan.

    The Gibbs kernel is ``exp(-C/eps) * P_prev`` (combined in log space, the
    previous plan detached). ``inner_iters`` f/g sweeps are run on that
    kernel; with ``tol`` set, sweeps continue until the row marginal error
    falls below it (the fully converged proximal point). ``cost`` may be a
    tape node, in which case the returned plan is differentiable in it.

    ``target`` optionally supplies the column marginal as a tape node whose
    value equals ``state.marginals.b``; gradients then also reach it.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    marginals = state.marginals
    c_val = dc.value_of(cost)
    if c_val.shape != (marginals.n, 2):
        raise ValueError(f"cost shape {c_val.shape} does not match n={marginals.n}")
    eps = state.epsilon
    if marginals.degenerate:
        log_plan = _short_circuit_plan(marginals)
        return replace(state, plan=TransportPlan(log_plan), step=state.step + 1)

    # history enters as data; only the current cost is differentiable
    log_prev = np.array(dc.value_of(state.plan.log_mass), dtype=float)
    log_kernel = cost * (-1.0 / eps) + log_prev
    if np.any(np.all(dc.value_of(log_kernel) == -np.inf, axis=0)):
        raise DegenerateKernelError("degenerate kernel")
    log_a, log_b = _log_marginals(marginals)
    if target is not None:
        if not np.array_equal(dc.value_of(target), marginals.b):
            raise ValueError("target marginal disagrees with the state's budget")
        log_b = dc.log(target)
    f, g = _sinkhorn_iterations(log_kernel, np.asarray(state.g, dtype=float),
                                eps, log_a, log_b, inner_iters)
    if tol is not None:
        if dc.is_node(log_kernel) or dc.is_node(log_b):
            for _ in range(100_000):
                if _row_violation(_assemble_plan(log_kernel, f, g, eps), marginals) < tol:
                    break
                f, g = _sinkhorn_iterations(log_kernel, g, eps, log_a, log_b, 1)
        elif _row_violation(_assemble_plan(log_kernel, f, g, eps), marginals) >= tol:
            f, g, _, _, _ = _solve_at(log_kernel, g, eps, marginals, log_a, log_b,
                                      tol, 100_000)
    log_plan = dc.maximum(_assemble_plan(log_kernel, f, g, eps), LOG_FLOOR)
    return replace(
        state,
        plan=TransportPlan(log_plan),
        g=np.array(dc.value_of(g), dtype=float),
        step=state.step + 1,
    )


def mask_hardness(mask) -> float:
    """Mean distance of a mask to its rounding, in ``[0, 0.5]``."""
    m = np.asarray(dc.value_of(mask.values if isinstance(mask, MaskVector) else mask))
    return float(np.mean(np.abs(m - np.round(m))))
