import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtprune import diffcalc as dc
from dtprune import netlab
from dtprune.budget import (
    ArchDescriptor,
    BudgetSpec,
    budget_penalty,
    budget_prune_train,
    flops_fraction,
    full_ratios,
)
from dtprune.pruner import PruneConfig, derive_architecture, prune_train


def flops_by_loops(ratios, arch):
    """Plain-Python evaluation of the masked/dense FLOPs ratio."""
    num = den = 0.0
    prev = 1.0
    for j, alpha in enumerate(ratios):
        k, n_in, n_out, a = (arch.kernel_areas[j], arch.channels[j], arch.channels[j + 1],
                             arch.feature_areas[j])
        num += (k * n_in * prev + 1) * n_out * alpha * a
        den += (k * n_in + 1) * n_out * a
        prev = alpha
    return num / den


archs = st.integers(1, 4).flatmap(lambda n: st.builds(
    ArchDescriptor,
    st.lists(st.integers(1, 9), min_size=n, max_size=n),
    st.lists(st.integers(1, 64), min_size=n + 1, max_size=n + 1),
    st.lists(st.integers(1, 32), min_size=n, max_size=n),
))


def test_single_layer_example():
    arch = ArchDescriptor([1], [2, 4], [1])
    assert flops_fraction(np.array([0.5]), arch) == pytest.approx(6 / 12, abs=1e-15)
    assert flops_by_loops([0.5], arch) == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(archs)
def test_all_ones_is_exactly_one(arch):
    assert flops_fraction(np.ones(arch.n_layers), arch) == 1.0


@settings(max_examples=200, deadline=None)
@given(archs, st.data())
def test_matches_loop_evaluation(arch, data):
    ratios = np.array(data.draw(st.lists(st.floats(0.01, 1.0), min_size=arch.n_layers,
                                         max_size=arch.n_layers)))
    assert flops_fraction(ratios, arch) == pytest.approx(flops_by_loops(ratios, arch),
                                                         rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(archs, st.data())
def test_monotone_in_each_ratio(arch, data):
    n = arch.n_layers
    ratios = np.array(data.draw(st.lists(st.floats(0.01, 0.9), min_size=n, max_size=n)))
    j = data.draw(st.integers(0, n - 1))
    bump = data.draw(st.floats(1e-3, 0.1))
    up = ratios.copy()
    up[j] += bump
    assert flops_fraction(up, arch) >= flops_fraction(ratios, arch)


def test_vanishing_ratios():
    arch = ArchDescriptor([9, 9, 1], [3, 16, 32, 10], [64, 16, 1])
    values = [flops_fraction(np.full(3, r), arch) for r in (1e-1, 1e-3, 1e-6)]
    assert values[0] > values[1] > values[2] > 0
    assert values[2] < 1e-5


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchDescriptor([1, 1], [2, 3], [1, 1])
    with pytest.raises(ValueError):
        ArchDescriptor([1], [2, 0], [1])
    with pytest.raises(ValueError):
        BudgetSpec(0.0)
    with pytest.raises(ValueError):
        BudgetSpec(0.5, penalty=0.0)


def test_penalty_examples():
    arch = ArchDescriptor([1], [2, 4], [1])
    assert budget_penalty(np.array([0.5]), arch, BudgetSpec(0.5)) == 0.0
    assert budget_penalty(np.array([0.6]), arch, BudgetSpec(0.5, 1.0)) == pytest.approx(0.01)


@pytest.mark.parametrize("seed", range(5))
def test_penalty_gradient_in_theta(seed):
    rng = np.random.default_rng(seed)
    arch = ArchDescriptor([3, 1, 1], [2, 8, 6, 3], [4, 2, 1])
    spec = BudgetSpec(0.4, 100.0)
    sites = [0, 1]
    penalty = lambda theta: budget_penalty(full_ratios(dc.sigmoid(theta), sites, 3), arch, spec)
    theta0 = rng.normal(size=2)
    tape = dc.Tape()
    theta = tape.variable(theta0)
    grad = tape.backward(penalty(theta))[theta]
    fd = dc.finite_difference_gradient(lambda p: float(penalty(p["t"])), {"t": theta0},
                                       h=1e-6)["t"]
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-5


def test_full_ratios_fixes_unmasked_layers():
    out = full_ratios(np.array([0.2, 0.7]), [1, 3], 4)
    np.testing.assert_array_equal(out, [1.0, 0.2, 1.0, 0.7])


# --- training -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def rings():
    return netlab.make_toy_dataset("concentric-rings", 512, seed=0)


def budget_net():
    return netlab.mlp([2, 16, 16, 16, 2], seed=0, mode="structured", mask_first=True)


def test_budget_run_tracks_target(rings):
    cfg = PruneConfig(ratio=0.5, prune_steps=600)
    res = budget_prune_train(budget_net(), rings, cfg, BudgetSpec(0.5, 100.0))
    assert abs(res.flops() - 0.5) < 0.02
    # recorded keep counts follow the learned ratios
    last = res.metrics.records[-1]
    assert last["k"] == [st.marginals.k for st in res.states]
    assert np.all(np.diff(res.metrics.series("step")) == 1)


def test_budget_run_columns_follow_targets(rings):
    cfg = PruneConfig(ratio=0.5, prune_steps=50)
    res = budget_prune_train(budget_net(), rings, cfg, BudgetSpec(0.3))
    for st in res.states:
        mass = st.plan.mass
        np.testing.assert_allclose(mass.sum(axis=0), st.marginals.b, atol=1e-9)


def test_full_budget_prunes_at_most_one_unit(rings):
    cfg = PruneConfig(ratio=0.5, prune_steps=1000)
    res = budget_prune_train(budget_net(), rings, cfg, BudgetSpec(1.0, 100.0))
    pruned = derive_architecture(res.net, res.states)
    for layer in res.site_layers:
        assert res.net.layers[layer].site_size - pruned.layers[layer].n_out <= 1


def test_budget_requires_structured_layer_scope(rings):
    with pytest.raises(ValueError):
        budget_prune_train(netlab.mlp([2, 4, 2], mode="unstructured"), rings,
                           PruneConfig(mode="unstructured"), BudgetSpec(0.5))


def uniform_ratio_for(flops, site_layers, arch):
    """Shared kept ratio whose FLOPs fraction equals ``flops`` (bisection)."""
    lo, hi = 1e-6, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        ratios = full_ratios(np.full(len(site_layers), mid), site_layers, arch.n_layers)
        if flops_fraction(ratios, arch) < flops:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_learned_allocation_beats_uniform_ratio(rings):
    """Median over 3 seeds of the final training loss (mean of the last 10% of steps)."""
    tail = lambda metrics: float(np.mean(metrics.series("loss")[-100:]))
    learned, uniform = [], []
    for seed in (0, 1, 2):
        net = netlab.mlp([2, 16, 16, 16, 2], seed=seed, mode="structured", mask_first=True)
        cfg = PruneConfig(ratio=0.5, prune_steps=1000, seed=seed)
        res = budget_prune_train(net, rings, cfg, BudgetSpec(0.5, 100.0))
        alpha = uniform_ratio_for(res.realized_flops(), res.site_layers, res.arch)
        _, _, metrics = prune_train(net, rings, PruneConfig(ratio=1 - alpha, prune_steps=1000,
                                                            seed=seed))
        learned.append(tail(res.metrics))
        uniform.append(tail(metrics))
    assert np.median(uniform) >= np.median(learned)
