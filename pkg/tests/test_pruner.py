import math

import numpy as np
import pytest

from dtprune import netlab
from dtprune.ot_core import MarginalPair, PrunerState, TransportPlan
from dtprune.pruner import (
    SGD,
    LRSchedule,
    PruneConfig,
    TrainingAborted,
    derive_architecture,
    finetune,
    hard_masks,
    kept_counts,
    mask_norm_correlation,
    prune_train,
    ratio_to_k,
    sinkhorn_steps_ablation,
    train_plain,
)


@pytest.fixture(scope="module")
def rings():
    return netlab.make_toy_dataset("concentric-rings", 256, seed=0)


def state_from_mask(mask, k, epsilon=1.0):
    """A pruner state whose plan has the given soft mask."""
    mask = np.asarray(mask, dtype=float)
    n = mask.size
    mass = np.stack([(1 - mask) / n, mask / n], axis=1)
    return PrunerState(epsilon, MarginalPair(n, k), TransportPlan.from_mass(mass),
                       np.ones(2), 1)


# --- small pieces -----------------------------------------------------------


@pytest.mark.parametrize("ratio,n,k", [(0.5, 10, 5), (0.9, 3, 0), (0.0, 7, 7), (1.0, 4, 0),
                                       (0.25, 2, 1), (0.75, 2, 0)])
def test_ratio_to_k(ratio, n, k):
    assert ratio_to_k(ratio, n) == k


def test_ratio_to_k_rejects_out_of_range():
    with pytest.raises(ValueError):
        ratio_to_k(1.5, 3)


def test_cosine_schedule_midpoint():
    sched = LRSchedule("cosine", 0.1, 100)
    assert sched(0) == pytest.approx(0.1)
    assert sched(50) == pytest.approx(0.05)


def test_multistep_schedule():
    sched = LRSchedule("multistep", 0.1, 100, milestones=[10, 20], factors=[0.1, 0.5])
    assert [sched(9), sched(10), sched(25)] == pytest.approx([0.1, 0.01, 0.005])


def test_sgd_momentum_by_hand():
    opt = SGD(momentum=0.5, weight_decay=0.1)
    p = np.array([1.0])
    p1 = opt.update("p", p, np.array([2.0]), lr=0.1)  # buf = 2.1
    assert p1 == pytest.approx([1.0 - 0.21])
    p2 = opt.update("p", p1, np.array([0.0]), lr=0.1)  # buf = 1.05 + 0.079
    assert p2 == pytest.approx(p1 - 0.1 * (0.5 * 2.1 + 0.1 * p1))


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(ratio=1.2)
    with pytest.raises(ValueError):
        PruneConfig(prune_steps=0)
    with pytest.raises(ValueError):
        PruneConfig(epsilon=0.0)


# --- the training loop ----------------------------------------------------------------


def test_keep_all_pins_masks_and_matches_plain_sgd(rings):
    net = netlab.mlp([2, 8, 8, 2], seed=3, mode="structured")
    cfg = PruneConfig(ratio=0.0, prune_steps=50, seed=4, weight_decay=5e-4)
    trained, states, metrics = prune_train(net, rings, cfg)
    assert max(metrics.series("hardness")) <= 1e-6
    plain = train_plain(net, rings, 50, LRSchedule("cosine", 0.1, 50), SGD(0.9, 5e-4), seed=4)
    for a, b in zip(trained.layers, plain.layers):
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-6)


def test_metrics_records(rings):
    net = netlab.mlp([2, 8, 8, 2], seed=0)
    cfg = PruneConfig(prune_steps=20, snapshot_every=10)
    _, _, metrics = prune_train(net, rings, cfg)
    steps = metrics.series("step")
    assert steps == list(range(1, 21))
    assert all(0 <= h <= 0.5 for h in metrics.series("hardness"))
    snaps = [r for r in metrics.records if "masks" in r]
    assert [r["step"] for r in snaps] == [10, 20]
    assert len(snaps[0]["masks"]["1"]) == 8


def test_prune_train_is_deterministic(rings):
    net = netlab.mlp([2, 8, 8, 2], seed=0)
    cfg = PruneConfig(prune_steps=40, seed=7)
    a = prune_train(net, rings, cfg)[2].dumps()
    b = prune_train(net, rings, cfg)[2].dumps()
    assert a.encode() == b.encode()


def test_nan_aborts_with_step(rings):
    net = netlab.mlp([2, 8, 8, 2], seed=0)
    cfg = PruneConfig(prune_steps=200, lr=1e12)
    with pytest.raises(TrainingAborted) as info:
        prune_train(net, rings, cfg)
    assert 1 <= info.value.step <= 200


# --- derivation ------------------------------------------------------------------------------


def test_top_k_derivation_example():
    net = netlab.mlp([2, 3, 2], seed=0, mode="structured", mask_first=True)
    states = [state_from_mask([0.99, 0.01, 0.98], 2)]
    np.testing.assert_array_equal(hard_masks(net, states)[0], [1, 0, 1])
    pruned = derive_architecture(net, states)
    np.testing.assert_array_equal(pruned.layers[0].weights, net.layers[0].weights[[0, 2]])
    np.testing.assert_array_equal(pruned.layers[1].weights, net.layers[1].weights[:, [0, 2]])


def test_ties_keep_higher_index():
    net = netlab.mlp([2, 4, 2], seed=0, mode="structured", mask_first=True)
    states = [state_from_mask([0.5, 0.5, 0.5, 0.5], 2)]
    np.testing.assert_array_equal(hard_masks(net, states)[0], [0, 0, 1, 1])


def parameter_formula(sizes):
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


@pytest.mark.parametrize("sizes,ratios", [
    ([2, 8, 8, 2], [0.5, 0.25]),
    ([3, 5, 7, 4, 2], [0.2, 0.6, 0.4]),
    ([2, 6, 3], [0.5]),
])
def test_exact_sparsity_and_parameter_count(sizes, ratios):
    rng = np.random.default_rng(len(sizes))
    net = netlab.mlp(sizes, seed=1, mode="structured", mask_first=True)
    states = []
    for layer, ratio in zip(net.sites, ratios):
        n = net.layers[layer].site_size
        states.append(state_from_mask(rng.uniform(size=n), ratio_to_k(ratio, n)))
    pruned = derive_architecture(net, states)
    kept = [st.marginals.k for st in states]
    assert [pruned.layers[l].n_out for l in net.sites] == kept
    assert pruned.parameter_count() == parameter_formula([sizes[0], *kept, sizes[-1]])
    x = rng.normal(size=(9, sizes[0]))
    np.testing.assert_allclose(netlab.forward_masked(pruned, x),
                               netlab.forward_masked(net, x, hard_masks(net, states)),
                               atol=1e-10, rtol=0)


def test_exact_hard_mask_gives_bitwise_logits(rings):
    net = netlab.mlp([2, 8, 8, 2], seed=2)
    states = [state_from_mask([1, 0, 1, 1, 0, 0, 1, 0], 4)]
    pruned = derive_architecture(net, states)
    masked = netlab.forward_masked(net, rings.features, hard_masks(net, states))
    assert netlab.forward_masked(pruned, rings.features).tobytes() == masked.tobytes()


GRID = [
    dict(mode="structured", scope="layer", ratio=0.5),
    dict(mode="structured", scope="layer", ratio=[0.3, 0.7, 0.5]),
    dict(mode="structured", scope="global", ratio=0.6),
    dict(mode="unstructured", scope="layer", ratio=0.8),
    dict(mode="unstructured", scope="global", ratio=0.5),
]


@pytest.mark.parametrize("params", GRID, ids=lambda p: f"{p['mode']}-{p['scope']}-{p['ratio']}")
def test_trained_derivation_is_exactly_k(rings, params):
    net = netlab.mlp([2, 10, 9, 7, 2], seed=5, mode=params["mode"], mask_first=True)
    cfg = PruneConfig(prune_steps=30, **params)
    trained, states, _ = prune_train(net, rings, cfg)
    counts = kept_counts(trained, states, cfg.scope)
    if cfg.scope == "layer":
        for pos, layer in enumerate(trained.sites):
            n = trained.layers[layer].site_size
            assert counts[layer] == ratio_to_k(cfg.site_ratio(pos), n)
    else:
        total = sum(trained.layers[l].site_size for l in trained.sites)
        assert sum(counts.values()) == ratio_to_k(cfg.ratio, total)
    pruned = derive_architecture(trained, states, cfg.scope)
    if cfg.mode == "structured":
        assert [pruned.layers[l].n_out for l in trained.sites] == [counts[l] for l in trained.sites]
    else:
        for l in trained.sites:
            assert int(np.count_nonzero(pruned.layers[l].fixed_mask)) == counts[l]


def test_unstructured_finetune_keeps_zeros(rings):
    net = netlab.mlp([2, 6, 2], seed=0, mode="unstructured", mask_first=True)
    cfg = PruneConfig(mode="unstructured", ratio=0.5, prune_steps=30, finetune_steps=30)
    trained, states, _ = prune_train(net, rings, cfg)
    tuned = finetune(derive_architecture(trained, states), rings, cfg)
    fixed = tuned.layers[0].fixed_mask
    assert np.all(tuned.layers[0].weights[fixed == 0] == 0)
    assert np.count_nonzero(fixed) == 6


def test_zero_finetune_steps_is_identity(rings):
    net = netlab.mlp([2, 4, 2], seed=0)
    assert finetune(net, rings, PruneConfig(finetune_steps=0)) is net


def test_mask_norm_correlation_by_hand():
    net = netlab.mlp([2, 3, 2], seed=0, mode="structured", mask_first=True)
    net.layers[0].weights = np.array([[3.0, 4.0], [0.0, 1.0], [6.0, 8.0]])
    states = [state_from_mask([0.5, 0.0, 1.0], 1)]
    m, norms = np.array([0.5, 0.0, 1.0]), np.array([5.0, 1.0, 10.0])
    mc, nc = m - m.mean(), norms - norms.mean()
    expected = (mc @ nc) / math.sqrt((mc @ mc) * (nc @ nc))
    assert mask_norm_correlation(net, states) == pytest.approx(expected, abs=1e-12)


# --- ablation ------------------------------------------------------------------------


def test_single_inner_iteration_equals_prune_train_bitwise(rings):
    build = lambda seed: netlab.mlp([2, 8, 8, 2], seed=seed)
    cfg = PruneConfig(prune_steps=40, finetune_steps=10)
    rows = sinkhorn_steps_ablation(build, rings, cfg, [1], seeds=(0,))
    trained, states, _ = prune_train(build(0), rings, PruneConfig(prune_steps=40,
                                                                  finetune_steps=10, seed=0))
    tuned = finetune(derive_architecture(trained, states), rings, cfg)
    assert rows[0].accuracies == [netlab.accuracy(tuned, rings)]


def test_ablation_rows_sorted_and_time_grows(rings):
    build = lambda seed: netlab.mlp([2, 16, 16, 2], seed=seed)
    cfg = PruneConfig(prune_steps=300)
    rows = sinkhorn_steps_ablation(build, rings, cfg, [10, 1], seeds=(0, 1, 2))
    assert [r.inner_iters for r in rows] == [1, 10]
    assert rows[1].ot_seconds > rows[0].ot_seconds
