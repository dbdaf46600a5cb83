import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cclis.model import ModelState, encode, prototype_scores, snapshot
from cclis.oracle import kl_objective
from cclis.replay import (
    Pool,
    ReplayBuffer,
    allocate,
    build_proposal_table,
    compute_proposal,
    compute_target_dists,
    read_buffer_snapshot,
    select_buffer,
    uniform_proposal,
    weighted_sample_without_replacement,
    write_buffer_snapshot,
)
from cclis.tasks import AugmentorConfig

from conftest import small_model


def inclusion_by_enumeration(weights, k):
    """Exact inclusion probabilities of successive draws without replacement."""
    w = np.asarray(weights, dtype=float)
    incl = np.zeros(w.size)
    for order in itertools.permutations(range(w.size), k):
        p, left = 1.0, w.sum()
        for i in order:
            p *= w[i] / left
            left -= w[i]
        incl[list(order)] += p
    return incl


def test_compute_proposal_mean():
    np.testing.assert_allclose(compute_proposal([[0.8, 0.2], [0.4, 0.6]]), [0.6, 0.4], atol=1e-15)


def test_identical_targets_give_target():
    d = np.array([0.1, 0.2, 0.7])
    np.testing.assert_allclose(compute_proposal([d, d, d]), d, atol=1e-15)


def test_single_class_falls_back_to_uniform():
    with pytest.warns(UserWarning, match="uniform"):
        g = compute_proposal([], size=4)
    np.testing.assert_allclose(g, 0.25)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_proposal_order_invariant_convex_and_kl_optimal(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 11))
    targets = rng.dirichlet(np.ones(size), size=int(rng.integers(1, 6)))
    g = compute_proposal(list(targets))
    np.testing.assert_allclose(compute_proposal(list(targets[::-1])), g, atol=1e-15)
    assert np.all(targets.min(axis=0) - 1e-15 <= g) and np.all(g <= targets.max(axis=0) + 1e-15)
    assert abs(g.sum() - 1) < 1e-12
    best = kl_objective(targets, g)
    others = rng.dirichlet(np.ones(size), size=1000)
    assert all(best <= kl_objective(targets, o) + 1e-9 for o in others)


def _identity_model(tau=0.5, prototypes=((1.0, 0.0), (0.0, 1.0))):
    eye = np.eye(2)
    zero = np.zeros(2)
    return ModelState([(eye, zero)], [(eye, zero), (eye, zero)], np.array(prototypes, dtype=float), tau)


def test_target_dist_normalization_arithmetic():
    # class 0 samples with exp-scores under prototype 1 in ratio 2:1
    model = _identity_model(tau=1.0)
    frozen = snapshot(model)
    # angles chosen so exp(sin a) / exp(sin b) == 2
    a = np.pi / 2 * 0.6
    b = np.arcsin(np.sin(a) - np.log(2))
    x = np.array([[np.cos(a), np.sin(a)], [np.cos(b), np.sin(b)], [0.0, 1.0]])
    y = np.array([0, 0, 1])
    targets = compute_target_dists(frozen, x, y, aug_passes=1)
    np.testing.assert_allclose(targets[0][1], [2 / 3, 1 / 3], atol=1e-12)


def test_single_pass_identity_matches_raw_scores(rng):
    model = small_model(num_prototypes=3)
    frozen = snapshot(model)
    x = rng.normal(size=(9, 5))
    y = np.array([0, 1, 2] * 3)
    targets = compute_target_dists(frozen, x, y, aug_passes=1, rng=rng, aug=AugmentorConfig())
    s = np.exp(prototype_scores(frozen, encode(frozen, x, safe=True)).data)
    members = np.flatnonzero(y == 2)
    np.testing.assert_allclose(targets[2][0], s[0, members] / s[0, members].sum(), atol=1e-15)


def test_identical_samples_uniform_target(rng):
    frozen = snapshot(small_model(num_prototypes=2))
    x = np.tile(rng.normal(size=(1, 5)), (4, 1))
    targets = compute_target_dists(frozen, x, np.array([0, 0, 0, 1]), aug_passes=1)
    np.testing.assert_allclose(targets[0][1], [1 / 3] * 3, atol=1e-15)


def test_missing_class_errors(rng):
    frozen = snapshot(small_model(num_prototypes=3))
    with pytest.raises(ValueError, match="class 2"):
        compute_target_dists(frozen, rng.normal(size=(2, 5)), np.array([0, 1]), aug_passes=1)


def test_averaging_is_independent_of_pass_order(rng):
    frozen = snapshot(small_model(num_prototypes=2))
    x = rng.normal(size=(6, 5))
    y = np.array([0, 1] * 3)
    aug = AugmentorConfig("gaussian-noise", 0.1)
    a = compute_target_dists(frozen, x, y, 5, np.random.default_rng(8), aug)
    b = compute_target_dists(frozen, x, y, 5, np.random.default_rng(8), aug)
    np.testing.assert_array_equal(a[0][1], b[0][1])


def test_inclusion_frequencies_four_choose_two():
    weights = np.array([0.4, 0.3, 0.2, 0.1])
    exact = inclusion_by_enumeration(weights, 2)
    rng = np.random.default_rng(0)
    counts = np.zeros(4)
    n = 200_000
    for _ in range(n):
        counts[weighted_sample_without_replacement(weights, 2, rng)] += 1
    assert np.max(np.abs(counts / n - exact)) < 0.01


def test_degenerate_weights_pick_heavy_item():
    rng = np.random.default_rng(0)
    picks = [weighted_sample_without_replacement([1.0, 1e-9, 1e-9], 1, rng)[0] for _ in range(2000)]
    assert np.mean(np.array(picks) == 0) > 0.999


def test_zero_weight_never_selected_and_negative_rejected(rng):
    for _ in range(200):
        assert 1 not in weighted_sample_without_replacement([0.5, 0.0, 0.5], 2, rng)
    with pytest.raises(ValueError):
        weighted_sample_without_replacement([0.5, -0.1], 1, rng)


@pytest.mark.parametrize(
    "capacity,sizes,expected",
    [
        (20, {0: 40, 1: 40}, {0: 10, 1: 10}),
        (7, {0: 9, 1: 9, 2: 9}, {0: 3, 1: 2, 2: 2}),
        (10, {0: 2, 1: 20, 2: 20}, {0: 2, 1: 4, 2: 4}),
        (10, {0: 1, 1: 1}, {0: 1, 1: 1}),
    ],
)
def test_allocation_rule(capacity, sizes, expected):
    assert allocate(capacity, sizes) == expected


def test_capacity_below_class_count():
    with pytest.raises(ValueError):
        allocate(1, {0: 3, 1: 3})


def _pool(rng, sizes=(6, 5, 4)):
    y = np.repeat(np.arange(len(sizes)), sizes)
    return Pool(rng.normal(size=(len(y), 5)), y, np.arange(len(y)) + 100, np.ones(len(y), dtype=int))


def test_capacity_equal_pool_keeps_everything(rng):
    pool = _pool(rng)
    buf = select_buffer(pool, uniform_proposal(pool), len(pool), rng)
    assert sorted(buf.ids.tolist()) == sorted(pool.ids.tolist())


def test_select_buffer_deterministic_and_stores_table_values(rng):
    pool = _pool(rng)
    table = build_proposal_table(snapshot(small_model(num_prototypes=3)), pool, aug_passes=1)
    a = select_buffer(pool, table, 6, np.random.default_rng(3))
    b = select_buffer(pool, table, 6, np.random.default_rng(3))
    assert np.array_equal(a.ids, b.ids)
    assert a.per_class_counts == {0: 2, 1: 2, 2: 2}
    g_all = table.probabilities(len(pool))
    rows = {sid: k for k, sid in enumerate(pool.ids)}
    for sid, g in zip(a.ids, a.g):
        assert g == g_all[rows[sid]]
    for members, probs in table.classes.values():
        assert abs(probs.sum() - 1) < 1e-9 and np.all(probs > 0)


def test_hard_negatives_get_more_mass():
    # class 0 spread around 20 degrees, class 1 around 70 degrees; samples of
    # class 0 near 40 degrees lie in the margin towards prototype 1
    deg = np.deg2rad
    protos = ((np.cos(deg(20)), np.sin(deg(20))), (np.cos(deg(70)), np.sin(deg(70))))
    frozen = snapshot(_identity_model(prototypes=protos))
    centre = deg(np.linspace(15, 25, 6))
    margin = deg(np.linspace(36, 44, 4))
    other = deg(np.linspace(65, 75, 5))
    angles = np.concatenate([centre, margin, other])
    x = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.array([0] * 10 + [1] * 5)
    pool = Pool(x, y, np.arange(15), np.ones(15, dtype=int))
    members, g = build_proposal_table(frozen, pool, aug_passes=1).classes[0]
    assert g[6:].mean() > g[:6].mean()


def test_buffer_snapshot_roundtrip(tmp_path):
    buf = ReplayBuffer(np.zeros((2, 3)), np.array([0, 1]), np.array([5, 9]), np.array([1 / 3, 0.1]), np.array([1, 1]), 2)
    write_buffer_snapshot(buf, tmp_path / "b.tsv")
    text = (tmp_path / "b.tsv").read_text()
    assert text.startswith("#")
    entries = read_buffer_snapshot(tmp_path / "b.tsv")
    assert entries == [(5, 0, 1 / 3, 1), (9, 1, 0.1, 1)]
