"""Outcome checks on the shared desk runs that are expectations rather than acceptance criteria."""

import pytest

import desk_runs as D

pytestmark = pytest.mark.slow


def test_finetune_does_not_lose_accuracy_on_most_runs():
    pairs = [(r.post_search_acc[f], r.final_acc[f]) for r in map(D.seed_runs, D.SEEDS)
             for f in D.TARGETS if r.post_search_acc.get(f) is not None]
    held = sum(after >= before for before, after in pairs)
    assert held >= 0.8 * len(pairs), pairs


def test_unregularized_point_is_most_accurate_in_front():
    best = 0
    for seed in D.SEEDS:
        done = [p for p in D.seed_runs(seed).sweep if p.completed]
        base = next(p for p in done if p.mu == 0.0)
        best += all(base.val_accuracy >= p.val_accuracy for p in done)
    assert best >= 0.8 * len(D.SEEDS), f"mu=0 most accurate on {best}/{len(D.SEEDS)} seeds"


def test_sweep_points_shrink_ops_with_mu():
    for seed in D.SEEDS:
        done = sorted((p for p in D.seed_runs(seed).sweep if p.completed), key=lambda p: p.mu)
        assert done[-1].ops <= done[0].ops
