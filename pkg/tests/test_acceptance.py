"""Acceptance suite: one PASS/FAIL line per criterion, at the agreed tolerances.

Criteria 1-4 and 9 are fast property checks. Criteria 5-7 share the desk-scale
runs in ``desk_runs`` (three seeds on the toy benchmark, about 15-20 minutes in
total). Criterion 8 runs the command line twice.
"""

import csv
import time

import numpy as np
import pytest

import desk_runs as D
import test_gradcheck as G
from chandnas import cli
from chandnas import search as S
from chandnas import tensor as T
from chandnas.cost import exact_counts
from chandnas.data import normalize, toy_images
from chandnas.loss import compute_lambda
from chandnas.model import build_seed, materialize
from chandnas.pareto import CSV_COLUMNS
from chandnas.search import RunLog, evaluate, finetune, warmup
from oracles import brute_force_counts, random_model
from test_search import TINY, _Spy, _cfg


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    kinds = T.op_kinds()
    for kind in kinds:
        G.test_op_gradients_match_finite_differences(kind)
    G.test_masked_forward_gradients()
    G.test_cost_gradients(0)
    G.test_cost_gradients(1)
    G.test_composite_loss_gradients()
    elapsed = time.perf_counter() - t0
    n = G.TRIALS * (len(kinds) + 4)
    verdict(capsys, 1, elapsed < 120,
            f"{len(kinds)} op kinds + masked forward, size, ops, composite; {G.TRIALS} instances each "
            f"({n} total) within rel 1e-4 in {elapsed:.1f}s (limit 120s)")


def test_criterion_2_cost_oracle(capsys):
    rng = np.random.default_rng(99)
    failures = 0
    for _ in range(200):
        model = random_model(rng)
        x = rng.normal(size=(1,) + model.spec.input_shape)
        rep = exact_counts(model)
        failures += (rep.total_params, rep.total_ops) != brute_force_counts(materialize(model), x)
    verdict(capsys, 2, failures == 0, f"200 random networks, {failures} count mismatches against brute force")


def test_criterion_3_mask_equivalence(capsys):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        model = random_model(rng)
        x = rng.normal(size=(3,) + model.spec.input_shape)
        small = materialize(model)
        model.eval()
        small.eval()
        worst = max(worst, float(np.abs(model.forward(x).data - small.forward(x).data).max()))
    verdict(capsys, 3, worst <= 1e-10, f"50 triples, max |masked - shrunk| = {worst:.2e} (limit 1e-10)")


@pytest.mark.slow
def test_criterion_4_lambda_closed_form(capsys):
    rng = np.random.default_rng(4)
    exact, worst_ulps = True, 0.0
    cases = [(float(rng.uniform(1e-4, 5)), int(rng.integers(100, 10**6)), float(rng.uniform(0.05, 0.95)))
             for _ in range(1000)]
    cases += [(D.seed_runs(s).seed_loss, D.seed_runs(s).seed_size, f) for s in D.SEEDS for f in D.TARGETS]
    for loss, size, frac in cases:
        s_star = frac * size
        lam = compute_lambda(loss, size, s_star)
        exact &= lam == loss / abs(size - s_star)
        worst_ulps = max(worst_ulps, abs(lam * abs(size - s_star) - loss) / np.spacing(loss))
    verdict(capsys, 4, exact and worst_ulps <= 1.0,
            f"lambda = L/|S - s*| bit-exact on {len(cases)} cases (9 from real warmups); "
            f"max |lambda*|S - s*| - L| = {worst_ulps:.1f} ulp (limit 1)")


@pytest.mark.slow
def test_criterion_5_constraint_satisfaction(capsys):
    lines, ok = [], True
    for frac in D.TARGETS:
        errs = []
        for seed in D.SEEDS:
            r = D.seed_runs(seed)
            s_star = frac * r.seed_size
            errs.append((r.sizes[frac] - s_star) / s_star)
        hits = sum(abs(e) <= 0.05 for e in errs)
        ok &= hits >= 2
        lines.append(f"s*={frac:.0%}: {hits}/3 within 5% (errors {', '.join(f'{e:+.1%}' for e in errs)})")
    seconds = sum(D.seed_runs(s).seconds for s in D.SEEDS)
    ok &= seconds <= 1800
    verdict(capsys, 5, ok, "; ".join(lines) + f"; all desk runs took {seconds / 60:.1f} min (limit 30)")


@pytest.mark.slow
def test_criterion_6_tradeoff(capsys):
    parts, wins = [], 0
    for seed in D.SEEDS:
        base, big = D.largest_admissible(D.seed_runs(seed).sweep)
        cut = 1 - big.ops / base.ops
        drop = base.val_accuracy - big.val_accuracy
        good = big is not base and cut >= 0.20 and drop <= 0.05
        wins += good
        parts.append(f"seed {seed}: mu={big.mu:.3g} ops -{cut:.1%}, val acc drop {drop:+.3f} "
                     f"(test {base.test_accuracy - big.test_accuracy:+.3f})")
    verdict(capsys, 6, wins >= 2, f"{wins}/3 seeds with >=20% fewer OPs at <=5% drop; " + "; ".join(parts))


@pytest.mark.slow
def test_criterion_7_structure(capsys):
    parts, wins = [], 0
    for seed in D.SEEDS:
        base, big = D.largest_admissible(D.seed_runs(seed).sweep)
        fb, fl = D.pre_stride_fraction(base), D.pre_stride_fraction(big)
        wins += fl < fb
        parts.append(f"seed {seed}: {fb:.3f} -> {fl:.3f}")
    verdict(capsys, 7, wins >= 2, f"pre-first-stride live fraction lower at large mu on {wins}/3 seeds; "
            + "; ".join(parts))


def test_criterion_8_determinism(capsys, tmp_path):
    args = ["search", "--spec", "zoo:toy6", "--data", "toy_images", "--seed", "3", "--target-frac", "0.5",
            "--mu", "1e-9", "--epochs-warmup", "2", "--max-search-epochs", "3", "--epochs-finetune", "1",
            "--patience", "2"]
    texts = []
    for name in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
        texts.append((tmp_path / name / "pareto.csv").read_text())
    rows = [list(csv.DictReader(t.splitlines())) for t in texts]
    numeric = [c for c in CSV_COLUMNS if c != "run_id"]
    same = len(rows[0]) == len(rows[1]) > 0 and all(
        ra[c] == rb[c] for ra, rb in zip(*rows) for c in numeric)
    verdict(capsys, 8, same and texts[0] == texts[1],
            f"two identical CLI runs, pareto.csv numeric fields {'identical' if same else 'differ'} "
            f"({', '.join(numeric)})")


def test_criterion_9_phase_contracts(capsys, monkeypatch):
    train, _ = normalize(*toy_images(0, n_train=240, n_test=80, shape=(3, 8, 8), num_classes=4, noise=1.0))
    fit, val = S.split_validation(train, 0.1, 0)

    model = build_seed(TINY, 0)
    spy = _Spy(model)
    spy.install(monkeypatch)
    warmup(model, fit, _cfg())
    warm_clean = bool(spy.seen) and all(rg is False and g is None for step in spy.seen for rg, g in step)

    rng = np.random.default_rng(1)
    for m in model.masks.values():
        m.theta.data[:] = rng.uniform(-1, 1, len(m))
    before = {g: m.theta.data.tobytes() for g, m in model.masks.items()}
    spy.seen.clear()
    finetune(model, fit, _cfg())
    ft_clean = bool(spy.seen) and all(rg is False and g is None for step in spy.seen for rg, g in step)
    frozen = {g: m.theta.data.tobytes() for g, m in model.masks.items()} == before
    monkeypatch.undo()

    model = build_seed(TINY, 0)
    warmup(model, fit, _cfg())
    log = RunLog(None)
    with pytest.warns(UserWarning):
        outcome, _ = S.search(model, fit, val, _cfg(max_search_epochs=8, patience=1, lr_w=0.05),
                              lam=0.0, mu=1e-9, s_star=100.0, run_log=log)
    losses = [r["val_loss"] for r in log.records]
    restored = (outcome.best_val_loss == min(losses) and evaluate(model, val)[0] == outcome.best_val_loss
                and outcome.best_val_loss <= outcome.last_val_loss)
    ok = warm_clean and ft_clean and frozen and restored
    verdict(capsys, 9, ok, f"no theta grads in warmup={warm_clean}, fine-tune={ft_clean}; "
            f"theta bitwise frozen across fine-tune={frozen}; early stop restored best snapshot={restored} "
            f"(best epoch {outcome.best_epoch} of {outcome.epochs})")
