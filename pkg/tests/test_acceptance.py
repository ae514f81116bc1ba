"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3 tests/test_acceptance.py``).
"""

import hashlib
import json
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mozart import nn
from mozart.cli import main
from mozart.data import SampleRecord, bayes_accuracy, bayes_log_odds, stratified_split, subdivide_validation
from mozart.imageprep import IDENTITY_AUGMENT, SCALE_TO_PLUS_MINUS_ONE, affine_transform, augment, preprocess
from mozart.metrics import MetricSet, comparison_report, compute_metrics, confusion, parse_report
from mozart.optim import PlateauState, plateau_update
from mozart.stacker import MOZART2, assemble_meta_dataset, run_mozart
from scenarios import scripted_checkpoint_run, synthetic_setup


def report(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------------

SEEDS = range(20)


def _gradient_case(kind, seed):
    gen = np.random.default_rng(seed)
    if kind == "meta":
        net = nn.make_meta_network(3, seed)
        x = gen.uniform(size=(8, 3))
    else:
        net = nn.make_head_network(2, seed)
        x = gen.normal(size=(4, 2))
    y = (gen.random((x.shape[0], 1)) < 0.5).astype(float)
    y[0, 0], y[-1, 0] = 1.0, 0.0
    # dropout masks drawn once and frozen for every perturbed evaluation
    return nn.finite_diff_check(net, x, y, epsilon=1e-5, mode=nn.Mode.TRAIN, rng=gen, details=True)


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    failures = []
    worst = {"meta": 0.0, "head": 0.0}
    for kind, tol in (("meta", 1e-4), ("head", 1e-3)):
        for seed in SEEDS:
            err, details = _gradient_case(kind, seed)
            worst[kind] = max(worst[kind], err)
            if err > tol:
                name, (e, idx, a, n) = max(details.items(), key=lambda kv: kv[1][0])
                failures.append(f"{kind} seed {seed}: {name}[{idx}] rel {e:.2e} (analytic {a:.3e}, numeric {n:.3e})")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30.0
    detail = (f"max rel error meta {worst['meta']:.2e} (tol 1e-4), head/train-BN {worst['head']:.2e} (tol 1e-3), "
              f"{elapsed:.1f}s")
    if failures:
        detail += f"; {len(failures)} failing cases, e.g. " + " | ".join(failures[:3])
    report(1, "gradient correctness", ok, detail)


# 2 -------------------------------------------------------------------------------------

def _naive(labels, probs, t):
    tp = tn = fp = fn = 0
    for y, p in zip(labels, probs):
        pos = p >= t
        tp += pos and y == 1
        fp += pos and y == 0
        fn += (not pos) and y == 1
        tn += (not pos) and y == 0
    return tp, tn, fp, fn


def test_criterion_2_metric_oracle():
    gen = np.random.default_rng(2)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(gen.integers(1, 200))
        labels = gen.integers(0, 2, n).tolist()
        probs = np.round(gen.random(n), int(gen.integers(1, 4))).tolist()  # rounding puts mass on the threshold
        t = float(gen.choice([0.5, gen.uniform(0.05, 0.95)]))
        cm = confusion(labels, probs, t)
        tp, tn, fp, fn = _naive(labels, probs, t)
        m = compute_metrics(cm)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        if (cm.tp, cm.tn, cm.fp, cm.fn) != (tp, tn, fp, fn) or max(
                abs(m.accuracy - (tp + tn) / n), abs(m.precision - prec), abs(m.recall - rec), abs(m.f1 - f1)) > 1e-12:
            mismatches += 1
    elapsed = time.perf_counter() - start
    report(2, "metric oracle", mismatches == 0 and elapsed < 5.0,
           f"{mismatches} mismatches over 1000 random sets, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------------------

TABLE_PR = {"Inception": (0.9847, 0.9695, 0.9978), "Xception": (0.9529, 0.9196, 0.9947),
            "ResNet": (0.9612, 0.9949, 0.9765), "MOZART1": (0.9917, 1.0, 0.9834),
            "MOZART2": (0.9917, 0.9972, 0.9861)}
TABLE_F1 = {"Inception": 98.34, "Xception": 95.57, "ResNet": 98.56, "MOZART1": 99.16, "MOZART2": 99.16}


def test_criterion_3_reference_f1_arithmetic():
    named = [(k, MetricSet.from_precision_recall(*v)) for k, v in TABLE_PR.items()]
    exact = {k: 100 * m.f1 for k, m in named}
    printed = {k: v["F1 Score"] for k, v in parse_report(comparison_report(named)).items()}
    gaps = {k: max(abs(exact[k] - TABLE_F1[k]), abs(printed[k] - TABLE_F1[k])) for k in TABLE_F1}
    report(3, "reference-table F1 arithmetic", max(gaps.values()) <= 0.01,
           ", ".join(f"{k} {exact[k]:.4f}" for k in TABLE_F1) + f" (max gap {max(gaps.values()):.4f} pp)")


# 4 -------------------------------------------------------------------------------------

def test_criterion_4_scheduler():
    losses = [0.70, 0.60, 0.50, 0.45] + [0.46, 0.45, 0.47, 0.455, 0.48, 0.45] + [0.46] * 10
    state = PlateauState(1e-4, patience=5, factor=0.2, min_lr=1e-7)
    lrs = []
    for loss in losses:
        state = plateau_update(state, loss)
        lrs.append(state.current_lr)
    first_cut = next(i for i, lr in enumerate(lrs) if lr < 1e-4)
    non_improving = first_cut - 3  # epochs after the last improvement (index 3) up to the cut
    monotone = all(b <= a for a, b in zip(lrs, lrs[1:]))
    ok = math.isclose(lrs[first_cut], 2e-5, rel_tol=1e-12) and non_improving == 6 and monotone
    report(4, "plateau scheduler", ok,
           f"lr 1e-4 -> {lrs[first_cut]:.1e} after {non_improving} non-improving epochs (patience 5), "
           f"non-increasing={monotone}, final {lrs[-1]:.1e}")


# 5 -------------------------------------------------------------------------------------

def test_criterion_5_checkpoint():
    best, history, snaps, (xv, yv) = scripted_checkpoint_run()
    losses = history.column("val_loss")
    argmin = int(np.argmin(losses)) + 1
    same = nn.dumps_network(best) == nn.dumps_network(snaps[16])
    gap = abs(nn.evaluate_loss(best, xv, yv) - losses[15])
    report(5, "checkpoint on best", argmin == 16 and len(losses) == 20 and same and gap <= 1e-12,
           f"val-loss minimum at epoch {argmin} of {len(losses)}, returned weights == epoch-16 snapshot: {same}, "
           f"re-evaluated loss gap {gap:.1e}")


# 6 -------------------------------------------------------------------------------------

def test_criterion_6_split_arithmetic():
    start = time.perf_counter()
    recs = [SampleRecord(f"s{k}", k % 2) for k in range(7232)]
    labels = {r.id: r.label for r in recs}
    split = stratified_split(recs, (0.7, 0.2, 0.1), seed=0)
    skew = max(abs(sum(labels[i] for i in part) * 2 - len(part))
               for part in (split.train, split.validation, split.test))
    mt, mv = subdivide_validation(split.validation, labels, seed=0)
    ok = split.sizes() == (5062, 1446, 724) and skew <= 1 and (len(mt), len(mv)) == (1156, 290)
    detail = f"sizes {split.sizes()}, per-class skew {skew}, subdivision {len(mt)}/{len(mv)}"

    gen = np.random.default_rng(6)
    bad = 0
    for trial in range(500):
        n0, n1 = (int(v) for v in gen.integers(3, 300, 2))
        reg = [SampleRecord(f"t{trial}_{k}", int(k >= n0)) for k in range(n0 + n1)]
        gen.shuffle(reg)
        s = stratified_split(reg, (0.7, 0.2, 0.1), seed=int(gen.integers(2**31)))
        parts = [set(s.train), set(s.validation), set(s.test)]
        disjoint = sum(map(len, parts)) == len(set().union(*parts))
        exhaustive = set().union(*parts) == {r.id for r in reg}
        lab = {r.id: r.label for r in reg}
        strat = all(abs(sum(1 for i in part if lab[i] == c) - Fraction(repr(r)) * n) < (2 if j == 2 else 1)
                    for c, n in ((0, n0), (1, n1))
                    for j, (part, r) in enumerate(zip(parts, (0.7, 0.2, 0.1))))
        bad += not (disjoint and exhaustive and strat)
    elapsed = time.perf_counter() - start
    report(6, "split arithmetic", ok and bad == 0 and elapsed < 5.0,
           f"{detail}; {bad}/500 random registries violate partition/stratification, {elapsed:.2f}s")


# 7 -------------------------------------------------------------------------------------

def test_criterion_7_stacking_gain():
    start = time.perf_counter()
    cfg, table, split = synthetic_setup()
    run = run_mozart(MOZART2, table, split)
    _, _, test = assemble_meta_dataset(table, split, MOZART2.seed)
    meta = run.metrics["test"].accuracy
    best_base = max(m.accuracy for m in run.base_metrics.values())
    bayes_test = float(np.mean((bayes_log_odds(cfg, test.features) >= 0) == (test.labels[:, 0] == 1)))
    bayes_pop = bayes_accuracy(cfg)
    elapsed = time.perf_counter() - start
    ok = meta >= best_base - 0.005 and abs(meta - bayes_test) <= 0.02 and abs(meta - bayes_pop) <= 0.02 \
        and elapsed < 120.0
    bases = ", ".join(f"{k} {m.accuracy:.4f}" for k, m in run.base_metrics.items())
    report(7, "stacking gain on synthetic data", ok,
           f"meta {meta:.4f} vs bases [{bases}]; Bayes combiner {bayes_test:.4f} on the same test ids, "
           f"{bayes_pop:.4f} in closed form; {elapsed:.1f}s")


# 8 -------------------------------------------------------------------------------------

def _digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _run_all_commands(root):
    root.mkdir()
    synth = {"n_samples": 3000, "target_accuracies": [0.95, 0.96, 0.97], "correlation": 0.5, "seed": 8}
    (root / "synth.json").write_text(json.dumps(synth))
    codes = [main(["simulate", "--config", str(root / "synth.json"), "--out", str(root / "pred.csv")])]
    lines = (root / "pred.csv").read_text().splitlines()
    (root / "registry.csv").write_text("id,label\n" + "".join(",".join(l.split(",")[:2]) + "\n" for l in lines[1:]))
    codes.append(main(["split", str(root / "registry.csv"), "--seed", "8", "--out", str(root / "split.json")]))
    (root / "run.json").write_text(json.dumps({
        "dataset": {"predictions": "pred.csv"}, "split": {"manifest": "split.json"},
        "preset": {"names": ["MOZART1", "MOZART2"], "seed": 8}, "out": "runs"}))
    codes.append(main(["train", "--config", str(root / "run.json")]))
    codes.append(main(["report", str(root / "runs" / "MOZART1"), str(root / "runs" / "MOZART2"),
                       "--out", str(root / "report")]))
    return codes


def test_criterion_8_determinism(tmp_path, capsys):
    codes_a = _run_all_commands(tmp_path / "a")
    codes_b = _run_all_commands(tmp_path / "b")
    capsys.readouterr()
    da, db = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    differing = sorted(k for k in da if da.get(k) != db.get(k))
    kinds = {k.rsplit("/", 1)[-1] for k in da}
    covers = {"split.json", "weights.json", "run.json", "metrics.csv", "comparison.csv", "pred.csv"} <= kinds
    ok = codes_a == codes_b == [0, 0, 0, 0] and set(da) == set(db) and not differing and covers
    report(8, "determinism", ok, f"{len(da)} artifacts from simulate/split/train/report compared by sha256, "
                                 f"{len(differing)} differ" + (f": {differing[:5]}" if differing else ""))


# 9 -------------------------------------------------------------------------------------

def test_criterion_9_preprocessing_exactness():
    gen = np.random.default_rng(9)
    scaled = preprocess(np.array([[0.0, 127.5, 255.0]]), SCALE_TO_PLUS_MINUS_ONE)[0, :, 0].tolist()
    checks = {"scale endpoints": scaled == [-1.0, 0.0, 1.0]}
    identity_ok = flip_ok = True
    for _ in range(50):
        shape = (int(gen.integers(1, 40)), int(gen.integers(1, 40)), int(gen.choice([1, 3])))
        img = gen.uniform(0, 255, size=shape)
        identity_ok &= augment(img, IDENTITY_AUGMENT, gen).tobytes() == img.tobytes()
        flip_ok &= affine_transform(affine_transform(img, flip=True), flip=True).tobytes() == img.tobytes()
    checks["identity augmentation bit-exact"] = identity_ok
    checks["double flip identity"] = flip_ok
    report(9, "preprocessing exactness", all(checks.values()),
           ", ".join(f"{k}={v}" for k, v in checks.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
