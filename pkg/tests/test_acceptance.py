"""Acceptance suite: one test per exit criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
as they complete. The phantom-training criteria train real (toy-scale)
models on CPU and dominate the runtime.
"""

import functools
import math
import random
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import fnv_reference, fpv_reference, lovasz_hinge_reference
from petseg import metrics, trainer
from petseg.ingest import load_patient, list_patient_dirs
from petseg.losses import LossWeights, bce_loss, combined_loss, dice_loss, lovasz_hinge
from petseg.model import EncoderConfig, build_model, load_checkpoint
from petseg.phantom import PhantomSpec, generate_dataset
from petseg.sampler import (
    ORIGIN_LESION,
    SchedulerConfig,
    _active_chain,
    _child_rng,
    build_cycle_plan,
    carryover,
    epoch_training_list,
    interleave_even,
)
from test_sampler import interior_gaps, make_pool, random_pool


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[FAIL] {name}")
                raise
            print(f"[PASS] {name}")
        return wrapper
    return deco


# ---------------------------------------------------------------------------
# sampler


@criterion("sampler property suite (50 randomized pools, < 5 s)")
def test_sampler_suite():
    start = time.perf_counter()
    rng = random.Random(2024)
    for trial in range(50):
        patients = random_pool(rng)
        config = SchedulerConfig(alpha=rng.choice([0.5, 1.0, 2.0]),
                                 beta=rng.randint(1, 6), seed=trial)
        plan = build_cycle_plan(patients, config)
        again = build_cycle_plan(patients, config)

        # determinism
        assert [b.patient_ids for b in plan.batches] == \
            [b.patient_ids for b in again.batches]
        assert plan.lesion_base == again.lesion_base

        # patient disjointness and full coverage per cycle
        seen = [pid for b in plan.batches for pid in b.patient_ids]
        assert len(seen) == len(set(seen))
        assert sorted(seen) == sorted(p.patient_id for p in patients)

        # ratio bound on non-final batches
        max_pool = max(len(p.nonlesion_slices) for p in patients)
        for batch in plan.batches[:-1]:
            assert plan.target_wb_count <= len(batch.native_slices)
            assert len(batch.native_slices) < plan.target_wb_count + max_pool

        # carryover size and subset, across two full rotations of the cycle
        rotations = 2 * plan.num_batches
        chain = _active_chain(plan, rotations)
        for r in range(1, rotations + 1):
            carried = carryover(chain[r - 1], config,
                                _child_rng(config.seed, "carryover", r))
            assert len(carried) == math.floor(
                config.carryover_fraction * len(chain[r - 1]))
            assert set(carried) <= set(chain[r - 1])
            assert len(set(carried)) == len(carried)

        # epoch lists: every lesion slice exactly once, evenness of gaps
        for epoch in (0, config.beta, 3 * config.beta + 1):
            eplan = epoch_training_list(plan, epoch, config)
            lesion = [s for s, o in zip(eplan.samples, eplan.origins)
                      if o == ORIGIN_LESION]
            assert sorted(lesion) == sorted(plan.lesion_base)
            gaps = interior_gaps(eplan.origins)
            if gaps:
                assert max(gaps) - min(gaps) <= 1

    # worked example: permuted whole-body pools [60, 50, 70, 40], 100 lesion
    # slices, alpha 1 -> two batches of 110
    seed = 42
    perm = list(range(4))
    _child_rng(seed, "patient-permutation").shuffle(perm)
    counts = [0] * 4
    for position, idx in enumerate(perm):
        counts[idx] = [60, 50, 70, 40][position]
    patients = make_pool([25] * 4, counts)
    plan = build_cycle_plan(patients, SchedulerConfig(alpha=1.0, beta=5, seed=seed))
    assert plan.target_wb_count == 100
    assert [len(b.native_slices) for b in plan.batches] == [110, 110]
    assert [b.patient_ids for b in plan.batches] == [
        [patients[i].patient_id for i in perm[:2]],
        [patients[i].patient_id for i in perm[2:]],
    ]

    assert time.perf_counter() - start < 5.0


@criterion("interleave formula exhaustive for n, m <= 12 (< 1 s)")
def test_interleave_exhaustive():
    start = time.perf_counter()
    for n in range(13):
        for m in range(13):
            lesion = [("L", i) for i in range(n)]
            wb = [("W", i) for i in range(m)]
            merged = interleave_even(lesion, wb)
            assert len(merged) == n + m
            assert [x for x in merged if x[0] == "L"] == lesion
            assert [x for x in merged if x[0] == "W"] == wb
            gaps = interior_gaps(["lesion" if x[0] == "L" else "wb" for x in merged])
            if gaps:
                assert max(gaps) - min(gaps) <= 1
    assert time.perf_counter() - start < 1.0


# ---------------------------------------------------------------------------
# losses


@criterion("lovasz hinge matches brute-force evaluator (500 inputs, 1e-9)")
def test_lovasz_oracle():
    rng = np.random.default_rng(77)
    for _ in range(500):
        n = int(rng.integers(1, 9))
        logits = rng.normal(0.0, 2.0, n)
        labels = rng.integers(0, 2, n).astype(np.float64)
        ours = float(lovasz_hinge(torch.tensor(logits), torch.tensor(labels)))
        ref = lovasz_hinge_reference(logits, labels)
        assert abs(ours - ref) <= 1e-9


@criterion("dice and bce worked examples to 1e-12")
def test_dice_bce_examples():
    p = torch.tensor([0.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    y = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    assert abs(float(dice_loss(p, y)) - 0.8) <= 1e-12
    half = torch.full((16,), 0.5, dtype=torch.float64)
    labels = torch.tensor([1.0, 0.0] * 8, dtype=torch.float64)
    assert abs(float(bce_loss(half, labels)) - math.log(2)) <= 1e-12
    single = torch.tensor([math.exp(-1.0)], dtype=torch.float64)
    assert abs(float(bce_loss(single, torch.ones(1, dtype=torch.float64))) - 1.0) <= 1e-12


@criterion("combined-loss gradients match finite differences (20 trials, 1e-4)")
def test_combined_gradient_fd():
    rng = np.random.default_rng(88)
    step = 1e-5
    for _ in range(20):
        n = int(rng.integers(4, 13))
        logits = torch.tensor(rng.normal(0.0, 1.5, n), requires_grad=True)
        labels = torch.tensor(rng.integers(0, 2, n).astype(np.float64))
        weights = LossWeights().double()
        with torch.no_grad():
            weights.s.copy_(torch.tensor(rng.normal(0.0, 0.4, 3)))

        total = combined_loss(logits, labels, weights)
        total.backward()

        def value(lg, sv):
            w = LossWeights().double()
            with torch.no_grad():
                w.s.copy_(sv)
            return float(combined_loss(lg, labels, w).detach())

        base_logits = logits.detach().clone()
        base_s = weights.s.detach().clone()
        for i in range(n):
            up, dn = base_logits.clone(), base_logits.clone()
            up[i] += step
            dn[i] -= step
            fd = (value(up, base_s) - value(dn, base_s)) / (2 * step)
            grad = float(logits.grad[i])
            assert abs(fd - grad) / max(abs(fd), abs(grad), 1e-8) < 1e-4
        for i in range(3):
            up, dn = base_s.clone(), base_s.clone()
            up[i] += step
            dn[i] -= step
            fd = (value(base_logits, up) - value(base_logits, dn)) / (2 * step)
            grad = float(weights.s.grad[i])
            assert abs(fd - grad) / max(abs(fd), abs(grad), 1e-8) < 1e-4


# ---------------------------------------------------------------------------
# metrics


@criterion("dice/FPV/FNV match brute-force oracles (1000 volume pairs, 1e-9 mL)")
def test_metrics_oracles():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(2, 9, 3))
        pred = rng.random(shape) < float(rng.uniform(0.05, 0.4))
        gt = rng.random(shape) < float(rng.uniform(0.05, 0.4))
        spacing = tuple(float(s) for s in rng.uniform(0.5, 4.0, 3))

        fpv = metrics.false_positive_volume(pred, gt, spacing)
        fnv = metrics.false_negative_volume(pred, gt, spacing)
        assert abs(fpv - fpv_reference(pred, gt, spacing)) <= 1e-9
        assert abs(fnv - fnv_reference(pred, gt, spacing)) <= 1e-9

        denom = pred.sum() + gt.sum()
        expected_dice = 1.0 if denom == 0 else 2.0 * (pred & gt).sum() / denom
        assert abs(metrics.dice_score(pred, gt) - expected_dice) <= 1e-12

        # symmetry: swapping roles exchanges the false volumes
        assert abs(fpv - metrics.false_negative_volume(gt, pred, spacing)) <= 1e-12
        assert abs(fnv - metrics.false_positive_volume(gt, pred, spacing)) <= 1e-12


# ---------------------------------------------------------------------------
# schedule and model


@criterion("cosine schedule hits 1e-5 / 5.005e-6 / 1e-8 (rel 1e-9)")
def test_cosine_schedule_points():
    config = trainer.TrainConfig()
    assert trainer.cosine_lr(0, config) == pytest.approx(1e-5, rel=1e-9)
    assert trainer.cosine_lr(50, config) == pytest.approx(5.005e-6, rel=1e-9)
    assert trainer.cosine_lr(100, config) == pytest.approx(1e-8, rel=1e-9)


@criterion("toy model shape contract and finite gradients")
def test_model_shapes_and_gradients():
    model = build_model(EncoderConfig.toy(), seed=0)
    for batch_size in (1, 3):
        x = torch.randn(batch_size, 2, 64, 64)
        out = model(x)
        assert out.shape == (batch_size, 1, 64, 64)
    model.zero_grad()
    out = model(torch.randn(2, 2, 64, 64))
    out.sum().backward()
    for name, param in model.named_parameters():
        assert param.grad is not None, name
        assert torch.isfinite(param.grad).all(), name


# ---------------------------------------------------------------------------
# phantom-scale training


PHANTOM_SEEDS = (0, 1, 2)
PHANTOM_EPOCHS = 15


@pytest.fixture(scope="module")
def phantom_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom20")
    spec = PhantomSpec(grid=(96, 64, 64), n_lesions=2, seed=11)
    generate_dataset(20, spec, seed=11, out_dir=root)
    return [load_patient(p) for p in list_patient_dirs(root)]


def _train_and_score(records, seed, alpha):
    config = trainer.TrainConfig.toy(epochs=PHANTOM_EPOCHS, seed=seed)
    sched = SchedulerConfig(alpha=alpha, beta=5, seed=seed)
    start = time.perf_counter()
    payload, history = trainer.train(records, config, sched, EncoderConfig.toy())
    elapsed = time.perf_counter() - start
    model, _ = load_checkpoint(payload)
    folds = trainer.kfold_split(records, k=5, seed=seed)
    _, val = folds[config.fold_index]
    rows = [metrics.evaluate_patient(model, p, input_size=config.input_size)
            for p in val]
    mean_fpv = float(np.mean([r.fpv_ml for r in rows]))
    best_val = history.best_epoch().val_dice
    return {"val_dice": best_val, "fpv": mean_fpv, "seconds": elapsed}


@pytest.fixture(scope="module")
def phantom_runs(phantom_dataset):
    runs = {}
    for seed in PHANTOM_SEEDS:
        runs[seed, "wholebody"] = _train_and_score(phantom_dataset, seed, alpha=1.0)
        runs[seed, "lesion_only"] = _train_and_score(phantom_dataset, seed,
                                                     alpha=math.inf)
    return runs


@criterion("phantom training reaches val Dice >= 0.5 within budget")
def test_phantom_training_dice(phantom_runs):
    run = phantom_runs[PHANTOM_SEEDS[0], "wholebody"]
    assert run["seconds"] <= 20 * 60
    assert PHANTOM_EPOCHS <= 30
    assert run["val_dice"] >= 0.5, f"val dice {run['val_dice']:.3f}"


@criterion("whole-body schedule lowers phantom-test FPV in >= 2 of 3 seeds")
def test_phantom_fpv_direction(phantom_runs):
    wins = 0
    for seed in PHANTOM_SEEDS:
        wb = phantom_runs[seed, "wholebody"]["fpv"]
        lo = phantom_runs[seed, "lesion_only"]["fpv"]
        print(f"  seed {seed}: whole-body FPV {wb:.3f} mL vs lesion-only {lo:.3f} mL")
        if wb <= lo:
            wins += 1
    assert wins >= 2, f"whole-body won only {wins}/3 seeds"


# ---------------------------------------------------------------------------
# end-to-end


@criterion("pipeline smoke: synth/index/plan/train/predict/evaluate all exit 0")
def test_end_to_end_smoke(tmp_path):
    def run(*args):
        proc = subprocess.run(
            [sys.executable, "-m", "petseg.cli", *args],
            capture_output=True, text=True, cwd=tmp_path,
        )
        assert proc.returncode == 0, proc.stderr
        return proc

    run("synth", "--out", "data", "--patients", "6", "--lesions", "1",
        "--grid", "24", "32", "32", "--seed", "1")
    run("index", "--data", "data", "--out", "index.csv")
    run("plan", "--index", "index.csv", "--alpha", "1", "--beta", "5",
        "--seed", "0", "--out", "plan.txt")
    run("train", "--data", "data", "--out", "run", "--epochs", "2",
        "--input-size", "32", "--encoder", "toy", "--seed", "0")
    run("predict", "--data", "data", "--checkpoint", "run/checkpoint.pt",
        "--out", "preds")
    run("evaluate", "--data", "data", "--pred", "preds", "--out", "eval")

    expected = [
        "data/manifest.txt", "data/patient_000/ct.vol", "index.csv", "plan.txt",
        "run/checkpoint.pt", "run/history.csv", "run/history.png",
        "preds/patient_000.vol", "preds/patient_005.vol",
        "eval/eval.csv", "eval/summary.txt", "eval/eval.png",
    ]
    for rel in expected:
        assert (tmp_path / rel).exists(), rel
