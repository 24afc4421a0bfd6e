"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The heavy experiments (reference training, the ablation grid and the
full-size forward pass) carry the ``slow`` marker.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import gradcheck_setup, gradient_check
from synperf.cli import main
from synperf.data import MapKind, PerfusionSequence, assign_splits
from synperf.evaluate import run_ablations, shift_sweep
from synperf.model import Model, ModelConfig, default_patch_rows
from synperf.objective import LossConfig, importance, laplace_nll, loss_weight, maec, variance_map, weighted_loss
from synperf.phantom import DESK_SHAPE, FULL_SHAPE, DatasetConfig
from synperf.preprocess import config_for, preprocess_case, reflect_extend, shift_temporal, smooth_temporal
from synperf.train import PreparedCase, TrainConfig, train


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------


def test_criterion_01_loss_exactness():
    t0 = time.perf_counter()
    a = laplace_nll(5.0, 3.0, 2.0)
    w = weighted_loss(np.array([[[45.0]]]), np.array([[[60.0]]]), np.array([[[1.0]]]))
    err_a, err_w = abs(a - (math.log(2) + 1)), abs(w - 1.5)
    dt = time.perf_counter() - t0
    record(1, err_a <= 1e-9 and err_w <= 1e-9 and dt < 1.0,
           f"|nll-(ln2+1)|={err_a:.1e} |weighted-1.5|={err_w:.1e} ({dt:.3f}s)")


# 2 -------------------------------------------------------------------------


def test_criterion_02_weight_matches_grid_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = rng.uniform(-50.0, 100.0, size=(100_000, 2))
    closed = loss_weight(pairs[:, 0], pairs[:, 1])
    frac = np.linspace(0.0, 1.0, 10_000)
    mismatches = 0
    for i in range(0, len(pairs), 500):
        lo = pairs[i:i + 500].min(axis=1, keepdims=True)
        hi = pairs[i:i + 500].max(axis=1, keepdims=True)
        grid = importance(lo + (hi - lo) * frac).max(axis=1)
        mismatches += int(np.count_nonzero(grid != closed[i:i + 500]))
    dt = time.perf_counter() - t0
    record(2, mismatches == 0 and dt < 30.0, f"{mismatches} mismatches on 1e5 pairs ({dt:.1f}s)")


# 3 -------------------------------------------------------------------------


def test_criterion_03_gradient_contract():
    t0 = time.perf_counter()
    cfg = ModelConfig(bcs_size=(2, 2))
    model, batch, target = gradcheck_setup(cfg, frames=2, rows=4, cols=8, seed=0)
    results = gradient_check(model, batch, target, LossConfig(), h=1e-4)
    worst, worst_name = 0.0, ""
    for name, (an, fd, _) in results.items():
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
        if rel > worst:
            worst, worst_name = rel, name
    dt = time.perf_counter() - t0
    record(3, worst <= 1e-3 and len(results) == len(model.params) and dt < 120.0,
           f"{len(results)} parameter groups, worst relative error {worst:.1e} ({worst_name}) ({dt:.1f}s)")


# 4 -------------------------------------------------------------------------


def _shape_check(shape, rng):
    T, S, R, C = shape
    model = Model.init(ModelConfig(), rng)
    data = rng.normal(size=shape).astype(np.float32)
    p, lb = model.predict_arrays(data, np.arange(T, dtype=np.float32) * 1.5, default_patch_rows(R))
    p_hat, log_b = model.to_physical(p, lb)
    var = variance_map(np.exp(log_b))
    return p_hat.shape, var.shape, bool(np.isfinite(p_hat).all() and np.isfinite(var).all())


@pytest.mark.slow
def test_criterion_04_shape_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    details, ok = [], True
    for shape in (FULL_SHAPE, DESK_SHAPE):
        ps, vs, finite = _shape_check(shape, rng)
        ok &= ps == vs == shape[1:] and finite
        details.append(f"{'x'.join(map(str, shape))} -> {'x'.join(map(str, ps))}")
    dt = time.perf_counter() - t0
    record(4, ok, f"{'; '.join(details)} ({dt:.0f}s)")


# 5 -------------------------------------------------------------------------


def _series(values):
    return PerfusionSequence(np.asarray(values, dtype=np.float32).reshape(-1, 1, 1, 1),
                             np.arange(len(values), dtype=np.float32))


def test_criterion_05_preprocessing_exactness():
    t0 = time.perf_counter()
    s = _series([1, 2, 3, 4])
    fwd = shift_temporal(s, 1).data.ravel().tolist()
    back = shift_temporal(s, -1).data.ravel().tolist()
    pad = reflect_extend(np.array([1.0, 2.0, 3.0, 4.0]), 2).tolist()
    rng = np.random.default_rng(5)
    const = _series(np.full(40, 7.5))
    rand = PerfusionSequence(rng.normal(100, 15, (40, 2, 8, 8)), np.arange(40.0))
    const_err = mean_err = 0.0
    for sigma in (0.5, 1.0, 2.0, 4.0):
        const_err = max(const_err, float(np.max(np.abs(smooth_temporal(const, sigma).data - 7.5) / 7.5)))
        m0 = rand.data.astype(np.float64).mean(axis=0)
        m1 = smooth_temporal(rand, sigma).data.astype(np.float64).mean(axis=0)
        mean_err = max(mean_err, float(np.max(np.abs(m1 - m0) / np.abs(m0))))
    identity = smooth_temporal(rand, 0.0).equals(rand)
    dt = time.perf_counter() - t0
    ok = (fwd == [2, 1, 2, 3] and back == [2, 3, 4, 3] and pad == [1, 2, 3, 4, 3, 2]
          and const_err <= 1e-4 and mean_err <= 1e-4 and identity and dt < 10.0)
    record(5, ok, f"k=+1 {fwd} k=-1 {back} pad {pad}; constant err {const_err:.1e}, "
                  f"mean err {mean_err:.1e}, sigma=0 identity {identity} ({dt:.2f}s)")


# 6 -------------------------------------------------------------------------


def test_criterion_06_oracle_recovery():
    t0 = time.perf_counter()
    within, total, worst = 0, 0, 1.0
    for case, truth in DatasetConfig(noise_sigma=0.0).generate(0):
        tmax = case.targets[MapKind.TMAX].data
        mask = truth.tissue_mask
        hits = int(np.count_nonzero(np.abs(tmax[mask] - truth.delay_field[mask]) <= 1.5))
        within += hits
        total += int(mask.sum())
        worst = min(worst, hits / mask.sum())
    frac = within / total
    dt = time.perf_counter() - t0
    record(6, frac >= 0.95 and dt < 120.0, f"{100 * frac:.2f}% of {total} perfused voxels in 20 noiseless phantoms "
                                           f"within 1.5 s (worst case {100 * worst:.1f}%) ({dt:.1f}s)")


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_training_efficacy():
    t0 = time.perf_counter()
    raw = [c for c, _ in DatasetConfig().generate(0)]
    pc = config_for(raw)
    cases = {c.case_id: preprocess_case(c, pc) for c in raw}
    man = assign_splits(list(cases), seed=0)
    pick = lambda split: [cases[i] for i in man.ids(split)]
    res = train(pick("train"), pick("val"), ModelConfig(), TrainConfig(epochs=30, seed=0), pc)
    dt = time.perf_counter() - t0
    e0 = res.history[0].val_maec
    best = res.history[res.best_epoch].val_maec
    reduction = 1.0 - best / e0
    record(7, reduction >= 0.5 and dt <= 1800.0,
           f"val MAEC {e0:.3f} -> {best:.3f} at epoch {res.best_epoch} ({100 * reduction:.1f}% reduction, {dt / 60:.1f} min)")


# 8 and 9 -------------------------------------------------------------------

# Reduced phantom grid so that 15 trainings plus the sweeps fit the time budget.
# Desk epochs are ~100x shorter than full-size ones, so the learning rate
# halves every 10 epochs instead of every 4, and the shift range is scaled to
# the 40-frame sequences.
ABLATION_DATA = DatasetConfig(count=36, shape=(40, 2, 32, 32))
ABLATION_SHIFT_RANGE = (-5, 15)
ABLATION_MODEL = ModelConfig(bcs_size=(8, 8))
ABLATION_TRAIN = TrainConfig(epochs=30, patch_rows=2, lr_halving_period=10)
ABLATION_SEEDS = (0, 1, 2)
SWEEP_SHIFTS = range(-5, 11)


@pytest.fixture(scope="module")
def ablation():
    t0 = time.perf_counter()
    raw = [c for c, _ in ABLATION_DATA.generate(8)]
    pc = config_for(raw, shift_range=ABLATION_SHIFT_RANGE)
    cases = {c.case_id: preprocess_case(c, pc) for c in raw}
    man = assign_splits(list(cases), seed=8)
    pick = lambda split: [PreparedCase.from_record(cases[i]) for i in man.ids(split)]
    test_cases = pick("test")
    result = run_ablations(pick("train"), pick("val"), test_cases, ABLATION_MODEL, ABLATION_TRAIN,
                           seeds=ABLATION_SEEDS, preprocess_cfg=pc, keep_models=True,
                           callback=lambda row: print(row, f"{time.perf_counter() - t0:.0f}s", flush=True))
    curves = {}
    for name in ("A", "B"):
        per_seed = [dict(shift_sweep(result.models[(name, s)], test_cases, SWEEP_SHIFTS, ABLATION_TRAIN.patch_rows))
                    for s in ABLATION_SEEDS]
        curves[name] = {k: float(np.mean([c[k] for c in per_seed])) for k in SWEEP_SHIFTS}
        print(name, "sweep", [round(curves[name][k], 3) for k in SWEEP_SHIFTS], flush=True)
    return result, curves, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_08_ablation_ordering(ablation):
    result, _, dt = ablation
    summary = result.summary()
    a_mean, a_std = summary["A"][2], summary["A"][3]
    ok, parts = dt <= 3 * 3600, [f"A {a_mean:.3f}+-{a_std:.3f}"]
    for name in ("C", "D", "E"):
        m, s = summary[name][2], summary[name][3]
        margin = max(a_std, s)
        ok &= m - a_mean > margin
        parts.append(f"{name} {m:.3f}+-{s:.3f} (gap {m - a_mean:+.3f} vs {margin:.3f})")
    record(8, ok, f"test MAEC over {len(ABLATION_SEEDS)} seeds: {'; '.join(parts)} ({dt / 60:.0f} min)")


@pytest.mark.slow
def test_criterion_09_augmentation_robustness(ablation):
    _, curves, _ = ablation
    rng_a = max(curves["A"].values()) - min(curves["A"].values())
    rng_b = max(curves["B"].values()) - min(curves["B"].values())
    b0, b10 = curves["B"][0], curves["B"][10]
    record(9, rng_a < rng_b and b10 > b0,
           f"MAEC range over shifts -5..10: augmented {rng_a:.3f}, unaugmented {rng_b:.3f}; "
           f"unaugmented k=0 {b0:.3f}, k=+10 {b10:.3f}")


# 10 ------------------------------------------------------------------------


def test_criterion_10_metric_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    ok, worst = True, 0.0
    for _ in range(200):
        shape = (2, 5, 7)
        x = rng.uniform(0, 20, shape)
        y = rng.uniform(0, 20, shape)
        worst = max(worst, abs(maec(x, y) - float(np.mean(np.abs(x - y)))))
        wide_x, wide_y = rng.uniform(-30, 60, shape), rng.uniform(-30, 60, shape)
        above = rng.random(shape) < 0.3
        bumped_x = np.where(above, rng.uniform(20, 500, shape), wide_x)
        bumped_y = np.where(above, rng.uniform(20, 500, shape), wide_y)
        base_x = np.where(above, 20.0, wide_x)
        base_y = np.where(above, 20.0, wide_y)
        ok &= maec(bumped_x, bumped_y) == maec(base_x, base_y)
        ok &= maec(wide_x, wide_x) == 0.0
    dt = time.perf_counter() - t0
    ok &= worst <= 1e-12 and dt < 10.0
    record(10, ok, f"in-window MAEC vs MAE max diff {worst:.1e}; invariance and identity over 200 draws ({dt:.2f}s)")


# 11 ------------------------------------------------------------------------

PIPELINE_CONFIG = """\
phantom.count=6
phantom.shape=16,1,16,16
train.epochs=2
train.patch_rows=4
model.bcs_size=8,8
"""


def _pipeline(root, cfg):
    g = ["--config", str(cfg), "--seed", "11"]
    steps = [
        ["phantom", "generate", *g, "--out-dir", str(root / "raw")],
        ["preprocess", *g, "--data", str(root / "raw" / "cases"), "--out-dir", str(root / "pre")],
        ["split", *g, "--data", str(root / "pre" / "preprocessed"), "--out-dir", str(root)],
        ["train", *g, "--data", str(root / "pre" / "preprocessed"), "--manifest", str(root / "manifest.tsv"),
         "--out-dir", str(root / "run")],
        ["evaluate", *g, "--checkpoint", str(root / "run" / "checkpoint"), "--data", str(root / "pre" / "preprocessed"),
         "--manifest", str(root / "manifest.tsv"), "--split", "test", "--out-dir", str(root / "eval")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.startswith("timings_")}


def test_criterion_11_reproducibility(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "pipeline.cfg"
    cfg.write_text(PIPELINE_CONFIG, encoding="utf-8")
    first = _pipeline(tmp_path / "run1", cfg)
    second = _pipeline(tmp_path / "run2", cfg)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    reports = [k for k in first if k.endswith(".tsv")]
    dt = time.perf_counter() - t0
    record(11, not differing and len(reports) >= 3,
           f"{len(first)} files ({len(reports)} reports) bit-identical across two runs"
           + (f"; differing: {differing[:5]}" if differing else "") + f" ({dt:.1f}s)")
