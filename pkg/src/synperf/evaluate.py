"""Evaluation protocol: per-case MAEC reports, shift sweeps and the ablation table."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, default_patch_rows, variant
from .objective import maec
from .preprocess import shift_array
from .train import PreparedCase, TrainConfig, predict_maec, train

ABLATION_VARIANTS = ("A", "B", "C", "D", "E")
VARIANT_LABELS = {
    "A": "full model",
    "B": "- augmentation",
    "C": "- spatial correlation",
    "D": "- bolus characterization",
    "E": "- loss weighting",
}


@dataclass
class EvalReport:
    split: str
    per_case: dict = field(default_factory=dict)
    pooled: float = math.nan
    seconds: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_case.values()))) if self.per_case else math.nan

    def to_tsv(self) -> str:
        """MAEC table; wall-clock times live in ``timings_tsv`` so this stays reproducible."""
        lines = ["case_id\tsplit\tmaec"]
        for cid, v in self.per_case.items():
            lines.append(f"{cid}\t{self.split}\t{v:.9f}")
        lines.append(f"MEAN\t{self.split}\t{self.mean:.9f}")
        lines.append(f"POOLED\t{self.split}\t{self.pooled:.9f}")
        return "\n".join(lines) + "\n"

    def timings_tsv(self) -> str:
        lines = ["case_id\tinference_seconds"]
        lines += [f"{cid}\t{sec:.3f}" for cid, sec in self.seconds.items()]
        return "\n".join(lines) + "\n"


def evaluate(model: Model, cases, split: str = "val", patch_rows: int | None = None) -> EvalReport:
    """Per-case MAEC of ``model`` on preprocessed ``cases``; pooled MAEC over all voxels too."""
    report = EvalReport(split=str(split))
    errs_sum, n_vox = 0.0, 0
    for c in cases:
        c = c if isinstance(c, PreparedCase) else PreparedCase.from_record(c, model.cfg.target_kind)
        pr = patch_rows or default_patch_rows(c.sequence.shape[2])
        t0 = time.perf_counter()
        p_std, _ = model.predict_arrays(c.sequence, c.frame_times, pr)
        report.seconds[c.case_id] = time.perf_counter() - t0
        p_hat, _ = model.to_physical(p_std, np.zeros_like(p_std))
        v = maec(c.target, p_hat, model.cfg.loss_config())
        report.per_case[c.case_id] = v
        errs_sum += v * c.target.size
        n_vox += c.target.size
    report.pooled = errs_sum / n_vox if n_vox else math.nan
    return report


def evaluate_maps(targets: dict, predictions: dict, split: str = "val") -> EvalReport:
    """MAEC report from already-computed physical maps keyed by case id."""
    report = EvalReport(split=split)
    total, n = 0.0, 0
    for cid, t in targets.items():
        v = maec(t, predictions[cid])
        report.per_case[cid] = v
        total += v * np.size(t)
        n += np.size(t)
    report.pooled = total / n if n else math.nan
    return report


def shift_sweep(model: Model, cases, shifts, patch_rows: int | None = None) -> list:
    """(shift, mean per-case MAEC) for each shift, always against the unshifted targets."""
    cases = [c if isinstance(c, PreparedCase) else PreparedCase.from_record(c, model.cfg.target_kind) for c in cases]
    curve = []
    for k in shifts:
        vals = []
        for c in cases:
            if abs(k) >= c.sequence.shape[0]:
                raise ValueError(f"shift {k} exceeds the {c.sequence.shape[0]} frames of {c.case_id}")
            pr = patch_rows or default_patch_rows(c.sequence.shape[2])
            vals.append(predict_maec(model, c, pr, sequence=shift_array(c.sequence, k)))
        curve.append((int(k), float(np.mean(vals))))
    return curve


def curve_to_tsv(curves: dict) -> str:
    """Shift-sweep curves keyed by label -> tab table with one column per label."""
    labels = list(curves)
    shifts = [k for k, _ in curves[labels[0]]]
    lines = ["shift\t" + "\t".join(labels)]
    for i, k in enumerate(shifts):
        lines.append(f"{k}\t" + "\t".join(f"{curves[lab][i][1]:.6f}" for lab in labels))
    return "\n".join(lines) + "\n"


@dataclass
class AblationRow:
    variant: str
    seed: int
    maec_val: float
    maec_test: float
    best_epoch: int


@dataclass
class AblationResult:
    rows: list
    models: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """variant -> (mean val, std val, mean test, std test) across seeds."""
        out = {}
        for v in dict.fromkeys(r.variant for r in self.rows):
            val = np.array([r.maec_val for r in self.rows if r.variant == v])
            test = np.array([r.maec_test for r in self.rows if r.variant == v])
            out[v] = (float(val.mean()), float(val.std()), float(test.mean()), float(test.std()))
        return out

    def to_tsv(self) -> str:
        lines = ["variant\tlabel\tseed\tmaec_val\tmaec_test\tbest_epoch"]
        for r in self.rows:
            lines.append(f"{r.variant}\t{VARIANT_LABELS.get(r.variant, '')}\t{r.seed}\t{r.maec_val:.6f}\t{r.maec_test:.6f}\t{r.best_epoch}")
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        lines = ["variant\tlabel\tmaec_val_mean\tmaec_val_std\tmaec_test_mean\tmaec_test_std"]
        for v, (vm, vs, tm, ts) in self.summary().items():
            lines.append(f"{v}\t{VARIANT_LABELS.get(v, '')}\t{vm:.6f}\t{vs:.6f}\t{tm:.6f}\t{ts:.6f}")
        return "\n".join(lines) + "\n"


def run_ablations(train_cases, val_cases, test_cases, base_cfg: ModelConfig | None = None,
                  train_cfg: TrainConfig | None = None, seeds=(0,), variants=ABLATION_VARIANTS,
                  preprocess_cfg=None, keep_models: bool = False, callback=None) -> AblationResult:
    """Train and score each variant on shared splits, once per training seed."""
    base_cfg = base_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    prep = lambda cs: [c if isinstance(c, PreparedCase) else PreparedCase.from_record(c, base_cfg.target_kind) for c in cs]
    train_cases, val_cases, test_cases = prep(train_cases), prep(val_cases), prep(test_cases)
    result = AblationResult(rows=[])
    for seed in seeds:
        for name in variants:
            cfg = variant(name, base_cfg)
            res = train(train_cases, val_cases, cfg, dataclasses.replace(train_cfg, seed=int(seed)), preprocess_cfg)
            row = AblationRow(name, int(seed), evaluate(res.model, val_cases, "val").mean,
                              evaluate(res.model, test_cases, "test").mean, res.best_epoch)
            result.rows.append(row)
            result.histories[(name, int(seed))] = res.history
            if keep_models:
                result.models[(name, int(seed))] = res.model
            if callback is not None:
                callback(row)
    return result


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
