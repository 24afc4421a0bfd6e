"""Training loop: row-band patches, Adam with step decay, per-epoch validation and model selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import CaseRecord, MapKind
from .model import Batch, Model, ModelConfig, default_patch_rows, extract_bcs_patch, time_feature
from .objective import loss_and_grads, maec
from .preprocess import PreprocessConfig, physical_target, sample_augmentation, shift_array

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    # None scales the 32-of-256 row band to the volume height
    patch_rows: int | None = None
    lr0: float = 5e-4
    lr_halving_period: int = 4
    epochs: int = 30
    seed: int = 0
    shift_range: tuple = (-5, 30)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr0 <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr0 > 0, epochs >= 1 and batch_size >= 1 required")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """lr0 halved every ``lr_halving_period`` epochs; ``epoch`` is zero-based."""
    return cfg.lr0 * 2.0 ** (-(epoch // cfg.lr_halving_period))


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class PreparedCase:
    """A preprocessed case in the arrays the trainer consumes."""

    case_id: str
    sequence: np.ndarray  # (T, S, R, C) standardized, smoothed
    frame_times: np.ndarray
    target: np.ndarray  # (S, R, C) physical units

    @classmethod
    def from_record(cls, case: CaseRecord, kind=MapKind.TMAX):
        if case.seq_stats is None:
            raise ValueError(f"case {case.case_id} is not preprocessed")
        return cls(case.case_id, case.sequence.data, case.sequence.frame_times,
                   physical_target(case, MapKind(kind)))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_maec: float
    seconds: float


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def val_curve(self) -> list:
        return [h.val_maec for h in self.history]


def target_scale(cases) -> tuple:
    values = np.concatenate([c.target.ravel() for c in cases])
    std = float(values.std())
    return float(values.mean()), std if std > 0 else 1.0


def predict_maec(model: Model, case: PreparedCase, patch_rows: int, loss_cfg=None, sequence=None) -> float:
    seq = case.sequence if sequence is None else sequence
    p_std, _ = model.predict_arrays(seq, case.frame_times, patch_rows)
    p_hat, _ = model.to_physical(p_std, np.zeros_like(p_std))
    return maec(case.target, p_hat, loss_cfg or model.cfg.loss_config())


def _make_batch(items, seqs, cases, patch_rows, cfg: ModelConfig, dtype):
    """items: list of (case_idx, slice, row0)."""
    uniq = sorted({i for i, _, _ in items})
    slot = {c: j for j, c in enumerate(uniq)}
    signals = np.stack([seqs[i][:, s, r:r + patch_rows, :] for i, s, r in items]).astype(dtype, copy=False)
    targets = np.stack([cases[i].target[s, r:r + patch_rows, :] for i, s, r in items])
    T = signals.shape[1]
    if cfg.use_bcs:
        bcs = np.stack([extract_bcs_patch(seqs[i], cfg) for i in uniq]).astype(dtype, copy=False)
    else:
        bcs = np.zeros((len(uniq), T, 1, 1), dtype=dtype)
    tf = np.stack([time_feature(cases[i].frame_times) for i in uniq])
    idx = np.array([slot[i] for i, _, _ in items], dtype=np.int64)
    return Batch(signals, idx, bcs, tf), targets


def train(train_cases, val_cases, model_cfg: ModelConfig, train_cfg: TrainConfig,
          preprocess_cfg: PreprocessConfig | None = None, callback=None) -> TrainResult:
    """Train from scratch; returns the epoch with the lowest validation MAEC.

    ``train_cases`` / ``val_cases`` are preprocessed CaseRecords or
    PreparedCases. History entry 0 is the untrained model.
    """
    train_cases = [c if isinstance(c, PreparedCase) else PreparedCase.from_record(c, model_cfg.target_kind)
                   for c in train_cases]
    val_cases = [c if isinstance(c, PreparedCase) else PreparedCase.from_record(c, model_cfg.target_kind)
                 for c in val_cases]
    if not train_cases or not val_cases:
        raise ValueError("training and validation splits must both be non-empty")
    rows = train_cases[0].sequence.shape[2]
    patch_rows = train_cfg.patch_rows or default_patch_rows(rows)
    if rows % patch_rows:
        raise ValueError(f"patch rows {patch_rows} must divide volume rows {rows}")
    lo, hi = preprocess_cfg.shift_range if preprocess_cfg else train_cfg.shift_range
    # a shift must leave at least one original frame
    T = train_cases[0].sequence.shape[0]
    aug_cfg = PreprocessConfig((0, 0, 0), 0, shift_range=(max(lo, 1 - T), min(hi, T - 1)))

    streams = np.random.SeedSequence(train_cfg.seed).spawn(4)
    init_rng, shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in streams)
    dtype = np.dtype(train_cfg.dtype)
    model = Model.init(model_cfg, init_rng, dtype=dtype, target_scale=target_scale(train_cases))
    opt = Adam(model.params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    loss_cfg = model_cfg.loss_config()
    S = train_cases[0].sequence.shape[1]
    patches = [(i, s, r) for i in range(len(train_cases)) for s in range(S) for r in range(0, rows, patch_rows)]

    def validate():
        return float(np.mean([predict_maec(model, c, patch_rows, loss_cfg) for c in val_cases]))

    t0 = time.perf_counter()
    result = TrainResult(model.copy(), [EpochRecord(0, 0.0, math.nan, validate(), time.perf_counter() - t0)], 0)
    best = math.inf
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(epoch, train_cfg)
        if model_cfg.use_augmentation:
            seqs = [shift_array(c.sequence, sample_augmentation(aug_rng, aug_cfg)) for c in train_cases]
        else:
            seqs = [c.sequence for c in train_cases]
        order = shuffle_rng.permutation(len(patches))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            items = [patches[j] for j in order[start:start + train_cfg.batch_size]]
            batch, target = _make_batch(items, seqs, train_cases, patch_rows, model_cfg, dtype)
            p_std, lb_std, cache = model.forward_batch(batch, rng=drop_rng)
            p_hat, log_b = model.to_physical(p_std, lb_std)
            loss, g_hat, g_logb = loss_and_grads(target, p_hat, log_b, loss_cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {start // train_cfg.batch_size}")
            grads = model.backward(cache, g_hat * model.target_scale[1], g_logb)
            opt.step(model.params, grads, lr)
            losses.append(loss)
        rec = EpochRecord(epoch + 1, lr, float(np.mean(losses)), validate(), time.perf_counter() - t0)
        result.history.append(rec)
        log.info("epoch %d lr %.3g loss %.4f val MAEC %.4f (%.1fs)", rec.epoch, lr, rec.train_loss, rec.val_maec, rec.seconds)
        if callback is not None:
            callback(rec)
        if rec.val_maec < best:
            best = rec.val_maec
            result.model = model.copy()
            result.best_epoch = rec.epoch
    return result
