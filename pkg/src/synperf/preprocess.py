"""Padding, standardization, temporal smoothing and temporal-shift augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import CaseRecord, DataError, PerfusionMap, PerfusionSequence


@dataclass(frozen=True)
class PreprocessConfig:
    target_spatial_shape: tuple
    target_frames: int
    smoothing_sigma: float = 1.0
    shift_range: tuple = (-5, 30)
    standardize_sequence: bool = True
    standardize_targets: bool = True

    def __post_init__(self):
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")
        lo, hi = self.shift_range
        if lo > hi:
            raise ValueError(f"shift_range lower > upper: {self.shift_range}")


def _symmetric_pad_widths(have, want):
    extra = want - have
    return (extra // 2, extra - extra // 2)


def pad_case(case: CaseRecord, cfg: PreprocessConfig) -> CaseRecord:
    """Zero-pad spatially (centered, odd remainder trailing); reflect-pad frames at the end."""
    seq = case.sequence
    spatial = seq.spatial_shape
    target = tuple(cfg.target_spatial_shape)
    if len(target) != 3 or any(h > w for h, w in zip(spatial, target)):
        raise DataError(f"case {case.case_id} spatial shape {spatial} exceeds target {target}")
    if seq.n_frames > cfg.target_frames:
        raise DataError(f"case {case.case_id} has {seq.n_frames} frames, more than {cfg.target_frames}")
    if spatial == target and seq.n_frames == cfg.target_frames:
        return case

    widths = [_symmetric_pad_widths(h, w) for h, w in zip(spatial, target)]
    data = np.pad(seq.data, [(0, 0)] + widths, mode="constant")
    extra = cfg.target_frames - seq.n_frames
    times = seq.frame_times
    if extra:
        data = reflect_extend(data, extra)
        step = times[-1] - times[-2] if len(times) > 1 else np.float32(1.0)
        times = np.concatenate([times, times[-1] + step * np.arange(1, extra + 1, dtype=np.float32)])
    targets = {k: PerfusionMap(np.pad(m.data, widths, mode="constant"), k) for k, m in case.targets.items()}
    return case.replace(sequence=PerfusionSequence(data, times), targets=targets)


def reflect_extend(data, n, at_start=False):
    """Append (or prepend) ``n`` frames by reflection exclusive of the boundary frame."""
    if n == 0:
        return data
    width = [(n, 0) if at_start else (0, n)] + [(0, 0)] * (data.ndim - 1)
    if data.shape[0] == 1:
        return np.pad(data, width, mode="edge")
    return np.pad(data, width, mode="reflect")


def _stats(x):
    x = np.asarray(x, dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std())
    return mean, std


def standardize(case: CaseRecord, cfg: PreprocessConfig) -> CaseRecord:
    """Per-case zero mean / unit variance for the sequence and each target map."""
    seq = case.sequence
    data = seq.data
    seq_stats = case.seq_stats
    if cfg.standardize_sequence:
        mean, std = _stats(data)
        if not std > 0:
            raise DataError(f"degenerate case {case.case_id}: constant sequence")
        data = ((data.astype(np.float64) - mean) / std).astype(np.float32)
        seq_stats = (mean, std)
    targets = dict(case.targets)
    target_stats = dict(case.target_stats)
    if cfg.standardize_targets:
        for kind, m in case.targets.items():
            mean, std = _stats(m.data)
            if not std > 0:
                raise DataError(f"degenerate case {case.case_id}: constant {kind.value} map")
            targets[kind] = PerfusionMap((m.data.astype(np.float64) - mean) / std, kind)
            target_stats[kind] = (mean, std)
    return case.replace(sequence=PerfusionSequence(data, seq.frame_times), targets=targets,
                        seq_stats=seq_stats, target_stats=target_stats)


def destandardize(case: CaseRecord) -> CaseRecord:
    """Invert ``standardize`` using the statistics stored on the record."""
    seq = case.sequence
    data = seq.data
    if case.seq_stats is not None:
        mean, std = case.seq_stats
        data = (data.astype(np.float64) * std + mean).astype(np.float32)
    targets = {k: PerfusionMap(physical_target(case, k), k) for k in case.targets}
    return case.replace(sequence=PerfusionSequence(data, seq.frame_times), targets=targets,
                        seq_stats=None, target_stats={})


def physical_target(case: CaseRecord, kind) -> np.ndarray:
    """Target map ``kind`` in physical units (float64)."""
    m = case.targets[kind]
    stats = case.target_stats.get(m.kind)
    data = m.data.astype(np.float64)
    if stats is None:
        return data
    return data * stats[1] + stats[0]


def smooth_temporal(seq: PerfusionSequence, sigma: float) -> PerfusionSequence:
    """Gaussian smoothing of each voxel time series; radius ceil(3 sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return seq
    return PerfusionSequence(kernels.smooth_time(seq.data, sigma), seq.frame_times)


def shift_temporal(seq: PerfusionSequence, k: int) -> PerfusionSequence:
    """Move the signal ``k`` frames later (k > 0) or earlier (k < 0); length preserved.

    Vacated frames are filled by exclusive reflection. Frame times are kept,
    so the signal moves relative to the clock.
    """
    return PerfusionSequence(shift_array(seq.data, k), seq.frame_times)


def shift_array(data, k: int):
    k = int(k)
    T = data.shape[0]
    if abs(k) >= T:
        raise ValueError(f"|shift| {abs(k)} must be smaller than the frame count {T}")
    if k == 0:
        return data
    if k < 0:
        return reflect_extend(data[-k:], -k)
    return reflect_extend(data[: T - k], k, at_start=True)


def sample_augmentation(rng: np.random.Generator, cfg: PreprocessConfig) -> int:
    lo, hi = cfg.shift_range
    return int(rng.integers(lo, hi + 1))


def preprocess_case(case: CaseRecord, cfg: PreprocessConfig) -> CaseRecord:
    """pad -> standardize -> smooth."""
    case = standardize(pad_case(case, cfg), cfg)
    return case.replace(sequence=smooth_temporal(case.sequence, cfg.smoothing_sigma))


def config_for(cases, smoothing_sigma=1.0, **kw) -> PreprocessConfig:
    """Target shapes from the largest volume / longest sequence among ``cases``."""
    spatial = tuple(np.max([c.sequence.spatial_shape for c in cases], axis=0).tolist())
    frames = max(c.sequence.n_frames for c in cases)
    return PreprocessConfig(spatial, frames, smoothing_sigma, **kw)
