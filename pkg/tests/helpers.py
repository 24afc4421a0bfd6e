"""Shared fixtures-by-function for the test modules: tiny configs and a kink-aware gradient check."""

from functools import lru_cache

import numpy as np

from synperf import kernels
from synperf.data import assign_splits
from synperf.model import Batch, Model, ModelConfig, time_feature
from synperf.objective import LossConfig
from synperf.phantom import DatasetConfig
from synperf.preprocess import config_for, preprocess_case

TINY = dict(encoder_channels=(8, 8, 8), encode_dim=8, spatial_channels=8, dense_dim=4,
            bcs_hidden=4, bcs_embed_dim=4, bcs_size=(4, 4))


def tiny_cfg(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@lru_cache(maxsize=None)
def tiny_dataset(count=6, shape=(12, 1, 16, 16), seed=0):
    """Preprocessed phantom cases keyed by id, plus the manifest."""
    raw = [c for c, _ in DatasetConfig(count=count, shape=shape).generate(seed)]
    pc = config_for(raw)
    cases = {c.case_id: preprocess_case(c, pc) for c in raw}
    return cases, assign_splits(list(cases), seed=seed)


# ---------------------------------------------------------------------------
# gradient check


def _per_voxel_loss(model, batch, target, cfg: LossConfig, drop_seed):
    p, lb, cache = model.forward_batch(batch, rng=np.random.default_rng(drop_seed))
    ph, lbp = model.to_physical(p, lb)
    lo, hi = cfg.importance_band
    loss, g_hat, g_logb = kernels.laplace_terms(target, ph, lbp, lo, hi, cfg.inside_weight,
                                                cfg.outside_weight, cfg.weighted)
    shape = ph.shape
    return loss.reshape(shape), g_hat.reshape(shape), g_logb.reshape(shape), ph, cache


def _dilate(mask2d, use_spatial):
    if not use_spatial:
        return mask2d
    out = mask2d.copy()
    R, C = mask2d.shape
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            src = np.zeros_like(mask2d)
            src[max(dr, 0):R + min(dr, 0), max(dc, 0):C + min(dc, 0)] = \
                mask2d[max(-dr, 0):R + min(-dr, 0), max(-dc, 0):C + min(-dc, 0)]
            out |= src
    return out


def kink_voxels(model, c_plus, c_minus, ph_plus, ph_minus, target, cfg: LossConfig, shape):
    """Output voxels whose loss sits on a different linear piece at the two probe points.

    Returns None when a shared (per-case) activation straddles a kink, which
    would touch every voxel.
    """
    B, R, C = shape
    if model.cfg.use_bcs:
        for key in ("a1", "a2"):
            if not np.array_equal(c_plus["bcs"][key] > 0, c_minus["bcs"][key] > 0):
                return None
    enc = np.zeros(B * R * C, dtype=bool)
    for ap, am in zip(c_plus["acts"], c_minus["acts"]):
        enc |= ((ap > 0) != (am > 0)).reshape(B * R * C, -1).any(axis=1)
    for (fp, _), (fm, _) in zip(c_plus["pools"], c_minus["pools"]):
        enc |= (fp != fm).reshape(B * R * C, -1).any(axis=1)
    enc = enc.reshape(B, R, C)
    bad = np.stack([_dilate(enc[b], model.cfg.use_spatial_correlation) for b in range(B)])
    if model.cfg.use_spatial_correlation:
        for key in ("hs", "hd"):
            bad |= ((c_plus[key] > 0) != (c_minus[key] > 0)).any(axis=-1)
    bad |= np.sign(ph_plus - target) != np.sign(ph_minus - target)
    if cfg.weighted:
        lo, hi = cfg.importance_band
        inside = lambda ph: (np.maximum(target, ph) >= lo) & (np.minimum(target, ph) <= hi)
        bad |= inside(ph_plus) != inside(ph_minus)
    return bad


def gradient_check(model: Model, batch: Batch, target, cfg: LossConfig, h=1e-4, seed=0, drop_seed=5, tries=20):
    """Per parameter group: (analytic, finite-difference) directional derivatives on non-kink voxels."""
    rng = np.random.default_rng(seed)
    shape = target.shape
    n = target.size
    results = {}
    for name, arr in model.params.items():
        for _ in range(tries):
            v = rng.normal(size=arr.shape)
            v /= np.linalg.norm(v)
            old = arr.copy()
            arr[...] = old + h * v
            lp, _, _, php, cp = _per_voxel_loss(model, batch, target, cfg, drop_seed)
            arr[...] = old - h * v
            lm, _, _, phm, cm = _per_voxel_loss(model, batch, target, cfg, drop_seed)
            arr[...] = old
            bad = kink_voxels(model, cp, cm, php, phm, target, cfg, shape)
            if bad is None or bad.all():
                continue
            keep = ~bad
            fd = float((lp[keep].sum() - lm[keep].sum()) / n / (2 * h))
            _, g_hat, g_logb, _, cache = _per_voxel_loss(model, batch, target, cfg, drop_seed)
            grads = model.backward(cache, np.where(keep, g_hat, 0.0) / n * model.target_scale[1],
                                   np.where(keep, g_logb, 0.0) / n)
            an = float((grads[name] * v).sum())
            results[name] = (an, fd, int(bad.sum()))
            break
        else:
            raise AssertionError(f"no kink-free probe direction for {name}")
    return results


def gradcheck_setup(cfg: ModelConfig, frames=2, rows=4, cols=8, seed=0, target_range=(5.0, 35.0)):
    """Float64 model plus a single-slice batch and physical target for the gradient check."""
    rng = np.random.default_rng(seed)
    model = Model.init(cfg, rng, dtype=np.float64, target_scale=(20.0, 5.0))
    sig = rng.normal(size=(1, frames, rows, cols))
    if cfg.use_bcs:
        h, w = cfg.bcs_size
        bcs = sig[:, :, :h, :w].copy()
    else:
        bcs = np.zeros((1, frames, 1, 1))
    batch = Batch(sig, np.zeros(1, dtype=np.int64), bcs, time_feature(np.arange(frames) * 1.5)[None])
    target = rng.uniform(*target_range, size=(1, rows, cols))
    return model, batch, target
