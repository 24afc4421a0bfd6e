"""Weighted heteroscedastic Laplace loss, the squared loss, MAEC and the variance map.

All functions take values in physical target units (seconds for Tmax).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels


class LossKind(str, enum.Enum):
    WEIGHTED_LAPLACE_NLL = "weighted_laplace_nll"
    SQUARED = "squared"


@dataclass(frozen=True)
class LossConfig:
    importance_band: tuple = (0.0, 40.0)
    inside_weight: float = 1.0
    outside_weight: float = 0.1
    maec_clip: tuple = (0.0, 20.0)
    loss_kind: LossKind = LossKind.WEIGHTED_LAPLACE_NLL
    weighted: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.importance_band[0] > self.importance_band[1] or self.maec_clip[0] > self.maec_clip[1]:
            raise ValueError("band and clip intervals must be ordered")
        if self.inside_weight <= 0 or self.outside_weight <= 0:
            raise ValueError("weights must be positive")


DEFAULT = LossConfig()


def importance(z, cfg: LossConfig = DEFAULT):
    lo, hi = cfg.importance_band
    z = np.asarray(z, dtype=np.float64)
    out = np.where((z >= lo) & (z <= hi), cfg.inside_weight, cfg.outside_weight)
    return out if out.ndim else float(out)


def loss_weight(p, p_hat, cfg: LossConfig = DEFAULT):
    """max of ``importance`` over [min(p, p_hat), max(p, p_hat)].

    Importance is a two-level step, so the max is the inside weight exactly
    when the interval meets the band.
    """
    lo, hi = cfg.importance_band
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    meets = (np.maximum(p, p_hat) >= lo) & (np.minimum(p, p_hat) <= hi)
    out = np.where(meets, max(cfg.inside_weight, cfg.outside_weight), cfg.outside_weight)
    return out if out.ndim else float(out)


def laplace_nll(p, p_hat, b_hat):
    b_hat = np.asarray(b_hat, dtype=np.float64)
    if np.any(b_hat <= 0):
        raise ValueError("b_hat must be positive")
    out = np.log(b_hat) + np.abs(np.asarray(p, dtype=np.float64) - p_hat) / b_hat
    return out if out.ndim else float(out)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def weighted_loss(p_map, p_hat_map, b_hat_map=None, cfg: LossConfig = DEFAULT) -> float:
    """Mean over voxels of the (weighted) Laplace NLL, or of the squared error in SQUARED mode."""
    if cfg.loss_kind is LossKind.SQUARED:
        _check_shapes(p_map, p_hat_map)
        d = np.asarray(p_map, dtype=np.float64) - p_hat_map
        return float(np.mean(d * d))
    _check_shapes(p_map, p_hat_map, b_hat_map)
    nll = laplace_nll(p_map, p_hat_map, b_hat_map)
    if cfg.weighted:
        nll = nll * loss_weight(p_map, p_hat_map, cfg)
    return float(np.mean(nll))


def loss_and_grads(p, p_hat, log_b, cfg: LossConfig = DEFAULT):
    """Mean loss plus gradients w.r.t. ``p_hat`` and ``log_b``, same shapes as inputs.

    ``log_b`` is the log of the Laplace scale in physical units. The
    subgradient of |p - p_hat| at p == p_hat is 0.
    """
    shape = np.shape(p_hat)
    n = int(np.prod(shape))
    if cfg.loss_kind is LossKind.SQUARED:
        d = np.asarray(p_hat, dtype=np.float64) - p
        return float(np.mean(d * d)), (2.0 * d / n), np.zeros(shape)
    lo, hi = cfg.importance_band
    loss, g_hat, g_logb = kernels.laplace_terms(
        p, p_hat, log_b, lo, hi, cfg.inside_weight, cfg.outside_weight, cfg.weighted
    )
    return float(loss.mean()), (g_hat / n).reshape(shape), (g_logb / n).reshape(shape)


def maec(p_map, p_hat_map, cfg: LossConfig = DEFAULT, mask=None) -> float:
    """Mean absolute error after clipping both maps to ``cfg.maec_clip``."""
    _check_shapes(p_map, p_hat_map)
    lo, hi = cfg.maec_clip
    err = np.abs(np.clip(np.asarray(p_map, dtype=np.float64), lo, hi) - np.clip(np.asarray(p_hat_map, dtype=np.float64), lo, hi))
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(err.mean())


def variance_map(b_hat_map):
    """Laplace variance 2 b^2."""
    b = np.asarray(b_hat_map, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("b_hat must be positive")
    return 2.0 * b * b
