"""Block-circulant oscillation-index SVD deconvolution and the derived target maps."""

from __future__ import annotations

import numpy as np

from . import kernels
from .data import CaseRecord, MapKind, PerfusionMap

DEFAULT_OSCILLATION_LIMIT = 0.095


def concentration(signal, s0: float, te_k: float):
    """-ln(S/s0)/te_k with S clamped to at least 1e-6 * s0."""
    s = np.maximum(np.asarray(signal, dtype=np.float64), 1e-6 * s0)
    return -np.log(s / s0) / te_k


def circulant_system(aif_curve, tr: float):
    """SVD of the length-doubled block-circulant AIF convolution matrix.

    The kernel averages the AIF over each sampling interval, so residue sample
    j stands for the interval [t_j, t_j + tr] and a delay d peaks at floor or
    ceil of d/tr rather than half a frame later.
    """
    aif = np.asarray(aif_curve, dtype=np.float64)
    if tr <= 0:
        raise ValueError("tr must be positive")
    if not np.any(aif):
        raise ValueError("degenerate AIF: all-zero curve")
    n = len(aif)
    L = 2 * n
    padded = np.zeros(L)
    padded[:n] = aif
    padded[1:n + 1] += aif
    padded *= 0.5
    idx = (np.arange(L)[:, None] - np.arange(L)[None, :]) % L
    D = tr * padded[idx]
    U, s, Vt = np.linalg.svd(D)
    if s[0] <= 0:
        raise ValueError("degenerate AIF: zero singular values")
    s_inv = np.where(s > s[0] * 1e-12, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return U, s_inv, Vt.T


def osvd_deconvolve_many(tissue_curves, aif_curve, tr: float,
                         oscillation_limit: float = DEFAULT_OSCILLATION_LIMIT):
    """Deconvolve each row of ``tissue_curves`` (n, T); returns residues (n, T)."""
    tissue = np.atleast_2d(np.asarray(tissue_curves, dtype=np.float64))
    n, T = tissue.shape
    if T != len(aif_curve):
        raise ValueError(f"tissue length {T} != AIF length {len(aif_curve)}")
    U, s_inv, V = circulant_system(aif_curve, tr)
    proj = tissue @ U[:T, :]  # zero padding: only the first T rows of U contribute
    n_keep = int(np.count_nonzero(s_inv))
    residues, _ = kernels.osvd_residues(V, s_inv, proj, oscillation_limit, n_keep)
    return residues[:, :T]


def osvd_deconvolve(tissue_curve, aif_curve, tr: float, oscillation_limit: float = DEFAULT_OSCILLATION_LIMIT):
    tissue_curve = np.asarray(tissue_curve, dtype=np.float64)
    if tissue_curve.shape != np.shape(aif_curve):
        raise ValueError("tissue and AIF curves must have the same length")
    return osvd_deconvolve_many(tissue_curve[None, :], aif_curve, tr, oscillation_limit)[0]


def oracle_target_maps(case: CaseRecord, aif_curve, tr: float,
                       oscillation_limit: float = DEFAULT_OSCILLATION_LIMIT,
                       s0: float = 100.0, te_k: float = 1.0, brain_fraction: float = 0.5) -> dict:
    """TMAX, TTP and RBF maps from oSVD on each voxel of ``case``.

    Voxels whose median signal is below ``brain_fraction * s0`` are treated
    as background and get 0 in every map.
    """
    data = case.sequence.data.astype(np.float64)
    T = data.shape[0]
    spatial = data.shape[1:]
    flat = data.reshape(T, -1)
    brain = np.median(flat, axis=0) >= brain_fraction * s0
    conc = concentration(flat[:, brain], s0, te_k).T  # (n, T)
    residues = osvd_deconvolve_many(conc, aif_curve, tr, oscillation_limit)
    maps = {}
    for kind, values in (
        (MapKind.TMAX, tr * np.argmax(residues, axis=1)),
        (MapKind.TTP, tr * np.argmax(conc, axis=1)),
        (MapKind.RBF, residues.max(axis=1)),
    ):
        out = np.zeros(flat.shape[1])
        out[brain] = values
        maps[kind] = PerfusionMap(out.reshape(spatial), kind)
    return maps
