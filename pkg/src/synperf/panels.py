"""Target | prediction | variance raster panels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TMAX_WINDOW = (0.0, 20.0)


def window(x, lo, hi) -> np.ndarray:
    """Linear map of [lo, hi] onto 0..255, clipped."""
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo if hi > lo else 1.0
    return np.round(np.clip((x - lo) / span, 0.0, 1.0) * 255.0).astype(np.uint8)


def panel_rows(target, prediction, variance, slices=None, map_window=TMAX_WINDOW, variance_window=None) -> np.ndarray:
    """uint8 image with one row of three panels per selected slice.

    ``target``/``prediction``/``variance`` are (slices, rows, cols). The
    variance window defaults to [0, max variance over the selected slices].
    """
    target, prediction, variance = (np.asarray(a, dtype=np.float64) for a in (target, prediction, variance))
    if not (target.shape == prediction.shape == variance.shape) or target.ndim != 3:
        raise ValueError(f"map shapes differ or are not 3-d: {target.shape}, {prediction.shape}, {variance.shape}")
    slices = list(range(target.shape[0])) if slices is None else [int(s) for s in slices]
    if not slices or any(not (0 <= s < target.shape[0]) for s in slices):
        raise ValueError(f"slices {slices} out of range for {target.shape[0]} slices")
    if variance_window is None:
        vmax = float(variance[slices].max())
        variance_window = (0.0, vmax if vmax > 0 else 1.0)
    rows = []
    for s in slices:
        rows.append(np.concatenate([
            window(target[s], *map_window),
            window(prediction[s], *map_window),
            window(variance[s], *variance_window),
        ], axis=1))
    return np.concatenate(rows, axis=0)


def emit_panels(target, prediction, variance, out_path, slices=None, map_window=TMAX_WINDOW,
                variance_window=None) -> Path:
    """Write the panel image as an 8-bit grayscale PNG."""
    img = panel_rows(target, prediction, variance, slices, map_window, variance_window)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path)
    return out_path
