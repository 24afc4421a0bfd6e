import numpy as np
import pytest
from PIL import Image

from synperf.panels import emit_panels, panel_rows, window


def test_window_top_and_bottom():
    assert window(np.array([20.0, 0.0, 35.0, -3.0, 10.0]), 0, 20).tolist() == [255, 0, 255, 0, 128]


def test_emit_three_panels(tmp_path):
    rng = np.random.default_rng(0)
    target = rng.uniform(0, 30, (2, 6, 7))
    target[1, 2, 3] = 20.0
    pred = rng.uniform(0, 30, (2, 6, 7))
    b = rng.uniform(0.1, 2, (2, 6, 7))
    var = 2 * b**2
    path = emit_panels(target, pred, var, tmp_path / "p.png", slices=[1])
    img = np.asarray(Image.open(path))
    assert img.shape == (6, 21)
    t_panel, p_panel, v_panel = img[:, :7], img[:, 7:14], img[:, 14:]
    assert t_panel[2, 3] == 255
    assert np.array_equal(p_panel, window(pred[1], 0, 20))
    assert np.array_equal(v_panel, window(2 * b[1] ** 2, 0, var[1].max()))


def test_all_slices_stack_vertically():
    x = np.zeros((3, 4, 5))
    assert panel_rows(x, x, x + 1).shape == (12, 15)


def test_bad_inputs():
    x = np.zeros((2, 4, 5))
    with pytest.raises(ValueError):
        panel_rows(x, x[:, :3], x)
    with pytest.raises(ValueError):
        panel_rows(x, x, x, slices=[2])
