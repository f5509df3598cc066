import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subact.motion_saliency import (background_image, gmm_step, init_gmm, mini_motion_map,
                                    minimap_shape)


def _noisy(rng, base, sd=2.0):
    return np.clip(base + rng.normal(0, sd, base.shape), 0, 255).astype(np.uint8)


def test_first_frame_initializes_to_background():
    f = np.random.default_rng(0).integers(0, 256, (12, 9)).astype(np.uint8)
    st_ = init_gmm(f)
    assert (background_image(st_).pixels == f).all()
    assert gmm_step(st_, f).pixels.max() == 0


def test_constant_scene_is_background_after_warmup():
    f = np.full((16, 16), 100, np.uint8)
    s = init_gmm(f)
    for _ in range(50):
        m = gmm_step(s, f)
    assert m.pixels.max() == 0
    assert (background_image(s).pixels == 100).all()


def test_static_scene_converges_to_empty_mask():
    rng = np.random.default_rng(1)
    base = rng.uniform(40, 200, (24, 24))
    s = init_gmm(_noisy(rng, base))
    for _ in range(200):
        m = gmm_step(s, _noisy(rng, base))
    assert int((m.pixels > 0).sum()) == 0


def test_weights_sum_to_one_and_sorted():
    rng = np.random.default_rng(2)
    s = init_gmm(rng.integers(0, 256, (10, 10)).astype(np.uint8))
    for _ in range(60):
        gmm_step(s, rng.integers(0, 256, (10, 10)).astype(np.uint8))
        np.testing.assert_allclose(s.weight.sum(-1), 1.0, atol=1e-6)
        assert (s.var > 0).all()
        key = s.weight / np.sqrt(s.var)
        assert (np.diff(key, axis=-1) <= 1e-6).all()


def test_jumping_block_matches_two_frame_difference():
    """Fresh, unabsorbed jumps: foreground = current block plus vacated block."""
    h, w = 60, 80
    bg = np.full((h, w), 100, np.uint8)
    s = init_gmm(bg)
    for _ in range(60):
        gmm_step(s, bg)
    positions = [(5, 5), (30, 40), (10, 55), (35, 10)]
    prev = bg
    for (y, x) in positions:
        f = bg.copy()
        f[y:y + 20, x:x + 20] = 220
        m = gmm_step(s, f).pixels > 0
        # two-frame-difference oracle, taken against the background-only frames
        oracle = (f != bg) | (prev != bg)
        cur_block = f != bg
        assert (m[cur_block]).all()                      # current block found
        assert not m[~oracle].any()                      # nothing outside the oracle
        prev = f


def test_mostly_constant_pixel_keeps_dominant_background():
    rng = np.random.default_rng(3)
    s = init_gmm(np.full((8, 8), 100, np.uint8))
    for i in range(500):
        v = 200 if rng.random() < 0.1 else 100
        gmm_step(s, np.full((8, 8), v, np.uint8))
    assert (np.abs(background_image(s).pixels.astype(int) - 100) <= 1).all()


def test_dimension_mismatch():
    s = init_gmm(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        gmm_step(s, np.zeros((4, 5), np.uint8))


def test_minimap_fencepost_shape():
    assert minimap_shape((640, 360)) == (73, 30)
    mm = mini_motion_map(np.zeros((360, 640), np.uint8))
    assert (mm.cols, mm.rows) == (73, 30)
    assert not mm.cells.any()


def test_minimap_window_larger_than_frame():
    with pytest.raises(ValueError):
        mini_motion_map(np.zeros((100, 60), np.uint8))


def _brute_minimap(mask, window, stride, min_fg):
    (ww, wh), (sx, sy) = window, stride
    fh, fw = mask.shape
    rows, cols = (fh - wh) // sy + 1, (fw - ww) // sx + 1
    out = np.zeros((rows, cols), bool)
    for r in range(rows):
        for c in range(cols):
            out[r, c] = (mask[r * sy:r * sy + wh, c * sx:c * sx + ww] > 0).sum() >= min_fg
    return out


def test_single_pixel_marks_covering_windows():
    mask = np.zeros((40, 30), np.uint8)
    mask[0, 0] = 255
    mm = mini_motion_map(mask, (8, 16), (2, 2), min_fg_pixels=1)
    assert (mm.cells == _brute_minimap(mask, (8, 16), (2, 2), 1)).all()
    assert mm.cells.sum() == 1 and mm.cells[0, 0]


@settings(max_examples=80, deadline=None)
@given(st.integers(8, 64), st.integers(8, 64), st.integers(1, 8), st.integers(1, 8),
       st.integers(1, 4), st.integers(1, 4), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_minimap_equals_brute_force(fh, fw, ww, wh, sx, sy, min_fg, seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((fh, fw)) < rng.random()).astype(np.uint8) * 255
    mm = mini_motion_map(mask, (ww, wh), (sx, sy), min_fg)
    assert (mm.cells == _brute_minimap(mask, (ww, wh), (sx, sy), min_fg)).all()
