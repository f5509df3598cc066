import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.feature import hog

from subact import person_detection as pd
from subact.evaluation import iou
from subact.imaging import AnnotationRecord, BoundingBox
from subact.modelio import ModelFormatError
from subact.motion_saliency import mini_motion_map
from subact.synth import ActorScript, SynthScenario, synth_generate


def skimage_hog(img):
    return hog(img, orientations=9, pixels_per_cell=(8, 8), cells_per_block=(2, 2),
               block_norm="L2-Hys", feature_vector=True)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (128, 64)))
def test_hog_matches_skimage_uint8(img):
    np.testing.assert_allclose(pd.hog_descriptor(img), skimage_hog(img), rtol=0, atol=1e-12)


def test_hog_matches_skimage_float():
    img = np.random.default_rng(0).random((128, 64)) * 255
    np.testing.assert_allclose(pd.hog_descriptor(img), skimage_hog(img), rtol=0, atol=1e-12)


def test_hog_length_and_constant_patch():
    v = pd.hog_descriptor(np.full((128, 64), 77, np.uint8))
    assert v.shape == (3780,) and not v.any()


def test_hog_wrong_shape():
    with pytest.raises(ValueError):
        pd.hog_descriptor(np.zeros((64, 128), np.uint8))


def test_vertical_edge_lands_in_first_bin():
    img = np.zeros((128, 64), np.uint8)
    img[:, 32:] = 200                       # horizontal gradient, orientation 0 degrees
    cells = pd.cell_histograms(img)
    edge = cells[:, 3]                       # cells covering the step at x = 31/32
    assert (edge[:, 0] > 0).all() and not edge[:, 1:].any()


def test_cell_shift_permutes_histograms():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (128, 80)).astype(np.uint8)
    a = pd.cell_histograms(img[:, 8:72])
    b = pd.cell_histograms(img[:, 16:80])
    # interior cells (away from the image border where gradients are zeroed)
    np.testing.assert_array_equal(a[1:-1, 2:-1], b[1:-1, 1:-2])


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (128, 64)))
def test_blocks_have_bounded_norm(img):
    blocks = pd.normalized_blocks(pd.cell_histograms(img))
    norms = np.sqrt((blocks ** 2).sum(axis=(2, 3, 4)))
    assert (norms <= 1 + 1e-9).all()
    assert (blocks >= 0).all()


def test_window_scores_equal_explicit_dot_products():
    # dense scanning shares whole-image gradients, so each window's feature
    # vector is a 15x7 slice of the image-wide block grid
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (160, 96)).astype(np.uint8)
    model = pd.SvmModel(rng.normal(size=3780), 0.3)
    s = pd.window_scores(img, model)
    assert s.shape == (5, 5)
    blocks = pd.normalized_blocks(pd.cell_histograms(img))
    for r in range(5):
        for c in range(5):
            want = model.decision(blocks[r:r + 15, c:c + 7].ravel())
            assert s[r, c] == pytest.approx(want, abs=1e-9)
    sub = pd.window_scores(img, model, rows=(1, 3), cols=(2, 4))
    np.testing.assert_allclose(sub, s[1:3, 2:4], atol=1e-9)


def test_first_window_matches_cropped_hog_inside_border():
    # on an image exactly one window in size the two paths coincide
    img = np.random.default_rng(5).integers(0, 256, (128, 64)).astype(np.uint8)
    model = pd.SvmModel(np.random.default_rng(6).normal(size=3780), 0.0)
    assert pd.window_scores(img, model)[0, 0] == pytest.approx(model.decision(pd.hog_descriptor(img)), abs=1e-9)


def test_svm_one_dimensional():
    m = pd.train_svm([[2.0], [3.0], [1.5]], [[-1.0], [-2.5], [-0.5]])
    assert m.weights[0] > 0
    assert (np.sign(m.decision(np.array([[1.0], [-1.0]]))) == [1, -1]).all()
    assert m.train_accuracy == 1.0


def test_svm_flipped_labels_negate():
    rng = np.random.default_rng(3)
    pos = rng.normal(1, 1, (40, 5))
    neg = rng.normal(-1, 1, (40, 5))
    a = pd.train_svm(pos, neg, C=1.0, tol=1e-8, max_epochs=5000)
    b = pd.train_svm(neg, pos, C=1.0, tol=1e-8, max_epochs=5000)
    np.testing.assert_allclose(a.weights, -b.weights, atol=1e-4)
    assert a.bias == pytest.approx(-b.bias, abs=1e-4)


def test_svm_degenerate_inputs():
    with pytest.raises(ValueError, match="degenerate"):
        pd.train_svm([[1.0, 2.0]], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        pd.train_svm(np.zeros((0, 2)), [[1.0, 2.0]])
    with pytest.raises(ValueError):
        pd.train_svm([[1.0]], [[0.0]], C=0)


def test_svm_round_trip(tmp_path):
    m = pd.SvmModel(np.random.default_rng(4).normal(size=3780), -0.25, 10.0)
    pd.save_svm(m, tmp_path / "d.bin")
    back = pd.load_svm(tmp_path / "d.bin")
    np.testing.assert_allclose(back.weights, m.weights, rtol=1e-6)
    assert back.bias == pytest.approx(-0.25) and back.C == pytest.approx(10.0)


def test_svm_load_rejects_cnn_file(tmp_path):
    from subact import cnn
    cnn.save_model(cnn.init_network(3), tmp_path / "c.bin")
    with pytest.raises(ModelFormatError):
        pd.load_svm(tmp_path / "c.bin")


def test_svm_holdout_accuracy(detector_data):
    (pos_tr, neg_tr), (pos_te, neg_te) = detector_data
    m = pd.train_svm(pos_tr, neg_tr)
    acc = np.mean(np.concatenate([m.decision(pos_te) > 0, m.decision(neg_te) <= 0]))
    assert acc >= 0.95


_dets = st.lists(st.builds(pd.Detection,
                           st.builds(BoundingBox, st.integers(0, 40), st.integers(0, 40),
                                     st.integers(1, 30), st.integers(1, 30)),
                           st.floats(-5, 5)), max_size=25)


@settings(max_examples=100, deadline=None)
@given(_dets)
def test_nms_is_antichain_covering_input(dets):
    keep = pd.nms(dets, 0.45)
    for i, a in enumerate(keep):
        for b in keep[i + 1:]:
            assert iou(a.box, b.box) <= 0.45
    # every suppressed detection overlaps a kept one that scores at least as high
    for d in dets:
        if d not in keep:
            assert any(iou(d.box, k.box) > 0.45 and k.score >= d.score for k in keep)


def _scene(actors, duration=40, seed=0):
    scn = SynthScenario(320, 240, duration, 4.0, actors)
    return synth_generate(scn, seed)


def _masks(seq):
    from subact.motion_saliency import gmm_step, init_gmm
    state = init_gmm(seq[0])
    return [gmm_step(state, f) for f in seq]


def test_no_motion_no_detections(detector):
    seq, _ = _scene([ActorScript(100, 60)])
    mm = mini_motion_map(np.zeros((240, 320), np.uint8))
    assert pd.detect(seq[5], mm, detector) == []


def _detections_over_walk(detector, actors, use_mask=True):
    seq, recs = _scene(actors)
    masks = _masks(seq)
    out = []
    for t in range(20, 40):
        mm = mini_motion_map(masks[t])
        dets = pd.detect(seq[t], mm, detector, mask=masks[t] if use_mask else None)
        gts = [r.box for r in recs if r.frame == t]
        out.append((dets, gts))
    return out


def test_single_walker_one_detection(detector):
    runs = _detections_over_walk(detector, [ActorScript(60, 70, velocity=(2.0, 0.0), enter=0)])
    good = sum(len(d) == 1 and iou(d[0].box, g[0]) >= 0.5 for d, g in runs)
    assert good >= 0.9 * len(runs)


def test_two_walkers_two_detections(detector):
    actors = [ActorScript(20, 20, velocity=(2.0, 0.0), lane=(0, 150)),
              ActorScript(200, 110, velocity=(-2.0, 0.0), lane=(170, 320), shade=60)]
    runs = _detections_over_walk(detector, actors)
    good = 0
    for dets, gts in runs:
        hit = [any(iou(d.box, g) >= 0.5 for d in dets) for g in gts]
        good += len(dets) == 2 and all(hit)
    assert good >= 0.9 * len(runs)


def test_gated_detections_subset_of_ungated(detector):
    seq, _ = _scene([ActorScript(60, 70, velocity=(2.0, 0.0))])
    masks = _masks(seq)
    t = 30
    full = mini_motion_map(np.full((240, 320), 255, np.uint8))
    partial = mini_motion_map(masks[t])
    everywhere = pd.detect(seq[t], full, detector, nms_iou=1.0)
    gated = pd.detect(seq[t], partial, detector, nms_iou=1.0)
    boxes = {d.box for d in everywhere}
    assert gated and all(d.box in boxes for d in gated)


def test_detect_geometry_mismatch(detector):
    mm = mini_motion_map(np.zeros((240, 320), np.uint8))
    with pytest.raises(ValueError):
        pd.detect(np.zeros((200, 320), np.uint8), mm, detector)


def test_oracle_detect():
    recs = [AnnotationRecord(3, 1, BoundingBox(1, 2, 3, 4), "standing", "walking", "nothing"),
            AnnotationRecord(4, 1, BoundingBox(2, 2, 3, 4), "standing", "walking", "nothing")]
    dets = pd.oracle_detect(recs, 3)
    assert dets == [pd.Detection(BoundingBox(1, 2, 3, 4), 1.0)]
