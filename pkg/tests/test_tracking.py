import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subact.evaluation import iou
from subact.imaging import BoundingBox
from subact.person_detection import Detection
from subact.tracking import (KalmanParams, TrackSet, associate, kalman_predict, kalman_update,
                             new_track, track_step)

B = BoundingBox


def det(x, y, w=20, h=40, s=1.0):
    return Detection(B(x, y, w, h), s)


def test_new_track_predicts_in_place():
    t = new_track(0, det(10, 10), KalmanParams())
    assert kalman_predict(t) == B(10, 10, 20, 40)


def test_predict_follows_velocity():
    t = new_track(0, det(0, 0), KalmanParams())
    t.x[4:] = [3.0, -1.0]
    b = kalman_predict(t)
    assert (b.x, b.y) == (3.0, -1.0)


def test_update_moves_toward_measurement():
    t = new_track(0, det(0, 0), KalmanParams())
    kalman_predict(t)
    kalman_update(t, B(10, 0, 20, 40))
    assert 0 < t.box.x < 10


def _greedy_oracle(tb, db, gate):
    """Repeatedly take the largest remaining IoU entry of the matrix."""
    m = np.array([[iou(a, b) for b in db] for a in tb]).reshape(len(tb), len(db))
    pairs = []
    while m.size and m.max() >= gate and m.max() > 0:
        i, j = np.unravel_index(np.argmax(m), m.shape)      # first maximum in row-major order
        pairs.append((int(i), int(j)))
        m[i, :] = -1
        m[:, j] = -1
    return sorted(pairs)


_box = st.builds(B, st.integers(0, 30), st.integers(0, 30), st.integers(5, 20), st.integers(5, 20))


@settings(max_examples=200, deadline=None)
@given(st.lists(_box, max_size=5), st.lists(_box, max_size=5))
def test_associate_matches_greedy_oracle(tb, db):
    pairs, lost, fresh = associate(tb, db, 0.3)
    assert sorted(pairs) == _greedy_oracle(tb, db, 0.3)
    assert sorted(lost + [i for i, _ in pairs]) == list(range(len(tb)))
    assert sorted(fresh + [j for _, j in pairs]) == list(range(len(db)))


def test_associate_equals_optimal_assignment_when_unambiguous():
    # three well separated people: the greedy result equals the best of all 3! assignments
    rng = np.random.default_rng(0)
    for _ in range(50):
        tracks = [B(100 * k + rng.integers(0, 10), rng.integers(0, 10), 30, 60) for k in range(3)]
        dets = [B(b.x + rng.integers(-5, 6), b.y + rng.integers(-5, 6), 30, 60) for b in tracks]
        order = rng.permutation(3)
        dets = [dets[k] for k in order]
        best = max(itertools.permutations(range(3)),
                   key=lambda p: sum(iou(tracks[i], dets[p[i]]) for i in range(3)))
        pairs, _, _ = associate(tracks, dets)
        assert sorted(pairs) == [(i, best[i]) for i in range(3)]


def test_gate_blocks_weak_overlap():
    pairs, lost, fresh = associate([B(0, 0, 10, 10)], [B(8, 0, 10, 10)], 0.3)
    assert pairs == [] and lost == [0] and fresh == [0]


def test_coasting_track_deleted_after_n_skip_plus_one_misses():
    ts = TrackSet(n_skip=15)
    track_step(ts, [det(10, 10)])
    for k in range(15):
        track_step(ts, [])
        assert len(ts.tracks) == 1
    track_step(ts, [])
    assert ts.tracks == []


def test_covariance_grows_while_coasting():
    ts = TrackSet()
    track_step(ts, [det(10, 10)])
    traces = []
    for _ in range(10):
        track_step(ts, [])
        traces.append(np.trace(ts.tracks[0].P))
    assert all(b >= a for a, b in zip(traces, traces[1:]))


def test_ids_kept_and_never_reused():
    ts = TrackSet(n_skip=2)
    seen = []
    for t in range(20):
        track_step(ts, [det(10 + 2 * t, 10)])
        seen.append(ts.tracks[0].id)
    assert set(seen) == {0}
    for _ in range(3):
        track_step(ts, [])
    assert ts.tracks == []
    track_step(ts, [det(10, 10)])
    assert ts.tracks[0].id == 1


def test_constant_velocity_converges():
    ts = TrackSet()
    for t in range(31):
        track_step(ts, [det(5 + 3 * t, 20 + 1 * t)])
    tr = ts.tracks[0]
    kalman_predict(tr, ts.params)
    b = tr.box
    assert abs(b.x - (5 + 3 * 31)) < 0.5 and abs(b.y - (20 + 31)) < 0.5


def test_two_crossing_tracks_keep_identity_when_separated_vertically():
    ts = TrackSet()
    for t in range(25):
        track_step(ts, [det(10 + 4 * t, 10), det(110 - 4 * t, 80)])
    by_id = {tr.id: tr.box for tr in ts.tracks}
    assert len(by_id) == 2
    assert by_id[0].y < by_id[1].y


def test_detection_attached_only_when_matched():
    ts = TrackSet()
    track_step(ts, [det(10, 10)])
    assert ts.tracks[0].detection is not None
    track_step(ts, [])
    assert ts.tracks[0].detection is None
