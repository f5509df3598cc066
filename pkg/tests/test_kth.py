import os

import pytest

from subact.descriptor import KTH_GRAPH
from subact.kth import ACTION_LABELS, find_videos, video_accuracy


def test_find_videos_parses_names(tmp_path):
    for name in ("person01_boxing_d1_uncomp.avi", "person22_jogging_d4_uncomp.avi",
                 "person03_flying_d1_uncomp.avi", "readme.txt"):
        (tmp_path / name).write_bytes(b"")
    vids = find_videos(tmp_path)
    assert [(v.person, v.action, v.scenario) for v in vids] == [(1, "boxing", 1), (22, "jogging", 4)]
    assert vids[1].labels == ("jogging", "nothing")


def test_action_labels_fit_graph():
    for loc, gest in ACTION_LABELS.values():
        assert KTH_GRAPH.compatible((loc, gest))


def test_video_accuracy_majority():
    preds = {"a": [("walking", "nothing")] * 3 + [("running", "nothing")] * 2,
             "b": [("stationary", "boxing")] * 2 + [("stationary", "hand-waving")] * 3}
    truth = {"a": ("walking", "nothing"), "b": ("stationary", "boxing")}
    assert video_accuracy(preds, truth) == 0.5


def test_video_accuracy_no_videos():
    with pytest.raises(ValueError):
        video_accuracy({}, {})


@pytest.mark.skipif(not os.environ.get("SUBACT_KTH_ROOT"), reason="SUBACT_KTH_ROOT not set")
def test_kth_data_discoverable():
    vids = find_videos(os.environ["SUBACT_KTH_ROOT"])
    assert len({v.action for v in vids}) == 6
