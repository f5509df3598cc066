import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subact.descriptor import ICVL_GRAPH
from subact.imaging import (AnnotationRecord, BoundingBox, DataError, Frame, FrameSequence,
                            load_sequence, parse_annotations, read_image, to_gray,
                            write_annotations, write_pgm)


def _write_seq(d, frames, fps=15, scene="cam01"):
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_pgm(d / f"{i:06d}.pgm", f)
    (d / "sequence.txt").write_text(f"fps={fps}\nscene={scene}\n")


def test_load_three_identical_frames(tmp_path):
    f = np.full((4, 4), 77, np.uint8)
    _write_seq(tmp_path / "s", [f, f, f])
    seq = load_sequence(tmp_path / "s")
    assert len(seq) == 3
    assert seq.scene_id == "cam01" and seq.fps == 15
    frames = list(seq)
    assert [fr.t for fr in frames] == [0, 1, 2]
    assert all((fr.pixels == 77).all() for fr in frames)


def test_load_640x320(tmp_path):
    _write_seq(tmp_path / "s", [np.zeros((320, 640), np.uint8)] * 2)
    seq = load_sequence(tmp_path / "s")
    assert (seq.width, seq.height) == (640, 320)


def test_empty_directory_reports_no_frames(tmp_path):
    (tmp_path / "e").mkdir()
    with pytest.raises(DataError, match="no frames"):
        load_sequence(tmp_path / "e")


def test_missing_manifest(tmp_path):
    d = tmp_path / "s"
    d.mkdir()
    write_pgm(d / "000000.pgm", np.zeros((4, 4), np.uint8))
    with pytest.raises(DataError, match="manifest"):
        load_sequence(d)


def test_inconsistent_dimensions_name_the_file(tmp_path):
    d = tmp_path / "s"
    _write_seq(d, [np.zeros((4, 4), np.uint8), np.zeros((5, 4), np.uint8)])
    seq = load_sequence(d)
    with pytest.raises(DataError, match="000001.pgm"):
        seq[1]


def test_unreadable_file_names_the_file(tmp_path):
    d = tmp_path / "s"
    _write_seq(d, [np.zeros((4, 4), np.uint8)])
    (d / "000001.pgm").write_bytes(b"garbage")
    seq = load_sequence(d)
    with pytest.raises(DataError, match="000001.pgm"):
        seq[1]


def test_frames_load_lazily(tmp_path):
    calls = []

    def loader(i):
        def f():
            calls.append(i)
            return np.zeros((2, 2), np.uint8)
        return f

    seq = FrameSequence([loader(i) for i in range(5)], 2, 2)
    assert calls == []
    seq[3]
    assert calls == [3]


def test_luma_conversion():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]]], np.uint8)
    assert to_gray(rgb).tolist() == [[(77 * 255) >> 8, (150 * 255) >> 8, (29 * 255) >> 8, 255]]


def test_color_png_is_converted_on_load(tmp_path):
    import cv2
    bgr = np.zeros((2, 2, 3), np.uint8)
    bgr[..., 2] = 200   # red
    cv2.imwrite(str(tmp_path / "c.png"), bgr)
    assert (read_image(tmp_path / "c.png") == (77 * 200) >> 8).all()


def test_frame_rejects_non_2d():
    with pytest.raises(ValueError):
        Frame(np.zeros((2, 2, 3), np.uint8), 0)


def test_box_needs_positive_size():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 5)


def test_parse_single_line(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 7 10 20 30 60 standing walking nothing\n")
    (r,) = parse_annotations(p)
    assert (r.frame, r.track_id) == (0, 7)
    assert r.box == BoundingBox(10, 20, 30, 60)
    assert r.labels == ("standing", "walking", "nothing")


def test_unknown_label_is_named(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 7 10 20 30 60 standing flying nothing\n")
    with pytest.raises(DataError, match="flying"):
        parse_annotations(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 1 1 1 1 1 sitting stationary nothing\n0 2 1 1 x 1 - - -\n")
    with pytest.raises(DataError, match=":2:"):
        parse_annotations(p)


def test_records_sorted_by_frame_then_track(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("1 0 0 0 1 1 - - -\n0 5 0 0 1 1 - - -\n0 2 0 0 1 1 - - -\n")
    assert [(r.frame, r.track_id) for r in parse_annotations(p)] == [(0, 2), (0, 5), (1, 0)]


def test_write_empty_and_single(tmp_path):
    write_annotations([], tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == ""
    rec = AnnotationRecord(3, 1, BoundingBox(1, 2, 3, 4), "sitting", "stationary", "texting")
    write_annotations([rec], tmp_path / "o.txt")
    assert (tmp_path / "o.txt").read_text() == "3 1 1 2 3 4 sitting stationary texting\n"


def test_write_unwritable_path(tmp_path):
    with pytest.raises(DataError):
        write_annotations([], tmp_path / "missing" / "a.txt")


def test_prediction_scores_round_trip(tmp_path):
    rec = AnnotationRecord(0, 0, BoundingBox(0.5, 1, 2, 3), "standing", "walking", "nothing",
                           (0.25, 0.5, 0.125))
    write_annotations([rec], tmp_path / "p.txt")
    assert parse_annotations(tmp_path / "p.txt") == [rec]


_labels = [st.sampled_from(lv.labels + ("-",)) for lv in ICVL_GRAPH.levels]
_record = st.builds(
    lambda f, i, x, y, w, h, p, l, g: AnnotationRecord(f, i, BoundingBox(x, y, w, h), p, l, g),
    st.integers(0, 10_000), st.integers(0, 500),
    st.integers(-50, 1000), st.integers(-50, 1000), st.integers(1, 300), st.integers(1, 300),
    *_labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(_record, max_size=40, unique_by=lambda r: (r.frame, r.track_id)))
def test_write_parse_round_trip(tmp_path_factory, records):
    p = tmp_path_factory.mktemp("rt") / "a.txt"
    write_annotations(records, p)
    back = parse_annotations(p)
    assert back == sorted(records, key=lambda r: (r.frame, r.track_id))
    # writing again is byte-stable
    q = p.with_name("b.txt")
    write_annotations(back, q)
    assert q.read_bytes() == p.read_bytes()


def test_round_trip_1000_records(tmp_path):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(1000):
        labels = [lv.labels[rng.integers(len(lv.labels))] for lv in ICVL_GRAPH.levels]
        recs.append(AnnotationRecord(int(i // 3), int(i % 3),
                                     BoundingBox(*map(int, rng.integers(0, 600, 2)),
                                                 *map(int, rng.integers(1, 200, 2))), *labels))
    write_annotations(recs, tmp_path / "a.txt")
    assert parse_annotations(tmp_path / "a.txt") == recs
