"""KTH human-action protocol: fixed person splits, full-frame classification
(no detector or tracker) and video-level majority voting.

Videos are the standard ``personNN_<action>_dN_uncomp.avi`` files, or
directories of frames with the same stem and a ``sequence.txt``.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

from . import cnn, descriptor as desc
from .config import PipelineConfig
from .imaging import AnnotationRecord, BoundingBox, DataError, FrameSequence, load_sequence
from .pipeline import MotionFeatures, _train_net, collect_samples
from .temporal_features import crop_patches

TRAIN_PERSONS = (11, 12, 13, 14, 15, 16, 17, 18)
VALIDATION_PERSONS = (1, 4, 19, 20, 21, 23, 24, 25)
TEST_PERSONS = (2, 3, 5, 6, 7, 8, 9, 10, 22)

# action -> (locomotion, gesture)
ACTION_LABELS = {
    "boxing": ("stationary", "boxing"),
    "handclapping": ("stationary", "hand-clapping"),
    "handwaving": ("stationary", "hand-waving"),
    "jogging": ("jogging", "nothing"),
    "running": ("running", "nothing"),
    "walking": ("walking", "nothing"),
}

_NAME = re.compile(r"person(\d+)_([a-z]+)_d(\d+)")


@dataclass(frozen=True)
class KthVideo:
    path: Path
    person: int
    action: str
    scenario: int

    @property
    def labels(self) -> tuple[str, str]:
        return ACTION_LABELS[self.action]


def find_videos(root: str | Path) -> list[KthVideo]:
    out = []
    for p in sorted(Path(root).rglob("person*")):
        m = _NAME.match(p.name)
        if not m or m.group(2) not in ACTION_LABELS:
            continue
        if p.is_file() and p.suffix.lower() == ".avi" or p.is_dir() and (p / "sequence.txt").exists():
            out.append(KthVideo(p, int(m.group(1)), m.group(2), int(m.group(3))))
    return out


def read_video(path: str | Path, fps: float = 25.0) -> FrameSequence:
    path = Path(path)
    if path.is_dir():
        return load_sequence(path)
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DataError(f"{path}: cannot open video")
    frames = []
    while True:
        ok, img = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2GRAY) if img.ndim == 3 else img)
    cap.release()
    if not frames:
        raise DataError(f"{path}: no frames")
    return FrameSequence.from_arrays(frames, fps, path.stem)


def _full_frame_records(seq: FrameSequence, labels: Sequence[str]) -> list[AnnotationRecord]:
    box = BoundingBox(0, 0, seq.width, seq.height)
    return [AnnotationRecord(t, 0, box, "-", labels[0], labels[1]) for t in range(len(seq))]


@dataclass
class KthResult:
    accuracy: float
    per_video: list[tuple[str, tuple[str, ...], tuple[str, ...]]]   # (name, predicted, truth)


def classify_video(cfg: PipelineConfig, nets: dict[str, cnn.Network], seq: FrameSequence,
                   graph: desc.DescriptorGraph = desc.KTH_GRAPH) -> tuple[str, ...]:
    """Per-frame full-frame predictions, reduced by majority vote."""
    mf = MotionFeatures(cfg)
    box = [BoundingBox(0, 0, seq.width, seq.height)]
    per_frame = []
    for frame in seq:
        mf.update(frame)
        patches = crop_patches(mf.feat, box, cfg["feat.pad"])
        raw = desc.classify(nets, patches, graph)[0]
        per_frame.append(desc.resolve_conflicts(raw, graph, None, None).labels)
    return desc.video_majority_label(per_frame)


def run_kth(cfg: PipelineConfig, root: str | Path, train_persons=TRAIN_PERSONS,
            test_persons=TEST_PERSONS, log: Callable[[str], None] = lambda s: None) -> KthResult:
    """Train per-level networks on ``train_persons`` and report video accuracy
    on ``test_persons``; a video counts as correct only if every level is."""
    graph = desc.KTH_GRAPH
    videos = find_videos(root)
    if not videos:
        raise DataError(f"{root}: no KTH videos found")
    train = [v for v in videos if v.person in train_persons]
    test = [v for v in videos if v.person in test_persons]
    if not train or not test:
        raise DataError(f"{root}: train or test split is empty")
    log(f"KTH: {len(train)} training videos, {len(test)} test videos")
    items = []
    for v in train:
        seq = read_video(v.path)
        items.append((seq, _full_frame_records(seq, v.labels)))
    samples = collect_samples(items, cfg, graph)
    nets = {}
    for k, lv in enumerate(graph.levels):
        x = samples.stack(desc.LEVEL_FEATURE[lv.name])
        y = np.array([lv.index(l[k]) for l in samples.labels])
        log(f"training {lv.name} CNN on {len(x)} patches")
        nets[lv.name] = _train_net(x, y, len(lv.labels), cfg, cfg["train.seed"] + k)
    per_video = []
    for v in test:
        pred = classify_video(cfg, nets, read_video(v.path), graph)
        per_video.append((v.path.stem, pred, v.labels))
    acc = float(np.mean([p == t for _, p, t in per_video]))
    return KthResult(acc, per_video)


def video_accuracy(pred_by_video: dict[str, Sequence[Sequence[str]]],
                   truth_by_video: dict[str, Sequence[str]]) -> float:
    """Majority-vote video accuracy from per-frame label tuples."""
    if not truth_by_video:
        raise ValueError("no videos")
    hits = 0
    for name, truth in truth_by_video.items():
        frames = pred_by_video.get(name)
        if frames:
            hits += desc.video_majority_label(frames) == tuple(truth)
    return hits / len(truth_by_video)
