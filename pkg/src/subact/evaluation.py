"""Detection metrics (frame-AP, video-AP), confusion matrices and the
per-stage timing report.

A scored detection carries a single class label. Multi-level predictions are
scored per class by emitting one entry per level (see ``per_level_detections``
in the pipeline), so each sub-action class gets its own AP.
"""

from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .imaging import BoundingBox

# sub-action classes scored on ICVL-style data ("others" only serves as negatives)
ICVL_CLASSES = ("sitting", "standing", "stationary", "walking", "running",
                "nothing", "texting", "smoking")

REFERENCE_FOOTER = ("reference (published, ICVL test set): frame-mAP 76.6%, video-mAP 83.5%; "
                    "KTH video accuracy 96.3%; 41.83 ms/frame on an i7-3770")

STAGES = ("motion detection", "detector", "tracker", "BDI", "MHI", "WAI",
          "CNNs", "post-processing", "others")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(inter / (a.area + b.area - inter), 1.0)


@dataclass(frozen=True)
class ScoredDetection:
    frame: int
    box: BoundingBox
    label: str
    confidence: float

    def __post_init__(self):
        if not self.confidence >= 0:
            raise ValueError(f"confidence must be non-negative, got {self.confidence}")


@dataclass(frozen=True)
class GroundTruthBox:
    frame: int
    box: BoundingBox
    label: str


@dataclass
class GroundTruthTube:
    track_id: int
    boxes: dict[int, BoundingBox]
    labels: dict[int, str]

    def __post_init__(self):
        if set(self.boxes) != set(self.labels):
            raise ValueError("tube boxes and labels must cover the same frames")


@dataclass
class PredictedTrack:
    track_id: int
    boxes: dict[int, BoundingBox]
    labels: dict[int, str]
    confidences: dict[int, float]


@dataclass
class APResult:
    per_class: dict[str, float]
    skipped: list[str] = field(default_factory=list)   # classes without ground truth

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else 0.0


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP of a ranked list of hit/miss flags."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _rank(items, key):
    # stable: equal confidences keep input order
    return sorted(items, key=lambda d: -key(d))


def _class_list(labels: Iterable[str], classes: Sequence[str] | None) -> list[str]:
    return list(classes) if classes is not None else sorted(set(labels))


def frame_ap(detections: Sequence[ScoredDetection], ground_truth: Sequence[GroundTruthBox],
             sigma: float = 0.5, classes: Sequence[str] | None = None) -> APResult:
    """Per-class AP: a detection is a hit if it overlaps an unmatched same-class
    ground-truth box in its frame with IoU > ``sigma``; the best such box wins."""
    classes = _class_list([g.label for g in ground_truth], classes)
    result = APResult({})
    for c in classes:
        gts = [g for g in ground_truth if g.label == c]
        if not gts:
            result.skipped.append(c)
            continue
        by_frame: dict[int, list[int]] = defaultdict(list)
        for i, g in enumerate(gts):
            by_frame[g.frame].append(i)
        used = [False] * len(gts)
        tp = []
        for d in _rank([d for d in detections if d.label == c], lambda d: d.confidence):
            best, best_iou = -1, sigma
            for i in by_frame.get(d.frame, ()):
                if not used[i]:
                    v = iou(d.box, gts[i].box)
                    if v > best_iou:
                        best, best_iou = i, v
            if best >= 0:
                used[best] = True
            tp.append(best >= 0)
        result.per_class[c] = average_precision(tp, len(gts))
    return result


def _span(frames: Iterable[int]) -> set[int]:
    fs = list(frames)
    return set(range(min(fs), max(fs) + 1)) if fs else set()


def tube_overlap(track_boxes: Mapping[int, BoundingBox], tube_boxes: Mapping[int, BoundingBox],
                 sigma: float = 0.5) -> float:
    """Frames where both exist and IoU > sigma, over the union of the two frame spans."""
    union = _span(track_boxes) | _span(tube_boxes)
    if not union:
        return 0.0
    good = sum(1 for f in track_boxes.keys() & tube_boxes.keys()
               if iou(track_boxes[f], tube_boxes[f]) > sigma)
    return good / len(union)


def _restrict(boxes, labels, c):
    return {f: b for f, b in boxes.items() if labels[f] == c}


def video_ap(tracks: Sequence[PredictedTrack], tubes: Sequence[GroundTruthTube],
             sigma: float = 0.5, tau: float = 0.5, classes: Sequence[str] | None = None) -> APResult:
    """Per-class AP over tracks. For class c each track and tube is restricted
    to its frames labelled c; a track hits the best unmatched tube whose
    overlap (see ``tube_overlap``) exceeds ``tau``. Track confidence is the
    mean confidence over its class-c frames."""
    classes = _class_list([l for t in tubes for l in t.labels.values()], classes)
    result = APResult({})
    for c in classes:
        gt = [b for b in (_restrict(t.boxes, t.labels, c) for t in tubes) if b]
        if not gt:
            result.skipped.append(c)
            continue
        cand = []
        for t in tracks:
            boxes = _restrict(t.boxes, t.labels, c)
            if boxes:
                cand.append((boxes, float(np.mean([t.confidences[f] for f in boxes]))))
        used = [False] * len(gt)
        tp = []
        for boxes, _ in _rank(cand, lambda x: x[1]):
            best, best_ov = -1, tau
            for i, g in enumerate(gt):
                if not used[i]:
                    ov = tube_overlap(boxes, g, sigma)
                    if ov > best_ov:
                        best, best_ov = i, ov
            if best >= 0:
                used[best] = True
            tp.append(best >= 0)
        result.per_class[c] = average_precision(tp, len(gt))
    return result


def confusion_matrix(predicted: Sequence[str], truth: Sequence[str],
                     labels: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Row-normalised matrix (rows = truth, columns = prediction) and the
    labels whose rows are empty and left as zeros."""
    if len(predicted) != len(truth):
        raise ValueError("predicted and ground-truth label lists differ in length")
    index = {l: i for i, l in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)))
    for p, t in zip(predicted, truth):
        if t in index and p in index:
            m[index[t], index[p]] += 1
    sums = m.sum(axis=1, keepdims=True)
    empty = [labels[i] for i in np.nonzero(sums[:, 0] == 0)[0]]
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0), empty


def format_matrix_csv(m: np.ndarray, labels: Sequence[str]) -> str:
    rows = ["," + ",".join(labels)]
    rows += [f"{l}," + ",".join(f"{v:.4f}" for v in row) for l, row in zip(labels, m)]
    return "\n".join(rows) + "\n"


def metrics_csv(frame: APResult, video: APResult | None, classes: Sequence[str]) -> str:
    def fmt(r, c):
        return f"{r.per_class[c]:.4f}" if r is not None and c in r.per_class else ""
    lines = ["class,frame_ap,video_ap"]
    lines += [f"{c},{fmt(frame, c)},{fmt(video, c)}" for c in classes]
    lines.append(f"mAP,{frame.mean:.4f},{video.mean:.4f}" if video is not None else f"mAP,{frame.mean:.4f},")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- timing

class StageTimer:
    """Accumulates wall-clock time per stage per frame."""

    def __init__(self):
        self.frames: list[dict[str, float]] = []
        self._current: dict[str, float] | None = None
        self._t0 = 0.0

    def start_frame(self) -> None:
        self._current = defaultdict(float)
        self._t0 = time.perf_counter()

    def end_frame(self) -> None:
        cur = self._current
        cur["overall"] = time.perf_counter() - self._t0
        cur["others"] += max(cur["overall"] - sum(v for k, v in cur.items() if k not in ("overall", "others")), 0.0)
        self.frames.append(dict(cur))
        self._current = None

    @contextmanager
    def stage(self, name: str):
        if self._current is None:
            yield
            return
        t = time.perf_counter()
        try:
            yield
        finally:
            self._current[name] += time.perf_counter() - t


@dataclass
class TimingReport:
    stage_ms: dict[str, float]
    overall_ms: float
    frames: int

    def to_text(self) -> str:
        lines = [f"{'stage':<18}{'ms/frame':>10}"]
        lines += [f"{s:<18}{self.stage_ms.get(s, 0.0):>10.2f}" for s in STAGES]
        lines.append(f"{'overall':<18}{self.overall_ms:>10.2f}")
        lines.append(f"frames: {self.frames}  ({1000.0 / self.overall_ms:.1f} fps)" if self.overall_ms > 0
                     else f"frames: {self.frames}")
        lines.append("reference overall (published, i7-3770): 41.83 ms/frame")
        return "\n".join(lines) + "\n"


def bench(timer: StageTimer) -> TimingReport:
    """Mean milliseconds per stage over all timed frames."""
    if not timer.frames:
        raise ValueError("nothing benchmarked")
    n = len(timer.frames)
    stage_ms = {s: 1000.0 * sum(f.get(s, 0.0) for f in timer.frames) / n for s in STAGES}
    overall = 1000.0 * sum(f["overall"] for f in timer.frames) / n
    return TimingReport(stage_ms, overall, n)
