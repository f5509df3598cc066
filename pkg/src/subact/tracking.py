"""Tracking by detection: constant-velocity Kalman tracks, greedy IoU
association, and the add / update / delete track life cycle."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import iou
from .imaging import BoundingBox
from .person_detection import Detection

MIN_SIZE = 1.0

# state (cx, cy, w, h, vx, vy); measurement (cx, cy, w, h)
_F = np.eye(6)
_F[0, 4] = _F[1, 5] = 1.0
_H = np.eye(4, 6)


@dataclass
class KalmanParams:
    q_pos: float = 1.0
    q_vel: float = 0.5
    r: float = 2.0
    init_vel_sd: float = 10.0

    @property
    def Q(self) -> np.ndarray:
        return np.diag([self.q_pos ** 2] * 4 + [self.q_vel ** 2] * 2)

    @property
    def R(self) -> np.ndarray:
        return np.eye(4) * self.r ** 2


@dataclass
class Track:
    id: int
    x: np.ndarray                      # (6,) state
    P: np.ndarray                      # (6, 6) covariance
    frames_since_detection: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=15))
    detection: Detection | None = None   # detection matched on the latest step
    age: int = 0

    @property
    def box(self) -> BoundingBox:
        cx, cy, w, h = self.x[:4]
        w, h = max(w, MIN_SIZE), max(h, MIN_SIZE)
        return BoundingBox(cx - w / 2, cy - h / 2, w, h)


def _measure(box: BoundingBox) -> np.ndarray:
    cx, cy = box.center
    return np.array([cx, cy, box.w, box.h], float)


def new_track(track_id: int, det: Detection, params: KalmanParams, history_len: int = 15) -> Track:
    x = np.concatenate([_measure(det.box), [0.0, 0.0]])
    P = np.diag([params.r ** 2] * 4 + [params.init_vel_sd ** 2] * 2)
    return Track(track_id, x, P, 0, deque(maxlen=history_len), det)


def kalman_predict(track: Track, params: KalmanParams = KalmanParams()) -> BoundingBox:
    """Advance one frame: constant velocity for the centre, random walk for the size."""
    track.x = _F @ track.x
    track.P = _F @ track.P @ _F.T + params.Q
    track.x[2:4] = np.maximum(track.x[2:4], MIN_SIZE)
    return track.box


def kalman_update(track: Track, box: BoundingBox, params: KalmanParams = KalmanParams()) -> None:
    z = _measure(box)
    S = _H @ track.P @ _H.T + params.R
    K = np.linalg.solve(S, _H @ track.P).T
    track.x = track.x + K @ (z - _H @ track.x)
    track.P = (np.eye(6) - K @ _H) @ track.P
    track.P = (track.P + track.P.T) / 2
    track.x[2:4] = np.maximum(track.x[2:4], MIN_SIZE)


def associate(tracks: Sequence[Track | BoundingBox], detections: Sequence[Detection | BoundingBox],
              gate: float = 0.3) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Greedy matching on descending IoU; pairs below ``gate`` stay unmatched.
    Returns (pairs of (track index, detection index), unmatched tracks, unmatched detections)."""
    tb = [t.box if isinstance(t, Track) else t for t in tracks]
    db = [d.box if isinstance(d, Detection) else d for d in detections]
    pairs = [(iou(a, b), i, j) for i, a in enumerate(tb) for j, b in enumerate(db)]
    pairs = [p for p in pairs if p[0] >= gate and p[0] > 0]
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_t, used_d, matched = set(), set(), []
    for _, i, j in pairs:
        if i not in used_t and j not in used_d:
            used_t.add(i)
            used_d.add(j)
            matched.append((i, j))
    return (matched, [i for i in range(len(tb)) if i not in used_t],
            [j for j in range(len(db)) if j not in used_d])


@dataclass
class TrackSet:
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    n_skip: int = 15
    iou_gate: float = 0.3
    params: KalmanParams = field(default_factory=KalmanParams)
    history_len: int = 15


def track_step(ts: TrackSet, detections: Sequence[Detection]) -> TrackSet:
    """One frame: predict all tracks, associate, update matched, coast and
    age the rest, spawn tracks for leftover detections, drop stale tracks."""
    for t in ts.tracks:
        kalman_predict(t, ts.params)
        t.detection = None
        t.age += 1
    matched, lost, fresh = associate(ts.tracks, detections, ts.iou_gate)
    for i, j in matched:
        t = ts.tracks[i]
        kalman_update(t, detections[j].box, ts.params)
        t.frames_since_detection = 0
        t.detection = detections[j]
    for i in lost:
        ts.tracks[i].frames_since_detection += 1
    ts.tracks = [t for t in ts.tracks if t.frames_since_detection <= ts.n_skip]
    for j in fresh:
        ts.tracks.append(new_track(ts.next_id, detections[j], ts.params, ts.history_len))
        ts.next_id += 1
    return ts
