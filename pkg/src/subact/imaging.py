"""Frame and annotation I/O shared by every stage of the pipeline.

Frames are stored as 2-D ``uint8`` arrays (rows x cols). Bounding boxes use
top-left pixel coordinates plus width/height, matching the annotation file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import cv2
import numpy as np

from .descriptor import ICVL_GRAPH, DescriptorGraph

UNLABELED = "-"
IMAGE_SUFFIXES = (".pgm", ".png")


class DataError(Exception):
    """Raised for unreadable, inconsistent or malformed input data."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def clip(self, width: int, height: int) -> "BoundingBox | None":
        """Intersection with the frame ``[0,width) x [0,height)``; None if empty."""
        x1, y1 = max(self.x, 0), max(self.y, 0)
        x2, y2 = min(self.x2, width), min(self.y2, height)
        if x2 <= x1 or y2 <= y1:
            return None
        return BoundingBox(x1, y1, x2 - x1, y2 - y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    t: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"frame must be 2-D grayscale, got shape {px.shape}")
        if px.dtype != np.uint8:
            px = np.clip(px, 0, 255).astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def to_gray(image: np.ndarray) -> np.ndarray:
    """Integer luma ``(77R + 150G + 29B) >> 8``; input channels in RGB order."""
    if image.ndim == 2:
        return image.astype(np.uint8, copy=False)
    rgb = image[..., :3].astype(np.uint32)
    y = (77 * rgb[..., 0] + 150 * rgb[..., 1] + 29 * rgb[..., 2]) >> 8
    return y.astype(np.uint8)


def read_image(path: str | os.PathLike) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"unreadable image file: {path}")
    if img.dtype != np.uint8:
        raise DataError(f"not an 8-bit image: {path}")
    if img.ndim == 3:
        # cv2 hands back BGR(A)
        img = to_gray(img[..., 2::-1])
    return img


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(px.tobytes())


class FrameSequence:
    """Ordered grayscale frames with a frame rate and a scene identifier.

    Frames are produced on demand by per-frame loader callables, so a sequence
    backed by a directory only touches the files it is asked for.
    """

    def __init__(self, loaders: Sequence[Callable[[], np.ndarray]], width: int,
                 height: int, fps: float = 15.0, scene_id: str = "scene"):
        self._loaders = list(loaders)
        self.width = width
        self.height = height
        self.fps = fps
        self.scene_id = scene_id
        self._names: list[str] | None = None

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray], fps: float = 15.0,
                    scene_id: str = "scene") -> "FrameSequence":
        arrays = [np.asarray(a, dtype=np.uint8) for a in arrays]
        if not arrays:
            raise DataError("no frames")
        h, w = arrays[0].shape
        for i, a in enumerate(arrays):
            if a.shape != (h, w):
                raise DataError(f"frame {i} has shape {a.shape}, expected {(h, w)}")
        return cls([(lambda a=a: a) for a in arrays], w, h, fps, scene_id)

    def __len__(self) -> int:
        return len(self._loaders)

    def __getitem__(self, t: int) -> Frame:
        if t < 0:
            t += len(self)
        px = self._loaders[t]()
        if px.shape != (self.height, self.width):
            where = self._names[t] if self._names else f"frame {t}"
            raise DataError(f"{where}: dimensions {px.shape[1]}x{px.shape[0]} differ from "
                            f"first frame {self.width}x{self.height}")
        return Frame(px, t)

    def __iter__(self) -> Iterator[Frame]:
        for t in range(len(self)):
            yield self[t]

    def save(self, directory: str | os.PathLike) -> None:
        """Write the sequence as PGM files plus a ``sequence.txt`` manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        width = max(6, len(str(len(self))))
        for frame in self:
            write_pgm(d / f"{frame.t:0{width}d}.pgm", frame.pixels)
        fps = int(self.fps) if float(self.fps).is_integer() else self.fps
        (d / "sequence.txt").write_text(f"fps={fps}\nscene={self.scene_id}\n")


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_sequence(path: str | os.PathLike) -> FrameSequence:
    d = Path(path)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    manifest = d / "sequence.txt"
    if not files:
        raise DataError(f"no frames in {d}")
    if not manifest.exists():
        raise DataError(f"missing manifest: {manifest}")
    meta = read_manifest(manifest)
    try:
        fps = float(meta.get("fps", "15"))
    except ValueError:
        raise DataError(f"{manifest}: bad fps value {meta['fps']!r}") from None
    first = read_image(files[0])
    h, w = first.shape
    loaders = [(lambda p=p: read_image(p)) for p in files]
    seq = FrameSequence(loaders, w, h, fps, meta.get("scene", d.name))
    seq._names = [str(p) for p in files]
    return seq


@dataclass(frozen=True)
class AnnotationRecord:
    """One (frame, track) line. ``scores`` holds optional per-level confidences."""
    frame: int
    track_id: int
    box: BoundingBox
    posture: str = UNLABELED
    locomotion: str = UNLABELED
    gesture: str = UNLABELED
    scores: tuple[float, ...] | None = field(default=None, compare=True)

    @property
    def labels(self) -> tuple[str, str, str]:
        return (self.posture, self.locomotion, self.gesture)


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _validate_labels(labels: Sequence[str], graph: DescriptorGraph, where: str):
    for level, label in zip(graph.levels, labels):
        if label != UNLABELED and label not in level.labels:
            raise DataError(f"{where}: unknown label token {label!r} for level {level.name}")


def parse_annotations(path: str | os.PathLike,
                      graph: DescriptorGraph = ICVL_GRAPH) -> list[AnnotationRecord]:
    """Parse ``<frame> <track> <x> <y> <w> <h> <posture> <locomotion> <gesture>``.

    Prediction files may append one confidence per level; those land in
    ``AnnotationRecord.scores``.
    """
    nlev = len(graph.levels)
    records = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        where = f"{path}:{lineno}"
        if len(tok) not in (6 + nlev, 6 + 2 * nlev):
            raise DataError(f"{where}: malformed line, expected {6 + nlev} fields, got {len(tok)}")
        try:
            frame, tid = int(tok[0]), int(tok[1])
            x, y, w, h = (float(v) for v in tok[2:6])
            scores = tuple(float(v) for v in tok[6 + nlev:]) or None
            box = BoundingBox(x, y, w, h)
        except ValueError as e:
            raise DataError(f"{where}: malformed line ({e})") from None
        labels = tok[6:6 + nlev]
        _validate_labels(labels, graph, where)
        records.append(_make_record(frame, tid, box, labels, scores, graph))
    records.sort(key=lambda r: (r.frame, r.track_id))
    return records


def _make_record(frame, tid, box, labels, scores, graph: DescriptorGraph) -> AnnotationRecord:
    by_level = dict(zip(graph.level_names, labels))
    return AnnotationRecord(frame, tid, box,
                            by_level.get("posture", UNLABELED),
                            by_level.get("locomotion", UNLABELED),
                            by_level.get("gesture", UNLABELED),
                            scores)


def record_labels(rec: AnnotationRecord, graph: DescriptorGraph) -> list[str]:
    return [getattr(rec, name) for name in graph.level_names]


def format_record(rec: AnnotationRecord, graph: DescriptorGraph = ICVL_GRAPH) -> str:
    b = rec.box
    parts = [str(rec.frame), str(rec.track_id), _fmt_num(b.x), _fmt_num(b.y),
             _fmt_num(b.w), _fmt_num(b.h), *record_labels(rec, graph)]
    if rec.scores is not None:
        parts += [repr(float(s)) for s in rec.scores]
    return " ".join(parts)


def write_annotations(records: Iterable[AnnotationRecord], path: str | os.PathLike,
                      graph: DescriptorGraph = ICVL_GRAPH) -> None:
    recs = sorted(records, key=lambda r: (r.frame, r.track_id))
    for r in recs:
        _validate_labels(record_labels(r, graph), graph, f"record frame={r.frame} id={r.track_id}")
    lines = [format_record(r, graph) + "\n" for r in recs]
    try:
        with open(path, "w") as f:
            f.writelines(lines)
    except OSError as e:
        raise DataError(f"cannot write annotations to {path}: {e}") from None
