"""End-to-end orchestration: training from annotated sequences, per-frame
detection/recognition, and scoring of prediction files.

Per frame: GMM foreground -> mini motion map -> person detector (or replayed
ground-truth boxes) -> tracker -> BDI/MHI/WAI -> per-track crops -> one CNN
per level -> conflict resolution -> temporal smoothing.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np

from . import cnn, descriptor as desc
from .config import ConfigError, PipelineConfig
from .evaluation import (ICVL_CLASSES, APResult, GroundTruthBox, GroundTruthTube, PredictedTrack,
                         ScoredDetection, StageTimer, confusion_matrix, format_matrix_csv, frame_ap,
                         iou, metrics_csv, REFERENCE_FOOTER, video_ap)
from .imaging import (AnnotationRecord, DataError, Frame, FrameSequence, UNLABELED, load_sequence,
                      parse_annotations, record_labels, write_pgm)
from .modelio import ModelFormatError
from .motion_saliency import background_image, gmm_step, init_gmm, mini_motion_map
from .person_detection import (SvmModel, detect, load_svm, oracle_detect, save_svm, train_svm,
                               training_windows)
from .temporal_features import (TemporalFeatureState, compute_bdi, compute_wai, crop_patches,
                                to_uint8, update_mhi)
from .tracking import KalmanParams, TrackSet, track_step

ANNOTATION_FILE = "annotations.txt"


# ---------------------------------------------------------------- models

@dataclass
class Models:
    graph: desc.DescriptorGraph
    nets: dict[str, cnn.Network]
    priors: desc.JointPriorTable | None = None
    phrase: cnn.Network | None = None
    phrase_vocab: desc.PhraseVocabulary = desc.ICVL_PHRASES
    detector: SvmModel | None = None

    def __post_init__(self):
        for lv in self.graph.levels:
            net = self.nets.get(lv.name)
            if net is None:
                raise ConfigError(f"missing network for level {lv.name}")
            if net.arity != len(lv.labels):
                raise DataError(f"{lv.name} network has arity {net.arity}, "
                                f"descriptor level has {len(lv.labels)} labels")
        if self.phrase is not None and self.phrase.arity != len(self.phrase_vocab):
            raise DataError(f"phrase network has arity {self.phrase.arity}, "
                            f"vocabulary has {len(self.phrase_vocab)} phrases")


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no path configured for {what} (set model.dir or the specific key)")
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def load_models(cfg: PipelineConfig, need_detector: bool = False, need_phrase: bool = False) -> Models:
    try:
        graph, priors = desc.load_descriptor(_require(cfg.descriptor_path(), "descriptor file"))
        nets = {lv.name: cnn.load_model(_require(cfg.model_path(lv.name), f"{lv.name} model"))
                for lv in graph.levels}
        phrase = None
        if need_phrase:
            phrase = cnn.load_model(_require(cfg.model_path("phrase"), "phrase model"))
        detector = None
        if need_detector:
            detector = load_svm(_require(cfg.model_path("detector"), "detector model"))
    except (ModelFormatError, ValueError) as e:
        raise DataError(str(e)) from None
    return Models(graph, nets, priors, phrase, detector=detector)


# ---------------------------------------------------------------- datasets

def load_dataset(root: str | Path) -> list[tuple[FrameSequence, list[AnnotationRecord], str]]:
    """Sequence directories under ``root`` (or ``root`` itself), each with an
    ``annotations.txt``; returns (sequence, records, name) triples."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    dirs = [root] if (root / "sequence.txt").exists() else sorted(
        d for d in root.iterdir() if d.is_dir() and (d / "sequence.txt").exists())
    if not dirs:
        raise DataError(f"{root}: no sequence directories (with sequence.txt) found")
    out = []
    for d in dirs:
        ann = d / ANNOTATION_FILE
        recs = parse_annotations(ann) if ann.exists() else []
        out.append((load_sequence(d), recs, d.name))
    return out


def save_dataset(root: str | Path, items: Iterable[tuple[FrameSequence, list[AnnotationRecord]]],
                 graph: desc.DescriptorGraph = desc.ICVL_GRAPH) -> list[Path]:
    from .imaging import write_annotations
    root = Path(root)
    paths = []
    for i, (seq, recs) in enumerate(items):
        d = root / f"seq{i:03d}"
        seq.save(d)
        write_annotations(recs, d / ANNOTATION_FILE, graph)
        paths.append(d)
    return paths


# ---------------------------------------------------------------- per-frame state

class MotionFeatures:
    """GMM background model plus BDI/MHI/WAI state for one stream."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.gmm = None
        self.feat = TemporalFeatureState(cfg["feat.xi_thr"], cfg["feat.tau_max"], cfg["feat.tau_min"],
                                         cfg["feat.n"], (cfg["feat.w1"], 1.0 - cfg["feat.w1"]),
                                         cfg["feat.abs_diff"])

    def motion(self, frame: Frame) -> tuple[Frame, Frame]:
        """Foreground mask and background estimate for ``frame``."""
        c = self.cfg
        if self.gmm is None:
            self.gmm = init_gmm(frame, c["gmm.k"], c["gmm.lr"], c["gmm.bg_ratio"],
                                c["gmm.match_sigma"], min_var=c["gmm.min_var"])
            mask = Frame(np.zeros_like(frame.pixels), frame.t)
        else:
            mask = gmm_step(self.gmm, frame)
        return mask, background_image(self.gmm)

    def bdi(self, frame: Frame, background: Frame) -> None:
        self.feat.background = background.pixels
        self.feat.bdi = compute_bdi(frame, background, self.feat.xi_thr, self.feat.abs_diff)

    def mhi(self, frame: Frame) -> None:
        update_mhi(self.feat, frame)

    def wai(self) -> None:
        self.feat.wai = compute_wai(self.feat.bdi, self.feat.mhi, self.feat.w)

    def update(self, frame: Frame) -> Frame:
        mask, bg = self.motion(frame)
        self.bdi(frame, bg)
        self.mhi(frame)
        self.wai()
        return mask


# ---------------------------------------------------------------- training

@dataclass
class Samples:
    patches: dict[str, list[np.ndarray]] = field(default_factory=lambda: defaultdict(list))
    labels: list[tuple[str, ...]] = field(default_factory=list)
    scenes: list[str] = field(default_factory=list)

    def stack(self, feature: str) -> np.ndarray:
        return np.concatenate(self.patches[feature]) if self.patches[feature] else np.zeros((0, 28, 28))


def collect_samples(items: Iterable[tuple[FrameSequence, Sequence[AnnotationRecord]]],
                    cfg: PipelineConfig, graph: desc.DescriptorGraph = desc.ICVL_GRAPH,
                    scene_of: Callable[[FrameSequence], str] | None = None) -> Samples:
    """Feature patches cropped at every annotated box, with their level labels."""
    out = Samples()
    for seq, records in items:
        by_frame = defaultdict(list)
        for r in records:
            by_frame[r.frame].append(r)
        scene = scene_of(seq) if scene_of else seq.scene_id
        mf = MotionFeatures(cfg)
        for frame in seq:
            mf.update(frame)
            recs = by_frame.get(frame.t)
            if not recs:
                continue
            p = crop_patches(mf.feat, [r.box for r in recs], cfg["feat.pad"])
            for k, v in p.items():
                out.patches[k].append(v)
            out.labels += [tuple(record_labels(r, graph)) for r in recs]
            out.scenes += [scene] * len(recs)
    return out


@dataclass
class TrainArtifacts:
    paths: dict[str, Path]
    train_accuracy: dict[str, float]


def _train_net(x: np.ndarray, y: np.ndarray, arity: int, cfg: PipelineConfig, seed: int) -> cnn.Network:
    net = cnn.init_network(arity, seed=seed)
    tc = cnn.TrainConfig(cfg["train.batch_size"], cfg["train.iterations"], cfg["train.flip_prob"],
                         seed, cfg["train.lr"], cfg["train.momentum"], cfg["train.wd"])
    return cnn.train(net, x, y, tc).net


def run_train(cfg: PipelineConfig, items: Sequence[tuple[FrameSequence, Sequence[AnnotationRecord]]],
              out_dir: str | Path, graph: desc.DescriptorGraph = desc.ICVL_GRAPH,
              log: Callable[[str], None] = lambda s: None) -> TrainArtifacts:
    """Train one CNN per level (plus the phrase baseline and the person
    detector when enabled), estimate scene priors, and write all artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = collect_samples(items, cfg, graph)
    if not samples.labels:
        raise DataError("no annotated boxes in the training data")
    paths, acc = {}, {}
    seed = cfg["train.seed"]
    for k, lv in enumerate(graph.levels):
        keep = [i for i, l in enumerate(samples.labels) if l[k] in lv.labels]
        present = {samples.labels[i][k] for i in keep}
        if len(present) < 2:
            raise DataError(f"level {lv.name} has fewer than 2 distinct labels in the training data")
        x = samples.stack(desc.LEVEL_FEATURE[lv.name])[keep]
        y = np.array([lv.index(samples.labels[i][k]) for i in keep])
        log(f"training {lv.name} CNN on {len(x)} {desc.LEVEL_FEATURE[lv.name].upper()} patches")
        net = _train_net(x, y, len(lv.labels), cfg, seed + k)
        acc[lv.name] = float(np.mean(cnn.predict(net, x) == y))
        paths[lv.name] = out / f"{lv.name}.bin"
        cnn.save_model(net, paths[lv.name])
    if cfg["train.phrase"] and graph is desc.ICVL_GRAPH:
        vocab = desc.ICVL_PHRASES
        keep = [i for i, l in enumerate(samples.labels) if l in vocab.triples]
        if len({samples.labels[i] for i in keep}) >= 2:
            x = samples.stack("wai")[keep]
            y = np.array([vocab.index(samples.labels[i]) for i in keep])
            log(f"training phrase CNN on {len(x)} WAI patches")
            net = _train_net(x, y, len(vocab), cfg, seed + len(graph.levels))
            acc["phrase"] = float(np.mean(cnn.predict(net, x) == y))
            paths["phrase"] = out / "phrase.bin"
            cnn.save_model(net, paths["phrase"])
    priors = desc.estimate_priors(zip(samples.scenes, samples.labels), graph)
    paths["descriptor"] = out / "descriptor.txt"
    desc.save_descriptor(paths["descriptor"], graph, priors)
    if cfg["train.detector"]:
        svm = train_detector(items, cfg)
        acc["detector"] = svm.train_accuracy
        paths["detector"] = out / "detector.bin"
        save_svm(svm, paths["detector"])
    return TrainArtifacts(paths, acc)


def train_detector(items: Iterable[tuple[FrameSequence, Sequence[AnnotationRecord]]],
                   cfg: PipelineConfig, frame_step: int = 3) -> SvmModel:
    rng = np.random.default_rng(cfg["train.seed"])
    frames, boxes = [], []
    for seq, records in items:
        by_frame = defaultdict(list)
        for r in records:
            by_frame[r.frame].append(r.box)
        for t in range(0, len(seq), frame_step):
            frames.append(seq[t].pixels)
            boxes.append(by_frame.get(t, []))
    pos, neg = training_windows(frames, boxes, rng)
    if len(pos) == 0:
        raise DataError("no person boxes usable for detector training")
    return train_svm(pos, neg, cfg["det.C"], seed=cfg["train.seed"])


# ---------------------------------------------------------------- detection

@dataclass
class DetectResult:
    records: list[AnnotationRecord]
    frames: int


def _draw_overlay(frame: Frame, records: Sequence[AnnotationRecord], graph) -> np.ndarray:
    img = frame.pixels.copy()
    for r in records:
        b = r.box
        p1 = (int(round(b.x)), int(round(b.y)))
        p2 = (int(round(b.x2)) - 1, int(round(b.y2)) - 1)
        cv2.rectangle(img, p1, p2, 255, 1)
        text = f"{r.track_id}: " + "/".join(l for l in record_labels(r, graph) if l != UNLABELED)
        cv2.putText(img, text, (p1[0], max(p1[1] - 3, 8)), cv2.FONT_HERSHEY_PLAIN, 0.8, 255, 1)
    return img


def run_detect(cfg: PipelineConfig, models: Models, seq: FrameSequence,
               annotations: Sequence[AnnotationRecord] | None = None, use_phrase: bool = False,
               timer: StageTimer | None = None, overlay_dir: str | Path | None = None,
               dump_dir: str | Path | None = None) -> DetectResult:
    """Process a sequence frame by frame; returns one prediction record per
    detected track per frame, carrying per-level confidences."""
    graph = models.graph
    oracle = cfg["mode"] == "oracle-boxes"
    if oracle and annotations is None:
        raise ConfigError("oracle-boxes mode needs ground-truth annotations")
    if not oracle and models.detector is None:
        raise ConfigError("hog-detector mode needs a detector model")
    if use_phrase and models.phrase is None:
        raise ConfigError("phrase baseline requested but no phrase model loaded")
    ann_by_frame = defaultdict(list)
    for r in annotations or ():
        ann_by_frame[r.frame].append(r)
    scene = cfg["scene"] or seq.scene_id
    timer = timer or StageTimer()
    mf = MotionFeatures(cfg)
    kp = KalmanParams(cfg["track.q_pos"], cfg["track.q_vel"], cfg["track.r"])
    ts = TrackSet(n_skip=cfg["track.n_skip"], iou_gate=cfg["track.iou_gate"], params=kp,
                  history_len=cfg["post.window"])
    scales = cfg["det.scales"]
    out: list[AnnotationRecord] = []
    for frame in seq:
        timer.start_frame()
        with timer.stage("motion detection"):
            mask, bg = mf.motion(frame)
            mm = None if oracle else mini_motion_map(mask, min_fg_pixels=cfg["minimap.min_fg_pixels"])
        with timer.stage("detector"):
            if oracle:
                dets = oracle_detect(ann_by_frame.get(frame.t, ()), frame.t)
            else:
                dets = detect(frame, mm, models.detector, scales, cfg["det.threshold"],
                              cfg["det.nms_iou"], mask=mask)
        with timer.stage("tracker"):
            track_step(ts, dets)
        with timer.stage("BDI"):
            mf.bdi(frame, bg)
        with timer.stage("MHI"):
            mf.mhi(frame)
        with timer.stage("WAI"):
            mf.wai()
        active = [t for t in ts.tracks if t.detection is not None]
        frame_records = []
        if active:
            boxes = [t.detection.box if oracle else t.box.clip(seq.width, seq.height) or t.detection.box
                     for t in active]
            with timer.stage("CNNs"):
                patches = crop_patches(mf.feat, boxes, cfg["feat.pad"])
                if use_phrase:
                    raw = _classify_phrase(models, patches["wai"], [t.id for t in active])
                else:
                    raw = desc.classify(models.nets, patches, graph, [t.id for t in active])
            with timer.stage("post-processing"):
                final = []
                for t, pred in zip(active, raw):
                    rev = desc.resolve_conflicts(pred, graph, models.priors, scene, cfg["post.prior_only"])
                    final.append(desc.smooth(t.history, rev, cfg["post.window"]))
            for t, box, pred in zip(active, boxes, final):
                score = max(t.detection.score, 0.0)
                conf = tuple(score * pred.confidence(k, graph) for k in range(len(graph.levels)))
                by_level = dict(zip(graph.level_names, pred.labels))
                frame_records.append(AnnotationRecord(
                    frame.t, t.id, box, by_level.get("posture", UNLABELED),
                    by_level.get("locomotion", UNLABELED), by_level.get("gesture", UNLABELED), conf))
        out += frame_records
        timer.end_frame()
        # debug output stays off the timed path
        if overlay_dir is not None:
            Path(overlay_dir).mkdir(parents=True, exist_ok=True)
            write_pgm(Path(overlay_dir) / f"{frame.t:06d}.pgm", _draw_overlay(frame, frame_records, graph))
        if dump_dir is not None:
            for name in ("bdi", "mhi", "wai"):
                d = Path(dump_dir) / name
                d.mkdir(parents=True, exist_ok=True)
                write_pgm(d / f"{frame.t:06d}.pgm", to_uint8(getattr(mf.feat, name)))
    return DetectResult(out, len(seq))


def _classify_phrase(models: Models, wai: np.ndarray, ids: Sequence[int]) -> list[desc.ActionPrediction]:
    probs = cnn.forward(models.phrase, wai)
    out = []
    for i, p in enumerate(probs):
        triple = models.phrase_vocab.triples[int(np.argmax(p))]
        level_p = desc.phrase_to_level_probs(p, models.phrase_vocab, models.graph)
        out.append(desc.ActionPrediction(ids[i], tuple(triple), level_p))
    return out


# ---------------------------------------------------------------- evaluation

# frame/track ids of different sequences are kept apart by this offset
SEQUENCE_STRIDE = 1_000_000


def _offset(records: Iterable[AnnotationRecord], k: int) -> list[AnnotationRecord]:
    if k == 0:
        return list(records)
    off = k * SEQUENCE_STRIDE
    return [AnnotationRecord(r.frame + off, r.track_id + off, r.box, r.posture, r.locomotion,
                             r.gesture, r.scores) for r in records]


def merge_sequences(per_sequence: Sequence[Sequence[AnnotationRecord]]) -> list[AnnotationRecord]:
    out = []
    for k, recs in enumerate(per_sequence):
        out += _offset(recs, k)
    return out


def per_level_detections(records: Iterable[AnnotationRecord], graph) -> list[ScoredDetection]:
    out = []
    for r in records:
        labels = record_labels(r, graph)
        for k, lab in enumerate(labels):
            if lab != UNLABELED:
                conf = r.scores[k] if r.scores is not None else 1.0
                out.append(ScoredDetection(r.frame, r.box, lab, conf))
    return out


def per_level_ground_truth(records: Iterable[AnnotationRecord], graph) -> list[GroundTruthBox]:
    return [GroundTruthBox(r.frame, r.box, lab) for r in records
            for lab in record_labels(r, graph) if lab != UNLABELED]


def _tracks(records, graph, predicted: bool):
    """One track/tube per (track id, level)."""
    groups = defaultdict(list)
    for r in records:
        groups[r.track_id].append(r)
    out = []
    for tid, recs in groups.items():
        for k in range(len(graph.levels)):
            rs = [r for r in recs if record_labels(r, graph)[k] != UNLABELED]
            if not rs:
                continue
            boxes = {r.frame: r.box for r in rs}
            labels = {r.frame: record_labels(r, graph)[k] for r in rs}
            if predicted:
                conf = {r.frame: (r.scores[k] if r.scores is not None else 1.0) for r in rs}
                out.append(PredictedTrack(tid, boxes, labels, conf))
            else:
                out.append(GroundTruthTube(tid, boxes, labels))
    return out


@dataclass
class EvalReport:
    frame: APResult
    video: APResult
    confusion: dict[str, tuple[np.ndarray, list[str]]]
    classes: list[str]
    graph: desc.DescriptorGraph
    warnings: list[str] = field(default_factory=list)

    def csv(self) -> str:
        return metrics_csv(self.frame, self.video, self.classes)

    def confusion_csv(self, level: str) -> str:
        m, _ = self.confusion[level]
        return format_matrix_csv(m, self.graph.level(level).labels)

    def to_text(self) -> str:
        lines = [f"{'class':<12}{'frame-AP':>10}{'video-AP':>10}"]
        for c in self.classes:
            fa = self.frame.per_class.get(c)
            va = self.video.per_class.get(c)
            lines.append(f"{c:<12}{_pct(fa):>10}{_pct(va):>10}")
        lines.append(f"{'mAP':<12}{_pct(self.frame.mean):>10}{_pct(self.video.mean):>10}")
        if self.frame.skipped:
            lines.append("no ground truth (skipped): " + ", ".join(self.frame.skipped))
        for level, (m, empty) in self.confusion.items():
            labels = self.graph.level(level).labels
            lines.append(f"\nconfusion ({level}; rows = truth)")
            lines.append(" " * 14 + "".join(f"{l[:9]:>10}" for l in labels))
            for l, row in zip(labels, m):
                lines.append(f"{l[:13]:<14}" + "".join(f"{v:>10.3f}" for v in row))
            if empty:
                lines.append("empty rows: " + ", ".join(empty))
        lines += [f"warning: {w}" for w in self.warnings]
        lines.append("\n" + REFERENCE_FOOTER)
        return "\n".join(lines) + "\n"


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def run_eval(predictions: Sequence[AnnotationRecord], truth: Sequence[AnnotationRecord],
             graph: desc.DescriptorGraph = desc.ICVL_GRAPH, sigma: float = 0.5, tau: float = 0.5,
             classes: Sequence[str] | None = None) -> EvalReport:
    """frame-AP, video-AP and per-level confusion matrices. Frame-level label
    pairs come from matching each ground-truth box to the predicted box of
    highest IoU (> sigma) in its frame."""
    if classes is None:
        vocab = {l for lv in graph.levels for l in lv.labels}
        classes = [c for c in ICVL_CLASSES if c in vocab] or sorted(vocab)
    warnings = []
    if predictions and truth:
        pf = {r.frame for r in predictions}
        tf = {r.frame for r in truth}
        if max(pf) > max(tf) or min(pf) < min(tf):
            warnings.append(f"prediction frames {min(pf)}-{max(pf)} exceed ground-truth frames {min(tf)}-{max(tf)}")
    fa = frame_ap(per_level_detections(predictions, graph), per_level_ground_truth(truth, graph),
                  sigma, classes)
    va = video_ap(_tracks(predictions, graph, True), _tracks(truth, graph, False), sigma, tau, classes)
    pred_by_frame = defaultdict(list)
    for r in predictions:
        pred_by_frame[r.frame].append(r)
    pairs = defaultdict(lambda: ([], []))
    for g in truth:
        best = max(pred_by_frame.get(g.frame, ()), key=lambda p: iou(p.box, g.box), default=None)
        if best is None or iou(best.box, g.box) <= sigma:
            continue
        for k, lv in enumerate(graph.levels):
            gl, pl = record_labels(g, graph)[k], record_labels(best, graph)[k]
            if gl != UNLABELED:
                pairs[lv.name][0].append(pl)
                pairs[lv.name][1].append(gl)
    conf = {lv.name: confusion_matrix(*pairs[lv.name], lv.labels) for lv in graph.levels}
    return EvalReport(fa, va, conf, list(classes), graph, warnings)


def detect_dataset(cfg: PipelineConfig, models: Models,
                   items: Sequence[tuple[FrameSequence, Sequence[AnnotationRecord]]],
                   use_phrase: bool = False, timer: StageTimer | None = None) -> list[list[AnnotationRecord]]:
    return [run_detect(cfg, models, seq, recs, use_phrase=use_phrase, timer=timer).records
            for seq, recs in items]


def label_accuracy(predictions: Sequence[AnnotationRecord], truth: Sequence[AnnotationRecord],
                   graph: desc.DescriptorGraph = desc.ICVL_GRAPH) -> dict[str, float]:
    """Per-level fraction of ground-truth boxes whose co-located prediction has the right label."""
    by_key = {(r.frame, r.box): r for r in predictions}
    hits, tot = defaultdict(int), defaultdict(int)
    for g in truth:
        p = by_key.get((g.frame, g.box))
        for k, lv in enumerate(graph.levels):
            gl = record_labels(g, graph)[k]
            if gl == UNLABELED:
                continue
            tot[lv.name] += 1
            hits[lv.name] += p is not None and record_labels(p, graph)[k] == gl
    return {k: hits[k] / tot[k] for k in tot}
