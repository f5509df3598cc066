"""Three-level sub-action descriptor: vocabularies, compatibility graph,
multi-network classification, conflict resolution with scene priors,
temporal smoothing and the visual-phrase baseline vocabulary.
"""

from __future__ import annotations

import itertools
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

# which temporal feature feeds which level's network
LEVEL_FEATURE = {"posture": "bdi", "locomotion": "mhi", "gesture": "wai"}


@dataclass(frozen=True)
class Level:
    name: str
    labels: tuple[str, ...]

    def index(self, label: str) -> int:
        return self.labels.index(label)


class DescriptorGraph:
    """Levels of sub-action labels plus compatibility edges between adjacent levels.

    A missing edge between two labels of adjacent levels means the pair can
    never co-occur.
    """

    def __init__(self, levels: Sequence[Level], edges: Iterable[tuple[str, str]]):
        self.levels = tuple(levels)
        seen = set()
        for lv in self.levels:
            for lab in lv.labels:
                if lab in seen:
                    raise ValueError(f"label {lab!r} appears in more than one level")
                seen.add(lab)
        self._level_of = {lab: i for i, lv in enumerate(self.levels) for lab in lv.labels}
        self.edges = frozenset(frozenset(e) for e in edges)
        for e in self.edges:
            a, b = tuple(e)
            if a not in self._level_of or b not in self._level_of:
                raise ValueError(f"edge {a}-{b} names an unknown label")
            if abs(self._level_of[a] - self._level_of[b]) != 1:
                raise ValueError(f"edge {a}-{b} does not join adjacent levels")

    @property
    def level_names(self) -> tuple[str, ...]:
        return tuple(lv.name for lv in self.levels)

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(len(lv.labels) for lv in self.levels)

    def level(self, name: str) -> Level:
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise KeyError(name)

    def level_of(self, label: str) -> int:
        return self._level_of[label]

    def linked(self, a: str, b: str) -> bool:
        return frozenset((a, b)) in self.edges

    def compatible(self, labels: Sequence[str]) -> bool:
        return all(self.linked(labels[k], labels[k + 1]) for k in range(len(labels) - 1))

    def compatible_triples(self) -> list[tuple[str, ...]]:
        return [t for t in itertools.product(*(lv.labels for lv in self.levels))
                if self.compatible(t)]

    def to_text(self) -> str:
        lines = [f"level {lv.name}: {' '.join(lv.labels)}" for lv in self.levels]
        order = {lab: i for i, lab in enumerate(l for lv in self.levels for l in lv.labels)}
        pairs = sorted((tuple(sorted(e, key=order.get)) for e in self.edges),
                       key=lambda p: (order[p[0]], order[p[1]]))
        lines += [f"edge {a} {b}" for a, b in pairs]
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return (isinstance(other, DescriptorGraph) and self.levels == other.levels
                and self.edges == other.edges)

    def __hash__(self):
        return hash((self.levels, self.edges))


def _graph_with_exclusions(levels: Sequence[Level], excluded: Iterable[tuple[str, str]]):
    excluded = {frozenset(p) for p in excluded}
    edges = []
    for upper, lower in zip(levels, levels[1:]):
        for a in upper.labels:
            for b in lower.labels:
                if frozenset((a, b)) not in excluded:
                    edges.append((a, b))
    return DescriptorGraph(levels, edges)


ICVL_GRAPH = _graph_with_exclusions(
    [Level("posture", ("sitting", "standing")),
     Level("locomotion", ("stationary", "walking", "running")),
     Level("gesture", ("nothing", "texting", "smoking", "others"))],
    [("sitting", "walking"), ("sitting", "running"),
     ("running", "texting"), ("running", "smoking")],
)

# KTH has a single posture (standing) which is ignored, so only two levels remain.
KTH_GRAPH = _graph_with_exclusions(
    [Level("locomotion", ("stationary", "walking", "jogging", "running")),
     Level("gesture", ("boxing", "hand-clapping", "hand-waving", "nothing"))],
    [(loc, g) for loc in ("walking", "jogging", "running")
     for g in ("boxing", "hand-clapping", "hand-waving")]
    + [("stationary", "nothing")],
)


# ----------------------------------------------------------------------------
# scene-conditioned priors

class JointPriorTable:
    """Joint label/scene frequencies P(label, scene) per level, add-one smoothed."""

    def __init__(self, graph: DescriptorGraph, scenes: Sequence[str],
                 probs: Mapping[str, np.ndarray], counts: Mapping[str, np.ndarray] | None = None):
        self.graph = graph
        self.scenes = tuple(scenes)
        self.probs = {k: np.asarray(v, dtype=np.float64) for k, v in probs.items()}
        self.counts = dict(counts) if counts is not None else None
        for lv in graph.levels:
            p = self.probs[lv.name]
            if p.shape != (len(lv.labels), len(self.scenes)):
                raise ValueError(f"prior table for {lv.name} has shape {p.shape}")

    def joint(self, level: str, label: str, scene: str | None) -> float:
        lv = self.graph.level(level)
        p = self.probs[level][lv.index(label)]
        if scene in self.scenes:
            return float(p[self.scenes.index(scene)])
        return float(p.sum())

    def scene_prior(self, level: str, scene: str | None) -> np.ndarray:
        """Vector of P(label, scene) over the level's labels; unseen scenes get the marginal."""
        p = self.probs[level]
        if scene in self.scenes:
            return p[:, self.scenes.index(scene)]
        return p.sum(axis=1)

    def scene_marginal(self, level: str) -> np.ndarray:
        return self.probs[level].sum(axis=0)

    def to_text(self) -> str:
        lines = []
        for lv in self.graph.levels:
            p = self.probs[lv.name]
            for i, lab in enumerate(lv.labels):
                for j, sc in enumerate(self.scenes):
                    lines.append(f"prior {lv.name} {lab} {sc} {float(p[i, j])!r}")
        return "\n".join(lines) + "\n"


def estimate_priors(labelled: Iterable[tuple[str, Sequence[str]]],
                    graph: DescriptorGraph) -> JointPriorTable:
    """Estimate P(label, scene) from ``(scene, labels-per-level)`` pairs, one per annotated frame.

    Unlabelled entries ("-") are skipped for that level only.
    """
    rows = list(labelled)
    if not rows:
        raise ValueError("empty annotations: cannot estimate priors")
    scenes = sorted({sc for sc, _ in rows})
    counts, probs = {}, {}
    for k, lv in enumerate(graph.levels):
        c = np.zeros((len(lv.labels), len(scenes)))
        for sc, labels in rows:
            if labels[k] in lv.labels:
                c[lv.index(labels[k]), scenes.index(sc)] += 1
        counts[lv.name] = c
        sm = c + 1.0
        probs[lv.name] = sm / sm.sum()
    return JointPriorTable(graph, scenes, probs, counts)


def save_descriptor(path: str | os.PathLike, graph: DescriptorGraph,
                    priors: JointPriorTable | None = None) -> None:
    text = graph.to_text()
    if priors is not None:
        text += priors.to_text()
    Path(path).write_text(text)


def load_descriptor(path: str | os.PathLike) -> tuple[DescriptorGraph, JointPriorTable | None]:
    levels, edges, priors = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind == "level":
            name, _, labs = rest.partition(":")
            levels.append(Level(name.strip(), tuple(labs.split())))
        elif kind == "edge":
            a, b = rest.split()
            edges.append((a, b))
        elif kind == "prior":
            lv, lab, sc, p = rest.split()
            priors.append((lv, lab, sc, float(p)))
        else:
            raise ValueError(f"{path}:{lineno}: unknown directive {kind!r}")
    if not levels:
        raise ValueError(f"{path}: no levels defined")
    graph = DescriptorGraph(levels, edges)
    if not priors:
        return graph, None
    scenes = sorted({sc for _, _, sc, _ in priors})
    probs = {lv.name: np.zeros((len(lv.labels), len(scenes))) for lv in graph.levels}
    for lv, lab, sc, p in priors:
        probs[lv][graph.level(lv).index(lab), scenes.index(sc)] = p
    return graph, JointPriorTable(graph, scenes, probs)


# ----------------------------------------------------------------------------
# predictions

@dataclass
class ActionPrediction:
    track_id: int
    labels: tuple[str, ...]
    probs: tuple[np.ndarray, ...]
    low_confidence: bool = False
    revised: bool = False

    def confidence(self, k: int, graph: DescriptorGraph) -> float:
        """Posterior of the level-k label currently assigned."""
        return float(self.probs[k][graph.levels[k].index(self.labels[k])])


def classify(nets: Mapping[str, object], patches: Mapping[str, np.ndarray],
             graph: DescriptorGraph = ICVL_GRAPH, track_ids: Sequence[int] | None = None,
             feature_of: Mapping[str, str] = LEVEL_FEATURE) -> list[ActionPrediction]:
    """Run one network per level on its feature patches.

    ``patches`` maps feature name ("bdi"/"mhi"/"wai") to an ``(N, 28, 28)``
    stack, one row per person; returns N raw predictions.
    """
    from .cnn import forward

    per_level = []
    n = None
    for lv in graph.levels:
        net = nets[lv.name]
        if net.arity != len(lv.labels):
            raise ValueError(f"network for {lv.name} has arity {net.arity}, "
                             f"descriptor level has {len(lv.labels)} labels")
        x = np.asarray(patches[feature_of[lv.name]])
        if x.ndim == 2:
            x = x[None]
        n = len(x) if n is None else n
        per_level.append(forward(net, x) if len(x) else np.zeros((0, net.arity)))
    ids = list(track_ids) if track_ids is not None else list(range(n or 0))
    out = []
    for i in range(n or 0):
        probs = tuple(p[i] for p in per_level)
        labels = tuple(lv.labels[int(np.argmax(p))] for lv, p in zip(graph.levels, probs))
        flat = any(np.ptp(p) < 1e-6 for p in probs)
        out.append(ActionPrediction(ids[i], labels, probs, low_confidence=flat))
    return out


def _fixing_order(anchor: int, confidences: Sequence[float]) -> list[int]:
    others = [k for k in range(len(confidences)) if k != anchor]
    return sorted(others, key=lambda k: (abs(k - anchor), -confidences[k], k))


def _completable(graph: DescriptorGraph, fixed: dict[int, str]) -> bool:
    for t in graph.compatible_triples():
        if all(t[k] == lab for k, lab in fixed.items()):
            return True
    return False


def _allowed(graph: DescriptorGraph, k: int, fixed: dict[int, str]) -> list[str]:
    out = []
    for lab in graph.levels[k].labels:
        trial = dict(fixed)
        trial[k] = lab
        if _completable(graph, trial):
            out.append(lab)
    return out


def resolve_conflicts(raw: ActionPrediction, graph: DescriptorGraph,
                      priors: JointPriorTable | None, scene: str | None,
                      prior_only: bool = False) -> ActionPrediction:
    """Revise an incompatible label tuple so it satisfies the graph.

    Compatible input is returned unchanged. Otherwise the most confident level
    is kept and every other level, visited outward from it, keeps its label if
    still admissible or else takes the admissible label with the highest
    scene-conditioned joint prior. With ``prior_only`` the whole tuple becomes
    the compatible tuple maximizing the product of per-level priors.
    """
    if graph.compatible(raw.labels):
        return raw

    def prior_vec(k):
        lv = graph.levels[k]
        if priors is None:
            return np.ones(len(lv.labels))
        return priors.scene_prior(lv.name, scene)

    if prior_only:
        best, best_p = None, -1.0
        for t in graph.compatible_triples():
            p = 1.0
            for k, lab in enumerate(t):
                p *= prior_vec(k)[graph.levels[k].index(lab)]
            if p > best_p:
                best, best_p = t, p
        labels = best
    else:
        conf = [raw.confidence(k, graph) for k in range(len(graph.levels))]
        anchor = int(np.argmax(conf))
        fixed = {anchor: raw.labels[anchor]}
        for k in _fixing_order(anchor, conf):
            allowed = _allowed(graph, k, fixed)
            if raw.labels[k] in allowed:
                fixed[k] = raw.labels[k]
            else:
                pv = prior_vec(k)
                lv = graph.levels[k]
                fixed[k] = max(allowed, key=lambda lab: (pv[lv.index(lab)], -lv.index(lab)))
        labels = tuple(fixed[k] for k in range(len(graph.levels)))
    return ActionPrediction(raw.track_id, tuple(labels), raw.probs, raw.low_confidence, True)


def smooth(history, revised: ActionPrediction,
           window: int = 15) -> ActionPrediction:
    """Majority vote per level over the last ``window`` revised label tuples.

    ``history`` (a list or deque) is appended in place; ties go to the
    most recent label.
    """
    history.append(tuple(revised.labels))
    recent = list(history)[-window:]
    labels = []
    for k in range(len(revised.labels)):
        seq = [h[k] for h in recent]
        counts = Counter(seq)
        top = max(counts.values())
        labels.append(next(lab for lab in reversed(seq) if counts[lab] == top))
    return ActionPrediction(revised.track_id, tuple(labels), revised.probs,
                            revised.low_confidence, revised.revised)


def video_majority_label(per_frame: Sequence[Sequence[str]]) -> tuple[str, ...]:
    """Modal label per level over a video's frames.

    Ties go to the label that first reached the tied count.
    """
    if not per_frame:
        raise ValueError("no frame predictions")
    out = []
    for k in range(len(per_frame[0])):
        top = max(Counter(labels[k] for labels in per_frame).values())
        first_hit = {}
        running: Counter = Counter()
        for t, labels in enumerate(per_frame):
            lab = labels[k]
            running[lab] += 1
            if running[lab] == top and lab not in first_hit:
                first_hit[lab] = t
        out.append(min(first_hit, key=first_hit.get))
    return tuple(out)


# ----------------------------------------------------------------------------
# visual-phrase baseline

@dataclass(frozen=True)
class PhraseVocabulary:
    phrases: tuple[str, ...]
    triples: tuple[tuple[str, str, str], ...]
    _enc: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(self.phrases) != len(set(self.phrases)) or len(self.triples) != len(set(self.triples)):
            raise ValueError("phrase vocabulary must be a bijection")
        self._enc.update(zip(self.triples, self.phrases))

    def __len__(self):
        return len(self.phrases)

    def encode(self, triple: Sequence[str]) -> str:
        try:
            return self._enc[tuple(triple)]
        except KeyError:
            raise ValueError(f"{tuple(triple)} has no visual phrase") from None

    def decode(self, phrase: str) -> tuple[str, str, str]:
        try:
            return self.triples[self.phrases.index(phrase)]
        except ValueError:
            raise ValueError(f"unknown visual phrase {phrase!r}") from None

    def index(self, triple: Sequence[str]) -> int:
        return self.phrases.index(self.encode(triple))


def _icvl_phrases() -> PhraseVocabulary:
    # short names: "sitting" = sitting while stationary, "standing" = standing
    # while stationary, "walking" = standing with walking
    short = {("sitting", "stationary"): "sitting", ("standing", "stationary"): "standing",
             ("standing", "walking"): "walking", ("standing", "running"): "running"}
    combos = [("sitting", "stationary", "nothing"), ("standing", "stationary", "nothing"),
              ("standing", "walking", "nothing"), ("standing", "running", "nothing"),
              ("sitting", "stationary", "texting"), ("standing", "stationary", "texting"),
              ("standing", "walking", "texting"), ("sitting", "stationary", "smoking"),
              ("standing", "stationary", "smoking"), ("standing", "walking", "smoking")]
    names = tuple(f"{short[c[:2]]} with {c[2]}" for c in combos)
    return PhraseVocabulary(names, tuple(combos))


ICVL_PHRASES = _icvl_phrases()


def phrase_encode(triple: Sequence[str], vocab: PhraseVocabulary = ICVL_PHRASES) -> str:
    return vocab.encode(triple)


def phrase_decode(phrase: str, vocab: PhraseVocabulary = ICVL_PHRASES) -> tuple[str, str, str]:
    return vocab.decode(phrase)


def phrase_to_level_probs(phrase_probs: np.ndarray, vocab: PhraseVocabulary,
                          graph: DescriptorGraph = ICVL_GRAPH) -> tuple[np.ndarray, ...]:
    """Marginalize a posterior over phrases into one posterior per level."""
    out = []
    for k, lv in enumerate(graph.levels):
        p = np.zeros(len(lv.labels))
        for i, t in enumerate(vocab.triples):
            p[lv.index(t[k])] += phrase_probs[i]
        out.append(p)
    return tuple(out)
