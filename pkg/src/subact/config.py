"""Flat ``key=value`` pipeline configuration with typed defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping


class ConfigError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    out = tuple(float(t) for t in s.replace(",", " ").split())
    if not out:
        raise ValueError("empty list")
    return out


def _mode(s: str) -> str:
    v = s.strip()
    aliases = {"oracle": "oracle-boxes", "oracle-boxes": "oracle-boxes",
               "detector": "hog-detector", "hog-detector": "hog-detector"}
    if v not in aliases:
        raise ValueError(f"mode must be oracle-boxes or hog-detector, got {s!r}")
    return aliases[v]


def _str(s: str) -> str:
    return s.strip()


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "mode": (_mode, "oracle-boxes"),
    "scene": (_str, ""),
    # motion saliency
    "gmm.k": (int, 4),
    "gmm.lr": (float, 0.005),
    "gmm.bg_ratio": (float, 0.7),
    "gmm.match_sigma": (float, 2.5),
    "gmm.min_var": (float, 100.0),
    "minimap.min_fg_pixels": (int, 16),
    # detector
    "det.threshold": (float, 0.0),
    "det.nms_iou": (float, 0.45),
    "det.scales": (_floats, (1.0, 1.2, 1.44)),
    "det.C": (float, 100.0),
    # tracking
    "track.n_skip": (int, 15),
    "track.iou_gate": (float, 0.3),
    "track.q_pos": (float, 1.0),
    "track.q_vel": (float, 0.5),
    "track.r": (float, 2.0),
    # temporal features
    "feat.xi_thr": (float, 30.0),
    "feat.tau_max": (float, 255.0),
    "feat.tau_min": (float, 0.0),
    "feat.n": (int, 25),
    "feat.w1": (float, 0.6),
    "feat.abs_diff": (_bool, True),
    "feat.pad": (int, 10),
    # CNN training
    "train.iterations": (int, 1000),
    "train.batch_size": (int, 256),
    "train.lr": (float, 0.001),
    "train.momentum": (float, 0.9),
    "train.wd": (float, 0.0005),
    "train.flip_prob": (float, 0.5),
    "train.seed": (int, 0),
    "train.phrase": (_bool, True),
    "train.detector": (_bool, True),
    # descriptor post-processing
    "post.window": (int, 15),
    "post.prior_only": (_bool, False),
    "descriptor.file": (_str, ""),
    # artifacts
    "model.dir": (_str, ""),
    "model.posture": (_str, ""),
    "model.locomotion": (_str, ""),
    "model.gesture": (_str, ""),
    "model.phrase": (_str, ""),
    "model.detector": (_str, ""),
    # evaluation
    "eval.sigma": (float, 0.5),
    "eval.tau": (float, 0.5),
    "eval.kth": (_bool, False),
}


@dataclass
class PipelineConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def model_path(self, level: str) -> Path | None:
        """Explicit ``model.<level>`` path, else ``<model.dir>/<level>.bin``."""
        p = self.values.get(f"model.{level}", "")
        if p:
            return Path(p)
        if self.values["model.dir"]:
            return Path(self.values["model.dir"]) / f"{level}.bin"
        return None

    def descriptor_path(self) -> Path | None:
        if self.values["descriptor.file"]:
            return Path(self.values["descriptor.file"])
        if self.values["model.dir"]:
            return Path(self.values["model.dir"]) / "descriptor.txt"
        return None

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, tuple):
                return ",".join(repr(x) for x in v)
            if isinstance(v, bool):
                return "true" if v else "false"
            return str(v)
        return "".join(f"{k}={fmt(v)}\n" for k, v in self.values.items())


def parse_pairs(pairs: Iterable[tuple[str, str]], base: Mapping[str, Any] | None = None,
                where: str = "config") -> dict[str, Any]:
    out = dict(base) if base is not None else {k: d for k, (_, d) in SCHEMA.items()}
    for key, raw in pairs:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key][0](raw)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from None
    return out


def _validate(v: dict[str, Any]) -> None:
    checks = [
        (v["gmm.k"] >= 1, "gmm.k must be >= 1"),
        (0 < v["gmm.lr"] <= 1, "gmm.lr must be in (0, 1]"),
        (0 < v["gmm.bg_ratio"] <= 1, "gmm.bg_ratio must be in (0, 1]"),
        (0 < v["det.nms_iou"] <= 1, "det.nms_iou must be in (0, 1]"),
        (all(s >= 1 for s in v["det.scales"]), "det.scales must be >= 1"),
        (v["track.n_skip"] >= 0, "track.n_skip must be >= 0"),
        (v["feat.n"] >= 1, "feat.n must be >= 1"),
        (v["feat.tau_max"] > v["feat.tau_min"], "feat.tau_max must exceed feat.tau_min"),
        (0 <= v["feat.w1"] <= 1, "feat.w1 must be in [0, 1]"),
        (v["post.window"] >= 1, "post.window must be >= 1"),
        (v["train.iterations"] >= 1 and v["train.batch_size"] >= 1, "train sizes must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def load_config(path: str | os.PathLike | None = None,
                overrides: Iterable[str] = ()) -> PipelineConfig:
    """Defaults, then the file's ``key=value`` lines (``#`` comments), then ``key=value`` overrides."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            pairs.append((k, v))
        values = parse_pairs(pairs, values, str(path))
    pairs = []
    for o in overrides:
        if "=" not in o:
            raise ConfigError(f"override must be key=value, got {o!r}")
        pairs.append(tuple(o.split("=", 1)))
    values = parse_pairs(pairs, values, "override")
    _validate(values)
    return PipelineConfig(values)
