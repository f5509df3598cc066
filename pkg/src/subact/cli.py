"""``subact`` command line: train | detect | eval | synth | bench.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import descriptor as desc
from .config import ConfigError, load_config
from .imaging import DataError, parse_annotations, write_annotations
from .modelio import ModelFormatError

EXIT_CONFIG = 2
EXIT_DATA = 3


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args):
    overrides = list(args.set or [])
    for key, attr in (("mode", "mode"), ("model.dir", "models"), ("scene", "scene"),
                      ("eval.sigma", "sigma"), ("eval.tau", "tau")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides.append(f"{key}={v}")
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    from . import synth
    from .pipeline import save_dataset
    items = synth.standard_dataset(args.seed, width=args.width, height=args.height,
                                   duration=args.duration, noise=args.noise)
    paths = save_dataset(args.out, items)
    _log(f"wrote {len(paths)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import load_dataset, run_train
    cfg = _config(args)
    data = load_dataset(args.data)
    out = args.out or cfg["model.dir"]
    if not out:
        raise ConfigError("no output directory: pass --out or set model.dir")
    art = run_train(cfg, [(s, r) for s, r, _ in data], out, log=_log)
    for name, path in art.paths.items():
        acc = art.train_accuracy.get(name)
        print(f"{name}: {path}" + (f"  (training accuracy {acc:.3f})" if acc is not None else ""))
    return 0


def cmd_detect(args) -> int:
    from .pipeline import load_dataset, load_models, run_detect
    cfg = _config(args)
    data = load_dataset(args.data)
    oracle = cfg["mode"] == "oracle-boxes"
    models = load_models(cfg, need_detector=not oracle, need_phrase=args.phrase)
    out = Path(args.out)
    multi = len(data) > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    for seq, recs, name in data:
        if oracle and not recs:
            raise DataError(f"{name}: oracle-boxes mode needs annotations.txt")
        overlay = Path(args.overlay) / name if args.overlay and multi else args.overlay
        dump = Path(args.dump_features) / name if args.dump_features and multi else args.dump_features
        res = run_detect(cfg, models, seq, recs, use_phrase=args.phrase,
                         overlay_dir=overlay, dump_dir=dump)
        target = out / f"{name}.txt" if multi else out
        write_annotations(res.records, target, models.graph)
        _log(f"{name}: {len(res.records)} predictions over {res.frames} frames -> {target}")
    return 0


def _pairs(pred: Path, gt: Path):
    """(prediction file, ground-truth file) pairs for a file or directory layout."""
    if pred.is_file():
        gfile = gt / "annotations.txt" if gt.is_dir() else gt
        return [(pred, gfile)]
    if not pred.is_dir():
        raise DataError(f"{pred}: no such prediction file or directory")
    pairs = []
    for p in sorted(pred.glob("*.txt")):
        g = gt / p.stem / "annotations.txt"
        if not g.exists():
            raise DataError(f"no ground truth for {p.name} (looked for {g})")
        pairs.append((p, g))
    if not pairs:
        raise DataError(f"{pred}: no prediction files")
    return pairs


def cmd_eval(args) -> int:
    from .pipeline import merge_sequences, run_eval
    cfg = _config(args)
    if args.kth or cfg["eval.kth"]:
        return _eval_kth(cfg, args)
    pairs = _pairs(Path(args.pred), Path(args.gt))
    preds = merge_sequences([parse_annotations(p) for p, _ in pairs])
    truth = merge_sequences([parse_annotations(g) for _, g in pairs])
    rep = run_eval(preds, truth, desc.ICVL_GRAPH, cfg["eval.sigma"], cfg["eval.tau"])
    print(rep.to_text(), end="")
    for w in rep.warnings:
        _log(f"warning: {w}")
    if args.csv:
        Path(args.csv).write_text(rep.csv())
    if args.confusion_dir:
        d = Path(args.confusion_dir)
        d.mkdir(parents=True, exist_ok=True)
        for lv in rep.graph.levels:
            (d / f"confusion_{lv.name}.csv").write_text(rep.confusion_csv(lv.name))
    return 0


def _eval_kth(cfg, args) -> int:
    from .kth import run_kth
    root = args.kth_root or os.environ.get("SUBACT_KTH_ROOT")
    if not root:
        raise ConfigError("KTH mode needs --kth-root or SUBACT_KTH_ROOT")
    res = run_kth(cfg, root, log=_log)
    for name, pred, truth in res.per_video:
        print(f"{name}: predicted {'/'.join(pred)}  truth {'/'.join(truth)}")
    print(f"KTH video accuracy: {100 * res.accuracy:.1f}%  (published reference 96.3%)")
    return 0


def cmd_bench(args) -> int:
    from . import synth
    from .evaluation import StageTimer, bench
    from .pipeline import load_dataset, load_models, run_detect
    cfg = _config(args)
    models = load_models(cfg, need_detector=cfg["mode"] == "hog-detector")
    if args.data:
        data = [(s, r) for s, r, _ in load_dataset(args.data)]
    else:
        data = synth.standard_dataset(args.seed)[:args.sequences]
    timer = StageTimer()
    for seq, recs in data:
        run_detect(cfg, models, seq, recs, timer=timer)
    print(bench(timer).to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subact", description="Sub-action detection in surveillance video.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--models", help="model directory (model.dir)")

    sp = sub.add_parser("synth", help="generate the synthetic 12-sequence dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--width", type=int, default=640)
    sp.add_argument("--height", type=int, default=320)
    sp.add_argument("--duration", type=int, default=60)
    sp.add_argument("--noise", type=float, default=5.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the level CNNs, phrase CNN, detector and priors")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset root or one sequence directory")
    sp.add_argument("--out", help="output model directory (default: model.dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("detect", help="detect and label sub-actions")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="prediction file (or directory for several sequences)")
    sp.add_argument("--mode", choices=["oracle-boxes", "hog-detector", "oracle", "detector"])
    sp.add_argument("--scene", help="scene id for the priors (default: from the manifest)")
    sp.add_argument("--phrase", action="store_true", help="use the visual-phrase baseline network")
    sp.add_argument("--overlay", help="write PGM overlays with boxes and labels here")
    sp.add_argument("--dump-features", help="write BDI/MHI/WAI maps as PGM here")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("--pred", help="prediction file or directory")
    sp.add_argument("--gt", help="annotation file, sequence directory or dataset root")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--csv", help="write class,frame_ap,video_ap here")
    sp.add_argument("--confusion-dir", help="write per-level confusion CSVs here")
    sp.add_argument("--kth", action="store_true", help="KTH protocol with majority voting")
    sp.add_argument("--kth-root", help="KTH video directory (default: $SUBACT_KTH_ROOT)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time the pipeline per stage")
    common(sp)
    sp.add_argument("--data", help="dataset to time (default: generated 640x320 sequences)")
    sp.add_argument("--mode", choices=["oracle-boxes", "hog-detector", "oracle", "detector"],
                    default="hog-detector")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--sequences", type=int, default=4)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "eval" and not (args.kth or args.pred and args.gt):
        if not args.kth:
            _log("error: eval needs --pred and --gt (or --kth)")
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except (DataError, ModelFormatError) as e:
        _log(f"data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
