"""``blobsense`` command line: gen | train | eval | ablate | peaks | plot.

Every failure is reported as one JSON line on stderr, for example::

    {"error": "config", "code": 3, "message": "unknown training config keys ['lr']"}

Exit codes: 0 ok, 2 usage, 3 config, 4 io, 5 validation.  Each successful
run leaves a ``<output>.run.json`` manifest next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__, hourglass, synth
from .errors import BlobsenseError, ConfigError, ValidationError
from .froc import default_thresholds, froc_curve, operating_point, write_curve
from .hourglass import HourglassConfig
from .peaks import PeakParams, find_peaks
from .pipeline import ABLATION_HEADER, predict_heatmaps, run_variant, thread_count, write_ablation
from .plot import plot_files
from .trainer import VARIANTS, TrainConfig, Trainer, variant_config, write_trace

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_INTERNAL = 0, 2, 3, 4, 5, 1
PEAKS_HEADER = ("image_id", "row", "col", "confidence")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object of settings")
    return data


def manifest_path(out: Path) -> Path:
    """``data/`` -> ``data.run.json``; ``froc.csv`` -> ``froc.csv.run.json``."""
    out = Path(out)
    return out.parent / (out.name + ".run.json")


def write_run_manifest(args, config: dict, inputs: dict, outputs: dict, started: float) -> Path:
    record = {
        "subcommand": args.command,
        "tool_version": __version__,
        "seed": args.seed,
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "argv": list(args.argv),
        "duration_s": round(time.perf_counter() - started, 3),
    }
    path = manifest_path(Path(args.out))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _model_section(raw: dict) -> tuple:
    raw = dict(raw)
    model = raw.pop("model", {})
    if not isinstance(model, dict):
        raise ConfigError("'model' must be an object with stacks/depth/channels")
    bad = set(model) - {"stacks", "depth", "channels", "kernel_size"}
    if bad:
        raise ConfigError(f"unknown model config keys {sorted(bad)}")
    return model, raw


def resolve_training(args) -> tuple:
    """Merge config file, flag overrides and seed into (HourglassConfig, TrainConfig)."""
    model, train = _model_section(read_config(args.config))
    for flag, key in (("stacks", "stacks"), ("depth", "depth"), ("channels", "channels")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    for flag, key in (("lr", "learning_rate"), ("epochs", "epochs"), ("images_per_epoch", "images_per_epoch"),
                      ("phase1_epochs", "phase1_epochs"), ("phase1_steps", "phase1_steps")):
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if args.seed is not None:
        train["seed"] = args.seed
    seed = train.get("seed", 0)
    try:
        hc = HourglassConfig(**model, seed=seed).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    tc = TrainConfig.from_dict(train)
    return hc, tc


def training_snapshot(hc: HourglassConfig, tc: TrainConfig) -> dict:
    d = tc.to_dict()
    d["model"] = {k: v for k, v in asdict(hc).items() if k != "seed"}
    return d


def load_split(data: str, split: str):
    images, anns, records = synth.load_arrays(data, split)
    if len(records) == 0:
        raise ValidationError(f"{data}: split '{split}' is empty")
    return images, anns, records


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, started):
    raw = read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    n_images = dict(raw.get("n_images", synth.GenConfig().n_images))
    for split in synth.SPLITS:
        value = getattr(args, f"n_{split}")
        if value is not None:
            n_images[split] = value
    raw["n_images"] = n_images
    if args.image_size is not None:
        raw["image_size"] = args.image_size
    cfg = synth.GenConfig.from_dict(raw)
    manifest = synth.generate(cfg, args.out)
    args.seed = cfg.seed
    write_run_manifest(args, manifest["config"], {}, {"dataset": args.out}, started)
    print(json.dumps(manifest["summary"], sort_keys=True))


def cmd_train(args, started):
    hc, tc = resolve_training(args)
    tc = variant_config(tc, args.variant)
    images, anns, _ = load_split(args.data, args.split)
    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, images, anns, tc, args.checkpoint_dir)
        hc = trainer.model.config
    else:
        trainer = Trainer(hourglass.build(hc), images, anns, tc, args.checkpoint_dir)
    trainer.fit()
    trainer.save(out)
    trace = Path(args.trace) if args.trace else out.with_name(out.stem + ".trace.csv")
    write_trace(trainer.trace, trace)
    args.seed = tc.seed
    config = training_snapshot(hc, tc)
    config["variant"] = args.variant
    write_run_manifest(args, config, {"data": args.data, "resume": args.resume or ""},
                       {"checkpoint": out, "trace": trace}, started)
    last = trainer.trace[-1] if trainer.trace else None
    print(json.dumps({"steps": trainer.opt.step, "final_total": None if last is None else last[4]}))


def cmd_eval(args, started):
    model, _, _ = hourglass.load(args.ckpt)
    images, anns, _ = load_split(args.data, args.split)
    threads = thread_count()
    heatmaps = predict_heatmaps(model, images, threads)
    thresholds = None if args.grid is None else default_thresholds(args.grid)
    params = PeakParams(0.0, args.nms_window)
    curve = froc_curve(heatmaps, anns, thresholds, params)
    write_curve(curve, args.out)
    op = operating_point(curve, args.max_fpi)
    config = {"split": args.split, "nms_window": args.nms_window, "grid": args.grid, "max_fpi": args.max_fpi,
              "threads": threads}
    write_run_manifest(args, config, {"data": args.data, "ckpt": args.ckpt}, {"curve": args.out}, started)
    print(json.dumps({"max_fpi": args.max_fpi, "operating_point": None if op is None else op._asdict()}))


def cmd_ablate(args, started):
    hc, tc = resolve_training(args)
    train = load_split(args.data, "train")
    test = load_split(args.data, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = thread_count()
    rows = []
    variants = args.variants or list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    for v in variants:
        row, trainer = run_variant(v, train[0], train[1], test[0], test[1], tc, hc, args.max_fpi, threads)
        write_curve(row.curve, out / f"froc_{v}.csv")
        write_trace(trainer.trace, out / f"trace_{v}.csv")
        trainer.save(out / f"model_{v}.ckpt")
        rows.append(row)
    write_ablation(rows, out / "ablation.csv")
    config = training_snapshot(hc, tc)
    config.update(variants=variants, max_fpi=args.max_fpi, threads=threads)
    write_run_manifest(args, config, {"data": args.data}, {"table": out / "ablation.csv"}, started)
    print(json.dumps([{k: getattr(r, k) for k in ABLATION_HEADER} for r in rows]))


def cmd_peaks(args, started):
    model, _, _ = hourglass.load(args.ckpt)
    images, _, records = load_split(args.data, args.split)
    params = PeakParams(args.threshold, args.nms_window)
    heatmaps = predict_heatmaps(model, images, thread_count())
    tmp = f"{args.out}.tmp"
    count = 0
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PEAKS_HEADER)
        for rec, heat in zip(records, heatmaps):
            for p in find_peaks(heat, params):
                w.writerow([rec.image_id, p.row, p.col, repr(p.confidence)])
                count += 1
    os.replace(tmp, args.out)
    config = {"split": args.split, "threshold": args.threshold, "nms_window": args.nms_window}
    write_run_manifest(args, config, {"data": args.data, "ckpt": args.ckpt}, {"peaks": args.out}, started)
    print(json.dumps({"images": len(records), "peaks": count}))


def _curve_specs(args) -> List[tuple]:
    specs = []
    for item in args.curve or []:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise UsageError(f"--curve expects LABEL=PATH, got {item!r}")
        specs.append((label, path))
    if args.ablation_dir:
        found = sorted(Path(args.ablation_dir).glob("froc_*.csv"))
        order = {v: i for i, v in enumerate(VARIANTS)}
        found.sort(key=lambda p: (order.get(p.stem[5:], len(order)), p.name))
        specs.extend((p.stem[5:], str(p)) for p in found)
    if not specs:
        raise UsageError("plot needs at least one --curve or an --ablation-dir with froc_*.csv files")
    return specs


def cmd_plot(args, started):
    specs = _curve_specs(args)
    ablation = args.ablation
    if ablation is None and args.ablation_dir and (Path(args.ablation_dir) / "ablation.csv").is_file():
        ablation = str(Path(args.ablation_dir) / "ablation.csv")
    plot_files(specs, args.out, ablation, args.max_fpi, args.title)
    config = {"max_fpi": args.max_fpi, "title": args.title}
    inputs = {label: path for label, path in specs}
    if ablation:
        inputs["ablation"] = ablation
    write_run_manifest(args, config, inputs, {"svg": args.out}, started)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_training_flags(p):
    p.add_argument("--config", help="training config JSON (TrainConfig keys plus optional 'model')")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="phase-2 epochs")
    p.add_argument("--images-per-epoch", type=int)
    p.add_argument("--phase1-epochs", type=int)
    p.add_argument("--phase1-steps", type=int)
    p.add_argument("--stacks", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--channels", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blobsense", description="Hypersensitive blob-heatmap detection pipeline.")
    parser.add_argument("--version", action="version", version=f"blobsense {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, help="random seed (recorded in the run manifest)")
        return p

    p = add("gen", "generate a synthetic dataset")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--out", required=True, help="dataset directory")
    for split in synth.SPLITS:
        p.add_argument(f"--n-{split}", type=int)
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=cmd_gen)

    p = add("train", "train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", default="train")
    p.add_argument("--variant", default="full", choices=VARIANTS)
    p.add_argument("--trace", help="loss-trace CSV (default: <out stem>.trace.csv)")
    p.add_argument("--checkpoint-dir", help="directory for per-epoch checkpoints")
    p.add_argument("--resume", help="training checkpoint to continue from")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = add("eval", "sensitivity / FPI curve of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--nms-window", type=int, default=3)
    p.add_argument("--max-fpi", type=float, default=5.0)
    p.add_argument("--grid", type=int, help="use an evenly spaced grid of this many thresholds only")
    p.set_defaults(func=cmd_eval)

    p = add("ablate", "train and evaluate all six loss variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-fpi", type=float, default=5.0)
    p.add_argument("--variants", nargs="+", help=f"subset of {', '.join(VARIANTS)}")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = add("peaks", "extract peaks from a checkpoint's heatmaps")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="peaks CSV")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--nms-window", type=int, default=3)
    p.set_defaults(func=cmd_peaks)

    p = add("plot", "render curve CSVs to SVG")
    p.add_argument("--curve", action="append", metavar="LABEL=PATH")
    p.add_argument("--ablation-dir", help="directory written by 'ablate'")
    p.add_argument("--ablation", help="ablation CSV whose operating points are marked")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--max-fpi", type=float, default=10.0)
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        args.func(args, started)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (ValidationError, BlobsenseError) as exc:
        return _fail("validation", EXIT_VALIDATION, exc)
    except OSError as exc:
        return _fail("io", EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else exc)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
