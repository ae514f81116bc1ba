"""Command-line entry point: ``mozart {split,simulate,train,report}``.

Exit codes: 0 success, 2 bad input or usage, 3 numerical failure.
Command-line flags override fields of the ``--config`` document.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (DEFAULT_RATIOS, SplitAssignment, SynthConfig, load_predictions,
                   load_registry, stratified_split, synth_base_learners)
from .errors import MozartError, TrainingDiverged
from .metrics import evaluate
from .stacker import PRESETS, ExperimentPreset, compare_runs, load_run, run_mozart, save_run

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(MozartError):
    pass


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


# -- configuration document ---------------------------------------------------

TOP_KEYS = {"dataset", "split", "preset", "out"}
DATASET_KEYS = {"predictions", "registry", "synth"}
SPLIT_KEYS = {"manifest", "ratios", "seed"}
PRESET_KEYS = {"name", "names", "seed", "batch_size", "learning_rate", "epochs"}


def _reject_unknown(section, allowed, where):
    if not isinstance(section, dict):
        raise UsageError(f"{where} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def load_config(path):
    """Parse and validate a run configuration document (JSON).

    Relative paths inside it are resolved against the document's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    _reject_unknown(doc, TOP_KEYS, "config")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    dataset = doc.get("dataset", {})
    _reject_unknown(dataset, DATASET_KEYS, "dataset")
    if len(dataset) > 1:
        raise UsageError("dataset section must name exactly one source (predictions, registry or synth)")
    for key in ("predictions", "registry"):
        if key in dataset:
            dataset[key] = resolve(dataset[key])
    split = doc.get("split", {})
    _reject_unknown(split, SPLIT_KEYS, "split")
    if "manifest" in split:
        split["manifest"] = resolve(split["manifest"])
    preset = doc.get("preset", {})
    _reject_unknown(preset, PRESET_KEYS, "preset")
    out = resolve(doc["out"]) if "out" in doc else None
    return {"dataset": dataset, "split": split, "preset": preset, "out": out}


def _empty_config():
    return {"dataset": {}, "split": {}, "preset": {}, "out": None}


def presets_from(section, seed_override=None):
    section = dict(section)
    names = section.pop("names", None) or [section.pop("name", "MOZART2")]
    section.pop("name", None)
    if seed_override is not None:
        section["seed"] = seed_override
    shared = {k: section[k] for k in ("seed", "batch_size") if k in section}
    out = []
    for name in names:
        if name in PRESETS:
            if "learning_rate" in section or "epochs" in section:
                raise UsageError(f"{name} fixes learning_rate and epochs; use a custom name to override them")
            out.append(ExperimentPreset.named(name, **shared))
        else:
            if "learning_rate" not in section or "epochs" not in section:
                raise UsageError(f"custom preset {name!r} needs learning_rate and epochs")
            out.append(ExperimentPreset(name, float(section["learning_rate"]), int(section["epochs"]), **shared))
    return out


# -- commands -------------------------------------------------------------------

def _class_counts(ids, labels):
    c1 = sum(labels[i] for i in ids)
    return len(ids) - c1, c1


def cmd_split(args, cfg):
    registry = args.registry or cfg["dataset"].get("registry") or cfg["dataset"].get("predictions")
    if registry is None:
        raise UsageError("split needs a registry file")
    ratios = tuple(args.ratios) if args.ratios else tuple(cfg["split"].get("ratios", DEFAULT_RATIOS))
    seed = args.seed if args.seed is not None else cfg["split"].get("seed", 0)
    out = args.out or cfg["out"] or "split.json"
    records = load_registry(registry)
    split = stratified_split(records, ratios, seed)
    labels = {r.id: r.label for r in records}
    _write(out, split.dumps())
    for name, ids in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        n0, n1 = _class_counts(ids, labels)
        print(f"{name}: {len(ids)} (class0={n0}, class1={n1})")
    print(f"wrote {out}")
    return EXIT_OK


def _synth_config(args, cfg):
    synth = cfg["dataset"].get("synth")
    if synth is None:
        raise UsageError("simulate needs a config with a dataset.synth section (or a bare synth document)")
    synth = dict(synth)
    if args.seed is not None:
        synth["seed"] = args.seed
    return SynthConfig.from_dict(synth)


def _load_simulate_config(path):
    """Accept either a full run config or a bare synth document."""
    raw = json.loads(Path(path).read_text(encoding="utf-8")) if Path(path).is_file() else None
    if raw is None:
        raise FileNotFoundError(f"no such file: {path}")
    if isinstance(raw, dict) and "dataset" not in raw and "n_samples" in raw:
        cfg = _empty_config()
        cfg["dataset"] = {"synth": raw}
        return cfg
    return load_config(path)


def cmd_simulate(args, _cfg):
    if not args.config:
        raise UsageError("simulate needs --config")
    cfg = _load_simulate_config(args.config)
    synth = _synth_config(args, cfg)
    out = args.out or cfg["out"] or "predictions.csv"
    if Path(out).is_dir():
        out = Path(out) / "predictions.csv"
    table = synth_base_learners(synth)
    _write(out, table.to_csv())
    for k, model in enumerate(table.models):
        print(f"{model}: accuracy {evaluate(table.labels, table.probs[:, k]).accuracy:.4f}")
    print(f"wrote {out} ({len(table)} rows)")
    return EXIT_OK


def _print_metrics(run):
    losses = run.history.column("val_loss")
    best = losses.index(min(losses))
    print(f"[{run.preset.name}] best epoch {best + 1} of {len(losses)}, val_loss={losses[best]:.6f}")
    for part in ("meta_train", "meta_val", "test"):
        m = run.metrics[part]
        print(f"  {part:<10} acc={m.accuracy:.4f} prec={m.precision:.4f} rec={m.recall:.4f} f1={m.f1:.4f}")


def cmd_train(args, cfg):
    if not args.config:
        raise UsageError("train needs --config")
    out = Path(args.out or cfg["out"] or "runs")
    dataset = cfg["dataset"]
    inputs = {}
    if "predictions" in dataset:
        table = load_predictions(dataset["predictions"])
        inputs["predictions"] = dataset["predictions"]
    elif "synth" in dataset:
        synth = dict(dataset["synth"])
        if args.seed is not None:
            synth["seed"] = args.seed
        table = synth_base_learners(SynthConfig.from_dict(synth))
        _write(out / "predictions.csv", table.to_csv())
        inputs["predictions"] = out / "predictions.csv"
    else:
        raise UsageError("train needs dataset.predictions or dataset.synth")

    split_cfg = cfg["split"]
    if "manifest" in split_cfg:
        split = SplitAssignment.load(split_cfg["manifest"])
        inputs["split_manifest"] = split_cfg["manifest"]
    else:
        seed = args.seed if args.seed is not None else split_cfg.get("seed", 0)
        split = stratified_split(table.records(), tuple(split_cfg.get("ratios", DEFAULT_RATIOS)), seed)
        _write(out / "split.json", split.dumps())

    section = dict(cfg["preset"])
    if args.preset:
        section["names"] = args.preset
    presets = presets_from(section, args.seed)
    runs = []
    for preset in presets:
        run = run_mozart(preset, table, split)
        save_run(run, out / preset.name, inputs)
        _print_metrics(run)
        runs.append(run)
    report = compare_runs(runs)
    _write(out / "comparison.csv", report)
    print(report, end="")
    return EXIT_OK


def cmd_report(args, _cfg):
    runs = [load_run(d) for d in args.runs]
    report = compare_runs(runs)
    print(report, end="")
    if args.out:
        out = Path(args.out)
        _write(out / "comparison.csv", report)
        for d, run in zip(args.runs, runs):
            _write(out / f"{Path(d).name}_history.csv", run.history.to_csv())
            _write(out / f"{Path(d).name}_metrics.csv", run.comparison())
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration document")
    common.add_argument("--seed", type=int, help="override every seed in the document")
    common.add_argument("--out", help="output file or directory")

    parser = argparse.ArgumentParser(prog="mozart", description="Stacked-ensemble meta-learner toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", parents=[common], help="stratified train/validation/test split")
    p.add_argument("registry", nargs="?", help="CSV with id,label[,source_path]")
    p.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("simulate", parents=[common], help="write synthetic base-model predictions")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train the meta-network for one or more presets")
    p.add_argument("--preset", action="append", help="preset name (repeatable); overrides the document")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", parents=[common], help="comparison table and curve data from run directories")
    p.add_argument("runs", nargs="+", help="run directories written by 'train'")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config and args.command not in ("simulate",) else _empty_config()
        return args.func(args, cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MozartError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
