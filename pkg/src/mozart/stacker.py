"""The end-to-end stacking protocol: meta dataset assembly, training, evaluation, run artifacts."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .data import PredictionTable, SplitAssignment, subdivide_validation
from .errors import InvalidArgument, TrainingDiverged, ValidationError
from .metrics import MetricSet, comparison_report, evaluate
from .optim import TrainConfig, TrainHistory, train

PRESETS = {"MOZART1": (1e-5, 500), "MOZART2": (1e-4, 300)}


@dataclass(frozen=True)
class ExperimentPreset:
    """Meta-network training recipe. Named presets pin (learning_rate, epochs)."""

    name: str
    learning_rate: float
    epochs: int
    batch_size: int = 32
    seed: int = 0
    patience: int = 5
    factor: float = 0.2
    min_lr: float = 1e-7

    def __post_init__(self):
        if self.name in PRESETS and (self.learning_rate, self.epochs) != PRESETS[self.name]:
            raise InvalidArgument(f"{self.name} fixes learning_rate={PRESETS[self.name][0]}, "
                                  f"epochs={PRESETS[self.name][1]}; use another name for custom runs")
        if not self.learning_rate > 0 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("learning_rate, epochs and batch_size must be positive")

    @classmethod
    def named(cls, name, **shared):
        if name not in PRESETS:
            raise InvalidArgument(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        lr, epochs = PRESETS[name]
        return cls(name, lr, epochs, **shared)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, initial_lr=self.learning_rate,
                           shuffle_seed=self.seed, patience=self.patience, factor=self.factor,
                           min_lr=self.min_lr)

    def to_dict(self):
        return asdict(self)


MOZART1 = ExperimentPreset.named("MOZART1")
MOZART2 = ExperimentPreset.named("MOZART2")


class MetaSet(NamedTuple):
    ids: list
    features: np.ndarray
    labels: np.ndarray


def _meta_set(preds, ids):
    rows = preds.rows(ids)
    return MetaSet(list(ids), preds.probs[rows], preds.labels[rows].astype(np.float64).reshape(-1, 1))


def assemble_meta_dataset(preds: PredictionTable, split: SplitAssignment, seed=0):
    """(meta_train, meta_val, test) from the validation and test splits.

    Validation ids are subdivided 80/20 (stratified); test ids are kept apart.
    """
    preds.rows(list(split.validation) + list(split.test))
    meta_train_ids, meta_val_ids = subdivide_validation(split.validation, preds.label_map, seed)
    test_ids = list(split.test)
    overlap = set(test_ids) & (set(meta_train_ids) | set(meta_val_ids))
    if overlap:
        raise ValidationError(f"test ids also appear in the validation split: {sorted(overlap)[:10]}")
    return _meta_set(preds, meta_train_ids), _meta_set(preds, meta_val_ids), _meta_set(preds, test_ids)


@dataclass
class StackRun:
    preset: ExperimentPreset
    split: SplitAssignment
    models: list
    network: nn.NetworkState
    history: TrainHistory
    metrics: dict  # "meta_train" | "meta_val" | "test" -> MetricSet
    base_metrics: dict  # model name -> MetricSet on the test split
    counts: dict = field(default_factory=dict)

    def comparison(self):
        return comparison_report(list(self.base_metrics.items()) + [(self.preset.name, self.metrics["test"])])


def _predict(net, x):
    return nn.forward_pass(net, x, nn.Mode.INFERENCE)[0]


def run_mozart(preset: ExperimentPreset, preds: PredictionTable, split: SplitAssignment) -> StackRun:
    meta_train, meta_val, test = assemble_meta_dataset(preds, split, preset.seed)
    if set(meta_train.ids) & set(split.test):
        raise ValidationError("test ids leaked into meta training")
    net = nn.make_meta_network(len(preds.models), preset.seed)
    try:
        best, history = train(net, (meta_train.features, meta_train.labels),
                              (meta_val.features, meta_val.labels), preset.train_config())
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"{preset.name}: {exc}", exc.epoch) from exc

    metrics = {name: evaluate(s.labels, _predict(best, s.features))
               for name, s in (("meta_train", meta_train), ("meta_val", meta_val), ("test", test))}
    base = {m: evaluate(test.labels, test.features[:, k]) for k, m in enumerate(preds.models)}
    counts = {"meta_train": len(meta_train.ids), "meta_val": len(meta_val.ids), "test": len(test.ids)}
    return StackRun(preset, split, list(preds.models), best, history, metrics, base, counts)


def compare_runs(runs) -> str:
    """Base models (from the first run) followed by one column per run."""
    runs = list(runs)
    if not runs:
        raise InvalidArgument("no runs to compare")
    columns = list(runs[0].base_metrics.items())
    taken = {name for name, _ in columns}
    for run in runs:
        name, k = run.preset.name, 2
        while name in taken:
            name = f"{run.preset.name}#{k}"
            k += 1
        taken.add(name)
        columns.append((name, run.metrics["test"]))
    return comparison_report(columns)


# -- persistence -------------------------------------------------------------

RUN_FILES = ("run.json", "split.json", "weights.json", "history.csv", "metrics.json", "metrics.csv")


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_run(run: StackRun, directory, inputs=None) -> Path:
    """Write a run directory. ``inputs`` maps a label to a file whose digest is recorded."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    split_text = run.split.dumps()
    digests = {label: hashlib.sha256(Path(p).read_bytes()).hexdigest() for label, p in sorted((inputs or {}).items())}
    digests["split"] = sha256_text(split_text)
    manifest = {
        "format": "mozart-run",
        "format_version": 1,
        "preset": run.preset.to_dict(),
        "seeds": {"network": run.preset.seed, "shuffle": run.preset.seed, "subdivision": run.preset.seed,
                  "split": run.split.seed},
        "models": run.models,
        "counts": run.counts,
        "input_digests": digests,
        "files": list(RUN_FILES[1:]),
    }
    metrics = {"meta": {k: v.as_dict() for k, v in run.metrics.items()},
               "base": {k: v.as_dict() for k, v in run.base_metrics.items()}}
    for name, text in (("run.json", _dump(manifest)), ("split.json", split_text),
                       ("weights.json", nn.dumps_network(run.network)), ("history.csv", run.history.to_csv()),
                       ("metrics.json", _dump(metrics)), ("metrics.csv", run.comparison())):
        (d / name).write_text(text, encoding="utf-8", newline="\n")
    return d


def load_run(directory) -> StackRun:
    d = Path(directory)
    missing = [f for f in RUN_FILES if not (d / f).is_file()]
    if missing:
        raise ValidationError(f"{d}: not a run directory (missing {', '.join(missing)})")
    try:
        manifest = json.loads((d / "run.json").read_text(encoding="utf-8"))
        if manifest.get("format") != "mozart-run":
            raise ValidationError(f"{d}/run.json is not a run manifest")
        preset = ExperimentPreset(**manifest["preset"])
        split = SplitAssignment.load(d / "split.json")
        net = nn.load_network(d / "weights.json")
        history = TrainHistory.from_csv((d / "history.csv").read_text(encoding="utf-8"))
        metrics = json.loads((d / "metrics.json").read_text(encoding="utf-8"))
        meta = {k: MetricSet(**v) for k, v in metrics["meta"].items()}
        base = {k: MetricSet(**v) for k, v in metrics["base"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{d}: corrupt run directory ({exc})") from exc
    return StackRun(preset, split, manifest["models"], net, history, meta, base, manifest.get("counts", {}))
