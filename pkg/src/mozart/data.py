"""Sample registries, stratified splits, prediction tables and the synthetic base-learner generator."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from statistics import NormalDist
from typing import Optional

import numpy as np

from .errors import InvalidArgument, ParseError, ValidationError

DEFAULT_RATIOS = (0.7, 0.2, 0.1)
SUBDIVISION_RATIOS = (0.8, 0.2)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: int
    source_path: Optional[str] = None


def _check_registry(records):
    records = list(records)
    if not records:
        raise InvalidArgument("registry is empty")
    seen = set()
    for r in records:
        if r.label not in (0, 1):
            raise InvalidArgument(f"sample {r.id!r} has label {r.label!r}; expected 0 or 1")
        if r.id in seen:
            raise InvalidArgument(f"duplicate sample id {r.id!r}")
        seen.add(r.id)
    return records


def load_registry(path) -> list:
    """Read ``id,label[,source_path,...]`` CSV; extra columns are ignored."""
    text = _read_text(path)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:2] != ["id", "label"]:
        raise ParseError("registry header must start with 'id,label'", line=1)
    src_col = header.index("source_path") if "source_path" in header else None
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        if row[1] not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {row[1]!r}", line=lineno)
        src = row[src_col] if src_col is not None and row[src_col] else None
        records.append(SampleRecord(row[0], int(row[1]), src))
    if not records:
        raise ParseError("registry has no rows")
    try:
        return _check_registry(records)
    except InvalidArgument as exc:
        raise ValidationError(str(exc)) from exc


def write_registry(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "source_path"])
    for r in records:
        w.writerow([r.id, r.label, r.source_path or ""])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


@dataclass
class SplitAssignment:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = DEFAULT_RATIOS

    def sizes(self):
        return len(self.train), len(self.validation), len(self.test)

    def to_dict(self):
        return {"format": "mozart-split", "seed": self.seed, "ratios": list(self.ratios),
                "train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "mozart-split":
            raise ValidationError("not a split manifest")
        split = cls(list(d["train"]), list(d["validation"]), list(d["test"]), d["seed"], tuple(d["ratios"]))
        sets = [set(split.train), set(split.validation), set(split.test)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise ValidationError("split manifest lists an id in more than one split")
        return split

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(_read_text(path)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: malformed split manifest ({exc})") from exc


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if any(not r > 0 for r in ratios):
        raise InvalidArgument(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def _stratified(ids_by_class, ratios, rng):
    """Per class: shuffle, give floor(r * n) to every part but the last, remainder to the last."""
    parts = [[] for _ in ratios]
    for label in sorted(ids_by_class):
        ids = ids_by_class[label]
        n = len(ids)
        shuffled = [ids[k] for k in rng.permutation(n)]
        # exact decimal arithmetic so 0.7 * 30 floors to 21, not 20
        counts = [math.floor(Fraction(repr(r)) * n) for r in ratios[:-1]]
        lo = 0
        for part, c in zip(parts, counts):
            part.extend(shuffled[lo:lo + c])
            lo += c
        parts[-1].extend(shuffled[lo:])
    return parts


def _group(records):
    groups = {}
    for r in records:
        groups.setdefault(r.label, []).append(r.id)
    return groups


def stratified_split(records, ratios=DEFAULT_RATIOS, seed=0) -> SplitAssignment:
    """Seeded per-class train/validation/test split; floor rounding, remainders go to test."""
    ratios = _check_ratios(ratios)
    if len(ratios) != 3:
        raise InvalidArgument("need exactly three ratios (train, validation, test)")
    records = _check_registry(records)
    groups = _group(records)
    for label, ids in groups.items():
        if len(ids) < 3:
            raise InvalidArgument(f"class {label} has {len(ids)} samples; at least 3 are required")
    train, val, test = _stratified(groups, ratios, np.random.default_rng(seed))
    return SplitAssignment(train, val, test, seed, ratios)


def subdivide_validation(val_ids, labels, seed=0):
    """Stratified 80/20 split of the validation ids into (meta_train, meta_val).

    ``labels`` maps id -> 0/1.
    """
    val_ids = list(val_ids)
    if len(val_ids) < 5:
        raise InvalidArgument(f"validation set has {len(val_ids)} samples; at least 5 are required")
    if len(set(val_ids)) != len(val_ids):
        raise InvalidArgument("validation ids are not unique")
    groups = {}
    for i in val_ids:
        groups.setdefault(int(labels[i]), []).append(i)
    meta_train, meta_val = _stratified(groups, SUBDIVISION_RATIOS, np.random.default_rng(seed))
    return meta_train, meta_val


@dataclass
class PredictionTable:
    """One row per sample: id, true label, one probability per base model."""

    ids: list
    labels: np.ndarray
    models: list
    probs: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim == 1:
            self.probs = self.probs.reshape(-1, 1)
        self.models = [str(m) for m in self.models]
        n = len(self.ids)
        if self.labels.shape != (n,) or self.probs.shape != (n, len(self.models)):
            raise ValidationError("prediction table columns disagree in length")
        if not self.models:
            raise ValidationError("prediction table has no model columns")
        if len(set(self.models)) != len(self.models):
            raise ValidationError("duplicate model column names")
        if len(set(self.ids)) != n:
            raise ValidationError("duplicate sample ids in prediction table")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 or 1")
        bad = ~((self.probs >= 0.0) & (self.probs <= 1.0))
        if bad.any():
            r, c = map(int, np.argwhere(bad)[0])
            raise ValidationError(f"probability {self.probs[r, c]!r} outside [0, 1] at row {self.ids[r]!r}, "
                                  f"column {self.models[c]!r}")

    def __len__(self):
        return len(self.ids)

    @property
    def label_map(self):
        return dict(zip(self.ids, self.labels.tolist()))

    def records(self):
        return [SampleRecord(i, int(y)) for i, y in zip(self.ids, self.labels)]

    def column(self, model):
        return self.probs[:, self.models.index(model)]

    def rows(self, ids):
        """Row positions for ``ids``; raises ValidationError listing any that are missing."""
        index = {i: k for k, i in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise ValidationError(f"{len(missing)} ids have no predictions: {shown}")
        return np.array([index[i] for i in ids], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label"] + self.models)
        for i, y, row in zip(self.ids, self.labels.tolist(), self.probs.tolist()):
            w.writerow([i, y] + [repr(v) for v in row])
        return buf.getvalue()


def write_predictions(table: PredictionTable, path) -> None:
    Path(path).write_text(table.to_csv(), encoding="utf-8", newline="\n")


def _read_text(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path.read_text(encoding="utf-8")


def parse_predictions(text) -> PredictionTable:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise ParseError("file is empty", line=1)
    if header[:2] != ["id", "label"] or len(header) < 3:
        raise ParseError("header must be 'id,label,<model>,...'", line=1)
    models = header[2:]
    if any(not m for m in models) or len(set(models)) != len(models):
        raise ParseError("model column names must be non-empty and unique", line=1)
    ids, labels, rows, seen = [], [], [], {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        sid = row[0]
        if not sid:
            raise ParseError("empty sample id", line=lineno)
        if sid in seen:
            raise ValidationError(f"line {lineno}: duplicate id {sid!r} (first on line {seen[sid]})")
        seen[sid] = lineno
        if row[1] not in ("0", "1"):
            raise ValidationError(f"line {lineno}: label must be 0 or 1, got {row[1]!r}")
        values = []
        for model, cell in zip(models, row[2:]):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"column {model!r}: {cell!r} is not a number", line=lineno) from None
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"line {lineno}, row {sid!r}, column {model!r}: "
                                      f"probability {cell} outside [0, 1]")
            values.append(v)
        ids.append(sid)
        labels.append(int(row[1]))
        rows.append(values)
    if not ids:
        raise ParseError("no data rows")
    return PredictionTable(ids, np.array(labels), models, np.array(rows))


def load_predictions(path) -> PredictionTable:
    return parse_predictions(_read_text(path))


# -- synthetic base learners ------------------------------------------------

@dataclass
class SynthConfig:
    """Logistic latent-variable generator for correlated base-model probabilities.

    Model ``m`` emits ``sigmoid(signal * (2y - 1) + noise_m * (sqrt(rho) * s + sqrt(1 - rho) * e_m))``
    with one shared standard normal ``s`` per sample and private ``e_m``.
    """

    n_samples: int
    noise_scales: tuple
    correlation: float = 0.5
    class_balance: float = 0.5
    signal: float = 2.0
    seed: int = 0
    model_names: Optional[tuple] = None

    def __post_init__(self):
        if isinstance(self.n_samples, bool) or not isinstance(self.n_samples, (int, np.integer)) or self.n_samples < 1:
            raise InvalidArgument("n_samples must be a positive integer")
        self.noise_scales = tuple(float(s) for s in self.noise_scales)
        if not self.noise_scales or any(not (s >= 0 and math.isfinite(s)) for s in self.noise_scales):
            raise InvalidArgument("noise_scales must be non-negative and finite, one per model")
        if not 0.0 <= self.correlation <= 1.0:
            raise InvalidArgument("correlation must be in [0, 1]")
        if not 0.0 < self.class_balance < 1.0:
            raise InvalidArgument("class_balance must be in (0, 1)")
        if not (self.signal > 0 and math.isfinite(self.signal)):
            raise InvalidArgument("signal must be positive")
        if self.model_names is None:
            self.model_names = tuple(f"model{k + 1}" for k in range(len(self.noise_scales)))
        self.model_names = tuple(self.model_names)
        if len(self.model_names) != len(self.noise_scales) or len(set(self.model_names)) != len(self.model_names):
            raise InvalidArgument("model_names must be unique, one per noise scale")

    @classmethod
    def from_dict(cls, d):
        """Build from a config mapping; ``target_accuracies`` may replace ``noise_scales``."""
        d = dict(d)
        allowed = {"n_samples", "noise_scales", "target_accuracies", "correlation", "class_balance",
                   "signal", "seed", "model_names"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidArgument(f"unknown synth keys: {sorted(unknown)}")
        targets = d.pop("target_accuracies", None)
        if targets is not None:
            if "noise_scales" in d:
                raise InvalidArgument("give either noise_scales or target_accuracies, not both")
            d["noise_scales"] = tuple(noise_for_accuracy(a, d.get("signal", 2.0)) for a in targets)
        if "noise_scales" not in d or "n_samples" not in d:
            raise InvalidArgument("synth config needs n_samples and noise_scales (or target_accuracies)")
        if d.get("model_names") is not None:
            d["model_names"] = tuple(d["model_names"])
        return cls(**d)

    def to_dict(self):
        return {"n_samples": self.n_samples, "noise_scales": list(self.noise_scales),
                "correlation": self.correlation, "class_balance": self.class_balance,
                "signal": self.signal, "seed": self.seed, "model_names": list(self.model_names)}

    def covariance(self):
        s = np.array(self.noise_scales)
        m = len(s)
        corr = self.correlation * np.ones((m, m)) + (1.0 - self.correlation) * np.eye(m)
        return corr * np.outer(s, s)


def noise_for_accuracy(accuracy, signal=2.0):
    """Noise scale giving a model this accuracy at threshold 0.5 (independent of class balance)."""
    if not 0.5 < accuracy < 1.0:
        raise InvalidArgument("target accuracy must be in (0.5, 1)")
    return signal / NormalDist().inv_cdf(accuracy)


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def synth_base_learners(cfg: SynthConfig) -> PredictionTable:
    rng = np.random.default_rng(cfg.seed)
    n, m = cfg.n_samples, len(cfg.noise_scales)
    labels = (rng.random(n) < cfg.class_balance).astype(np.int64)
    shared = rng.standard_normal(n)
    private = rng.standard_normal((n, m))
    rho = cfg.correlation
    noise = math.sqrt(rho) * shared[:, None] + math.sqrt(1.0 - rho) * private
    z = cfg.signal * (2.0 * labels - 1.0)[:, None] + np.array(cfg.noise_scales) * noise
    width = len(str(n - 1))
    ids = [f"s{k:0{width}d}" for k in range(n)]
    return PredictionTable(ids, labels, list(cfg.model_names), _logistic(z))


def bayes_log_odds(cfg: SynthConfig, probs) -> np.ndarray:
    """Exact posterior log-odds of class 1 under ``cfg``'s generative model.

    Inverts the logistic link and applies the common-covariance Gaussian
    discriminant. Needs a non-singular noise covariance.
    """
    cov = cfg.covariance()
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        raise InvalidArgument("Bayes combiner needs correlation < 1 and every noise scale > 0")
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-300, 1.0 - 1e-16)
    z = np.log(p) - np.log1p(-p)
    w = np.linalg.solve(cov, np.ones(cov.shape[0]))
    prior = math.log(cfg.class_balance / (1.0 - cfg.class_balance))
    return 2.0 * cfg.signal * (z @ w) + prior


def bayes_accuracy(cfg: SynthConfig) -> float:
    """Population accuracy of the Bayes-optimal combiner."""
    cov = cfg.covariance()
    q = float(np.ones(cov.shape[0]) @ np.linalg.solve(cov, np.ones(cov.shape[0])))
    s, pi = cfg.signal, cfg.class_balance
    c = math.log(pi / (1.0 - pi))
    mean, sd = 2.0 * s * s * q, 2.0 * s * math.sqrt(q)
    phi = NormalDist().cdf
    return pi * phi((mean + c) / sd) + (1.0 - pi) * phi((mean - c) / sd)
