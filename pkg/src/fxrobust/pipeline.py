"""Dataset ingestion, training with early stopping, evaluation and the effect grid."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import FAMILIES, N_CLASSES
from .audio_io import AudioError, fix_length, load_wav
from .effects import KINDS, augment_dataset
from .features import log_mel, read_features, write_features
from .manifest import DatasetManifest, Row
from .nn import AdamState, Model, ModelConfig, NumericalError, adam_step
from .nn.layers import cross_entropy

log = logging.getLogger(__name__)

FAMILY_INDEX = {name: i for i, name in enumerate(FAMILIES)}
EFFECT_TITLES = {
    "none": "None",
    "bitcrush_distortion": "Heavy distortion",
    "saturation": "Saturation",
    "reverb": "Reverb",
    "chorus": "Chorus",
    "echo": "Echo",
    "flanger": "Flanger",
    "pitch_shift": "Pitch Shifting",
}
# row order of the published tables
TABLE_ORDER = ("bitcrush_distortion", "saturation", "reverb", "chorus", "echo", "flanger", "pitch_shift")


class DataError(Exception):
    pass


# -- ingestion & features ----------------------------------------------------

def family_label(name: str) -> int:
    key = name.strip().lower().replace(" ", "_")
    if key not in FAMILY_INDEX:
        raise DataError(f"unknown instrument family {name!r}")
    return FAMILY_INDEX[key]


def ingest_nsynth(examples_json, wav_dir, split: str) -> tuple[DatasetManifest, list[str]]:
    """Manifest rows for an NSynth ``examples.json``; returns (manifest, ids with no WAV)."""
    with open(examples_json) as fh:
        records = json.load(fh)
    if not records:
        log.warning("%s holds no examples", examples_json)
    wav_dir = Path(wav_dir)
    manifest, missing = DatasetManifest(), []
    for note_id in sorted(records):
        rec = records[note_id]
        if "instrument_family_str" in rec:
            label = family_label(rec["instrument_family_str"])
        elif "instrument_family" in rec:
            label = int(rec["instrument_family"])
            if not 0 <= label < N_CLASSES:
                raise DataError(f"{note_id}: instrument family {label} out of range")
        else:
            raise DataError(f"{note_id}: record has no instrument family")
        path = wav_dir / f"{note_id}.wav"
        if not path.is_file():
            missing.append(note_id)
            continue
        manifest.append(Row(note_id, str(path), label, split))
    if missing:
        log.warning("%d example(s) in %s have no WAV file and were skipped", len(missing), examples_json)
    return manifest, missing


def pool_time(values: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping groups of ``factor`` frames; a trailing partial group is dropped."""
    if factor <= 1:
        return values
    n = values.shape[-1] // factor
    return values[..., : n * factor].reshape(*values.shape[:-1], n, factor).mean(axis=-1)


def _featurize_one(job):
    row, out_path, time_pool = job
    try:
        clip = fix_length(load_wav(row.path))
        write_features(out_path, pool_time(log_mel(clip), time_pool), row.label)
    except (AudioError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"
    return None


def featurize(manifest: DatasetManifest, out_dir, time_pool: int = 1, jobs: int = 1) -> DatasetManifest:
    """Write one LMEL file per row; the returned manifest points at the feature files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(r, out_dir / f"{r.example_id}.{r.effect}.lmel", time_pool) for r in manifest]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            errors = list(pool.map(_featurize_one, work, chunksize=8))
    else:
        errors = [_featurize_one(j) for j in work]
    out = DatasetManifest()
    for (row, path, _), err in zip(work, errors):
        if err:
            log.warning("featurize %s failed: %s", row.example_id, err)
        else:
            out.append(replace(row, path=str(path)))
    return out


def load_features(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    if not manifest:
        raise DataError("empty manifest")
    xs = [read_features(r.path)[0] for r in manifest]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DataError(f"feature files disagree in shape: {sorted(shapes)}")
    return np.stack(xs), np.array(manifest.labels, dtype=np.int64)


# -- batching & early stopping -----------------------------------------------

def batch_indices(n: int, batch_size: int, seed: int, epoch: int, train: bool = True) -> list[np.ndarray]:
    """Epoch-wise shuffled index batches; in train mode a final batch under 2 rows is dropped."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[s : s + batch_size] for s in range(0, n, batch_size)]
    if train and batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def make_batches(x, y, batch_size=50, seed=0, epoch=0, train=True):
    for idx in batch_indices(len(y), batch_size, seed, epoch, train):
        yield x[idx], y[idx]


class EarlyStopping:
    """Tracks the best monitored value; an epoch only counts as better if strictly greater."""

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = None
        self.epochs_since = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.epochs_since = value, epoch, 0
            return True
        self.epochs_since += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since >= self.patience


# -- training & evaluation ---------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 50
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for batch normalization")


@dataclass
class Metrics:
    accuracy: float
    confusion: list  # rows: true class, columns: predicted class
    per_class_accuracy: list
    n: int
    loss: float | None = None

    @classmethod
    def from_predictions(cls, labels, preds, n_classes=N_CLASSES, loss=None) -> "Metrics":
        labels, preds = np.asarray(labels), np.asarray(preds)
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (labels, preds), 1)
        n = int(cm.sum())
        support = cm.sum(axis=1)
        per_class = [float(cm[i, i] / support[i]) if support[i] else None for i in range(n_classes)]
        acc = float(np.trace(cm) / n) if n else 0.0
        return cls(acc, cm.tolist(), per_class, n, loss)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    valid_accuracy: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_epoch: int | None = None


class TrainingAborted(RuntimeError):
    """Non-finite values during training; carries the last good weights."""

    def __init__(self, message, best_params, history):
        super().__init__(message)
        self.best_params = best_params
        self.history = history


def evaluate(model: Model, x, y, batch_size: int = 50) -> Metrics:
    """Eval-mode accuracy; predictions are the argmax, ties to the lowest class index."""
    probs = model.predict(x, batch_size)
    return Metrics.from_predictions(y, probs.argmax(axis=1), model.cfg.n_classes, cross_entropy(probs, y))


def _snapshot(params):
    return {k: v.copy() for k, v in params.items()}


def train(model: Model, train_data, valid_data, cfg: TrainConfig, on_epoch=None):
    """Adam training monitored by validation accuracy with patience-based stopping.

    Returns the weights of the best validation epoch (earliest on ties) and the
    training history. ``model.params`` is left holding the best weights.
    """
    x, y = train_data
    xv, yv = valid_data
    state = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    hist = History()
    best = _snapshot(model.params)
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.max_epochs + 1):
        losses, correct, seen = [], 0, 0
        for xb, yb in make_batches(x, y, cfg.batch_size, cfg.seed, epoch, train=True):
            try:
                probs, trace = model.forward(xb, train=True, rng=dropout_rng)
                loss = cross_entropy(probs, yb)
                if not np.isfinite(loss):
                    raise NumericalError(f"loss became {loss} at epoch {epoch}")
                adam_step(model.params, model.backward(trace, yb), state)
            except NumericalError as exc:
                model.params = best
                raise TrainingAborted(str(exc), best, hist) from exc
            losses.append(loss * len(yb))
            correct += int((probs.argmax(axis=1) == yb).sum())
            seen += len(yb)
        hist.train_loss.append(float(sum(losses) / seen))
        hist.train_accuracy.append(correct / seen)
        val = evaluate(model, xv, yv, cfg.batch_size).accuracy
        hist.valid_accuracy.append(val)
        if stopper.update(epoch, val):
            best = _snapshot(model.params)
        if on_epoch:
            on_epoch(epoch, hist)
        if stopper.should_stop:
            break
    hist.best_epoch = stopper.best_epoch
    hist.stopped_epoch = epoch
    model.params = best
    return best, hist


# -- experiment grid ---------------------------------------------------------

@dataclass
class ExperimentData:
    """Feature arrays per effect ("none" for clean) and split."""

    sets: dict  # (effect, split) -> (x, y)

    @property
    def effects(self) -> list[str]:
        return sorted({e for e, _ in self.sets if e != "none"}, key=_table_key)

    def get(self, effect, split):
        return self.sets[(effect, split)]

    def mixed(self, effect, split):
        """Clean data with the effect-processed copy appended."""
        xc, yc = self.get("none", split)
        if effect == "none":
            return xc, yc
        xe, ye = self.get(effect, split)
        return np.concatenate([xc, xe]), np.concatenate([yc, ye])


def _table_key(effect):
    return TABLE_ORDER.index(effect) if effect in TABLE_ORDER else len(TABLE_ORDER)


def _grid_cell(job):
    train_effect, data, model_cfg, cfg, test_effects = job
    # every cell starts from the same initial weights so differences come from the data
    model = Model(model_cfg, seed=cfg.seed)
    try:
        _, hist = train(model, data.mixed(train_effect, "train"), data.mixed(train_effect, "valid"), cfg)
    except TrainingAborted as exc:
        return train_effect, {"status": "failed", "error": str(exc)}, None
    results = {}
    for te in test_effects:
        m = evaluate(model, *data.get(te, "test"), cfg.batch_size)
        results[te] = asdict(m)
    return train_effect, {"status": "ok", "history": asdict(hist)}, results


def experiment_grid(
    data: ExperimentData, cfg: TrainConfig, model_cfg: ModelConfig, effects=None, jobs=1, train_effects=None
) -> dict:
    """Train the clean baseline plus one model per effect and test every model on every test set.

    ``train_effects`` narrows which models are trained (default: "none" and every effect).
    """
    effects = list(effects) if effects is not None else data.effects
    unknown = set(effects) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown effects {sorted(unknown)}")
    test_effects = ["none", *effects]
    train_effects = list(train_effects) if train_effects is not None else test_effects
    if set(train_effects) - set(test_effects):
        raise ValueError("every trained effect must also be a test effect")
    jobs_list = [(te, data, model_cfg, cfg, test_effects) for te in train_effects]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_grid_cell, jobs_list))
    else:
        outcomes = [_grid_cell(j) for j in jobs_list]

    models, metrics, matrix = {}, {}, {}
    for train_effect, info, results in outcomes:
        models[train_effect] = info
        matrix[train_effect] = {}
        metrics[train_effect] = {}
        for te in test_effects:
            if results is None:
                matrix[train_effect][te] = None
                metrics[train_effect][te] = {"status": "failed"}
            else:
                matrix[train_effect][te] = results[te]["accuracy"]
                metrics[train_effect][te] = results[te]
    return {
        "train_effects": train_effects,
        "test_effects": test_effects,
        "accuracy": matrix,
        "metrics": metrics,
        "models": models,
        "config": {"train": asdict(cfg), "model": asdict(model_cfg)},
    }


def table1_rows(report) -> list[tuple[str, str, float | None]]:
    acc = report["accuracy"]
    return [("None", EFFECT_TITLES[t], acc[t]["none"]) for t in report["train_effects"]]


def table2_rows(report) -> list[tuple[str, str, float | None]]:
    acc = report["accuracy"]
    rows = []
    for e in report["test_effects"]:
        if e == "none":
            continue
        rows.append((EFFECT_TITLES[e], "None", acc["none"][e]))
        if e in acc:
            rows.append((EFFECT_TITLES[e], EFFECT_TITLES[e], acc[e][e]))
    return rows


def write_report(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, rows in (("table1.csv", table1_rows(report)), ("table2.csv", table2_rows(report))):
        with (out_dir / name).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["test_effect", "train_effect", "accuracy"])
            for test, tr, a in rows:
                w.writerow([test, tr, "failed" if a is None else f"{a:.4f}"])


# -- end-to-end preparation --------------------------------------------------

def prepare_experiment(clean: DatasetManifest, effects, work_dir, seed=0, time_pool=1, jobs=1) -> ExperimentData:
    """Augment every split with every effect, featurize everything, and load the arrays."""
    work_dir = Path(work_dir)
    manifests = {"none": clean}
    for kind in effects:
        rows = DatasetManifest()
        for split in ("train", "valid", "test"):
            res = augment_dataset(clean, kind, split, work_dir / "audio" / kind / split, seed=seed, jobs=jobs)
            if res.errors:
                log.warning("%s/%s: %d file(s) failed", kind, split, len(res.errors))
            rows.extend(res.manifest)
        manifests[kind] = rows
        rows.save(work_dir / "manifests" / f"{kind}.csv")
    sets = {}
    for effect, man in manifests.items():
        feats = featurize(man, work_dir / "features" / effect, time_pool=time_pool, jobs=jobs)
        feats.save(work_dir / "manifests" / f"{effect}.features.csv")
        for split in ("train", "valid", "test"):
            part = feats.split(split)
            if part:
                sets[(effect, split)] = load_features(part)
    return ExperimentData(sets)
