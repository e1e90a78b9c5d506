"""Command-line entry point: ``fxrobust <command> [flags]``.

Settings come from built-in defaults, then a flat ``key = value`` config file
(``--config``), then explicit flags. Every command writes a run log next to
its outputs so a run can be repeated from the log alone.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .audio_io import AudioError
from .effects import KINDS, EffectConfigError, augment_dataset
from .manifest import DatasetManifest
from .nn import Model, ModelConfig, NumericalError, load_checkpoint, save_checkpoint
from .nn.gradcheck import TOLERANCE, run_all
from .pipeline import (
    DataError,
    TrainConfig,
    TrainingAborted,
    evaluate,
    experiment_grid,
    featurize,
    load_features,
    prepare_experiment,
    train,
    write_report,
)
from .toy import ToySpec, toygen

log = logging.getLogger("fxrobust")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


DEFAULTS = {
    "seed": 0,
    "jobs": os.cpu_count() or 1,
    "out": "out",
    "lr": 0.001,
    "batch_size": 50,
    "patience": 10,
    "max_epochs": 200,
    "time_pool": 1,
    "filter_scale": 1.0,
    "per_class_train": 20,
    "per_class_valid": 5,
    "per_class_test": 5,
    "effects": ",".join(KINDS),
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items()}


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        cfg[key] = value.strip()
    return cfg


def resolve_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    for key, value in list(settings.items()):
        if key not in _TYPES:
            raise UsageError(f"unknown config key {key!r}")
        try:
            settings[key] = _TYPES[key](value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if settings["jobs"] < 1 or settings["time_pool"] < 1 or not 0 < settings["filter_scale"] <= 1:
        raise UsageError("jobs and time_pool must be >= 1, filter_scale in (0, 1]")
    return settings


def config_hash(settings: dict) -> str:
    # jobs and out do not change results
    stable = {k: v for k, v in settings.items() if k not in ("jobs", "out")}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


def write_run_log(out: Path, command: str, settings: dict, argv, started: float, status: int, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    entry = {
        "command": command,
        "argv": list(argv),
        "seed": settings["seed"],
        "settings": settings,
        "config_hash": config_hash(settings),
        "versions": {
            "fxrobust": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": round(time.time() - started, 3),
        "exit_code": status,
    }
    entry.update(extra or {})
    (out / f"run_log.{command}.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")


def _train_config(s) -> TrainConfig:
    try:
        return TrainConfig(lr=s["lr"], batch_size=s["batch_size"], patience=s["patience"],
                           max_epochs=s["max_epochs"], seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _model_config(s, n_mels, n_frames) -> ModelConfig:
    base = ModelConfig()
    groups = tuple((max(1, round(f * s["filter_scale"])), h, w) for f, h, w in base.groups)
    return ModelConfig(n_mels=n_mels, n_frames=n_frames, groups=groups)


def _model_extra(mc: ModelConfig) -> dict:
    return {"n_mels": mc.n_mels, "n_frames": mc.n_frames, "groups": np.array(mc.groups),
            "n_classes": mc.n_classes, "dropout": mc.dropout}


def _model_from_checkpoint(path) -> Model:
    params, _, extra = load_checkpoint(path)
    try:
        mc = ModelConfig(
            n_mels=int(extra["n_mels"]), n_frames=int(extra["n_frames"]),
            groups=tuple(tuple(int(v) for v in g) for g in extra["groups"]),
            n_classes=int(extra["n_classes"]), dropout=float(extra["dropout"]),
        )
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint lacks model configuration {exc}") from exc
    return Model(mc, params=params)


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def _as_features(manifest: DatasetManifest, out: Path, s) -> DatasetManifest:
    """Featurize rows that still point at audio; feature rows pass through."""
    if all(r.path.endswith(".lmel") for r in manifest):
        return manifest
    return featurize(manifest, out, time_pool=s["time_pool"], jobs=s["jobs"])


def _effects(s) -> list[str]:
    effects = [e.strip() for e in s["effects"].split(",") if e.strip()]
    unknown = [e for e in effects if e not in KINDS]
    if unknown:
        raise UsageError(f"unknown effects {unknown}; choose from {', '.join(KINDS)}")
    return effects


# -- commands ----------------------------------------------------------------

def cmd_toygen(args, s, out):
    spec = ToySpec(s["per_class_train"], s["per_class_valid"], s["per_class_test"], seed=s["seed"])
    manifest = toygen(spec, out)
    print(f"wrote {len(manifest)} examples to {out / 'manifest.csv'}")
    return {"rows": len(manifest)}


def cmd_augment(args, s, out):
    manifest = _load_manifest(args.manifest)
    if not manifest.split(args.split):
        raise DataError(f"manifest has no {args.split} rows")
    res = augment_dataset(manifest, args.effect, args.split, out / "audio", seed=s["seed"],
                          variant=args.variant, jobs=s["jobs"])
    res.manifest.save(out / "manifest.csv")
    for eid, msg in res.errors:
        print(f"{eid}: {msg}", file=sys.stderr)
    if not res.manifest:
        raise DataError("every file failed")
    print(f"wrote {len(res.manifest)} clips ({len(res.errors)} failed) to {out}")
    return {"rows": len(res.manifest), "failed": len(res.errors)}


def cmd_featurize(args, s, out):
    manifest = _load_manifest(args.manifest)
    feats = featurize(manifest, out / "features", time_pool=s["time_pool"], jobs=s["jobs"])
    feats.save(out / "manifest.csv")
    if len(feats) < len(manifest):
        print(f"{len(manifest) - len(feats)} file(s) failed", file=sys.stderr)
    print(f"wrote {len(feats)} feature files to {out / 'features'}")
    return {"rows": len(feats), "failed": len(manifest) - len(feats)}


def cmd_train(args, s, out):
    tr = _as_features(_load_manifest(args.train_manifest), out / "features", s)
    va = _as_features(_load_manifest(args.valid_manifest), out / "features", s)
    x, y = load_features(tr)
    xv, yv = load_features(va)
    mc = _model_config(s, *x.shape[1:])
    model = Model(mc, seed=s["seed"])

    def progress(epoch, hist):
        log.info("epoch %d loss %.4f valid %.4f", epoch, hist.train_loss[-1], hist.valid_accuracy[-1])

    try:
        params, hist = train(model, (x, y), (xv, yv), _train_config(s), on_epoch=progress)
    except TrainingAborted as exc:
        save_checkpoint(out / "model.fxck", exc.best_params, extra=_model_extra(mc))
        (out / "history.json").write_text(json.dumps(asdict(exc.history), indent=2) + "\n")
        raise NumericalError(f"{exc}; last good weights kept in {out / 'model.fxck'}") from exc
    save_checkpoint(out / "model.fxck", params, extra=_model_extra(mc))
    (out / "history.json").write_text(json.dumps(asdict(hist), indent=2) + "\n")
    print(f"best epoch {hist.best_epoch} (valid {max(hist.valid_accuracy):.4f}), stopped at {hist.stopped_epoch}")
    return {"best_epoch": hist.best_epoch}


def cmd_evaluate(args, s, out):
    model = _model_from_checkpoint(args.checkpoint)
    x, y = load_features(_as_features(_load_manifest(args.manifest), out / "features", s))
    try:
        metrics = evaluate(model, x, y, s["batch_size"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    (out / "metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n")
    print(f"accuracy {metrics.accuracy:.4f} on {metrics.n} examples")
    return {"accuracy": metrics.accuracy}


def _clean_manifest(args, s, out) -> DatasetManifest:
    if args.toy:
        spec = ToySpec(s["per_class_train"], s["per_class_valid"], s["per_class_test"], seed=s["seed"])
        return toygen(spec, out / "toy")
    root = Path(args.manifests)
    single = root / "manifest.csv"
    if single.exists():
        return _load_manifest(single)
    rows = DatasetManifest()
    for split in ("train", "valid", "test"):
        rows.extend(_load_manifest(root / f"{split}.csv"))
    return rows


def cmd_experiment(args, s, out):
    effects = _effects(s)
    clean = _clean_manifest(args, s, out)
    for split in ("train", "valid", "test"):
        if not clean.split(split):
            raise DataError(f"no {split} rows in the clean manifest")
    data = prepare_experiment(clean, effects, out / "work", seed=s["seed"], time_pool=s["time_pool"], jobs=s["jobs"])
    n_mels, n_frames = data.get("none", "train")[0].shape[1:]
    report = experiment_grid(data, _train_config(s), _model_config(s, n_mels, n_frames), effects=effects,
                             jobs=min(s["jobs"], len(effects) + 1))
    write_report(report, out)
    failed = [k for k, v in report["models"].items() if v["status"] != "ok"]
    for k in failed:
        print(f"model {k} failed: {report['models'][k]['error']}", file=sys.stderr)
    print(f"report written to {out / 'report.json'}")
    if len(failed) == len(report["models"]):
        raise NumericalError("every grid cell failed")
    return {"failed_cells": failed}


def cmd_gradcheck(args, s, out):
    report = run_all(s["seed"])
    for name, err in report.items():
        print(f"{name:32s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    bad = [k for k, v in report.items() if not v < TOLERANCE]
    if bad:
        raise NumericalError(f"gradient check failed for {', '.join(bad)}")
    return {"max_error": max(report.values())}


COMMANDS = {
    "toygen": cmd_toygen,
    "augment": cmd_augment,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value settings file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--jobs", type=int, help="worker processes (default: all processors)")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--time-pool", dest="time_pool", type=int, help="average this many frames into one")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fxrobust", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", parents=[shared], help="synthesize the toy dataset")
    for split in ("train", "valid", "test"):
        p.add_argument(f"--per-class-{split}", dest=f"per_class_{split}", type=int)

    p = sub.add_parser("augment", parents=[shared], help="apply one effect to one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--effect", required=True, choices=KINDS)
    p.add_argument("--split", required=True, choices=("train", "valid", "test"))
    p.add_argument("--variant", choices=("A", "B"))

    p = sub.add_parser("featurize", parents=[shared], help="write log-mel feature files")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", parents=[shared], help="train one model with early stopping")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-manifest", required=True)

    p = sub.add_parser("evaluate", parents=[shared], help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("experiment", parents=[shared], help="train and test the full effect grid")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--toy", action="store_true", help="generate and use the toy dataset")
    src.add_argument("--manifests", help="directory with manifest.csv or train/valid/test.csv")
    p.add_argument("--effects", help="comma-separated effect kinds (default: all seven)")

    sub.add_parser("gradcheck", parents=[shared], help="finite-difference check of every layer")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    settings = dict(DEFAULTS)
    status, extra = EXIT_OK, {}
    try:
        settings = resolve_settings(args)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, settings, out) or {}
    except (UsageError, EffectConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    except (DataError, AudioError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        status = EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        status = EXIT_NUMERIC
    if status != EXIT_USAGE:
        try:
            write_run_log(Path(settings["out"]), args.command, settings, argv, started, status, extra)
        except OSError as exc:
            print(f"cannot write run log: {exc}", file=sys.stderr)
            status = status or EXIT_DATA
    return status


if __name__ == "__main__":
    sys.exit(main())
