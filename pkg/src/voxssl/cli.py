"""Command-line entry points wiring the toolkit into reproducible runs.

Commands: gen-synthetic, gen-permutations, pretrain, finetune, sweep, eval.
All take --seed, --config, --out, and --force; every run lands in a directory
named by the hash of its fully resolved settings, and rerunning an identical
command refuses to overwrite it unless --force is passed. The default output
root comes from $VOXSSL_OUT_ROOT (falling back to ./voxssl-runs).

Config files are flat ``dotted.key = value`` lines. Values are parsed as
JSON where possible (bare words stay strings) and ``#`` starts a comment.
Namespaces: ``synth.*`` (generation), ``perm.*`` (permutation sets),
``train.*`` plus ``task_params.*`` / ``encoder_params.*`` (optimization),
``sweep.*`` (grid selection). Command-line flags override config values.

Exit codes: 0 success, 1 validation error (bad flags, config, or paths,
detected before any compute), 2 runtime failure. Errors are reported as a
single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import shutil
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import (
    EmptyDataset,
    IncompatibleCheckpoint,
    InfeasibleRequest,
    RunDirCollision,
    TaskConfigMismatch,
    VoxsslError,
)
from .models import load_checkpoint
from .permutations import generate_permutation_set
from .synth import SynthSpec, generate
from .training import (
    SCHEMA_VERSION,
    TASKS,
    TrainConfig,
    config_hash,
    epochs_to_threshold,
    evaluate_segmentation,
    finetune,
    load_labeled,
    load_segmentation_model,
    make_driver,
    pretrain,
    sweep,
)
from .volume import DatasetManifest, load_volume

OUT_ROOT_ENV = "VOXSSL_OUT_ROOT"
_DEFAULT_FRACTIONS = TrainConfig("scratch").label_fractions
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthSpec)}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise _UsageError(message)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of one command invocation."""

    command: str
    settings: dict

    @property
    def hash(self) -> str:
        return config_hash({"command": self.command, "settings": self.settings})

    def to_json(self) -> str:
        payload = {"schema_version": SCHEMA_VERSION, "command": self.command,
                   "hash": self.hash, "settings": self.settings}
        return json.dumps(payload, sort_keys=True, indent=1, default=str) + "\n"


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def load_config_file(path: str | Path) -> dict:
    """Flat dotted-key config: one ``key = value`` per line, JSON values."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _config(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _floats(value) -> tuple[float, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if isinstance(value, (int, float)):
        value = [value]
    return tuple(float(v) for v in value)


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if isinstance(value, int):
        value = [value]
    return tuple(int(v) for v in value)


def _seed(args, config: dict, key: str = "train.seed") -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get(key, 0))


def _train_config(config: dict, task: str, seed: int,
                  overrides: dict | None = None) -> TrainConfig:
    kw: dict = {}
    for key, raw in config.items():
        head, _, name = key.partition(".")
        if head == "train" and name:
            if name in ("task", "seed"):
                continue  # resolved from flags/context
            if name not in _TRAIN_FIELDS:
                raise TaskConfigMismatch(f"unknown config key {key!r}")
            kw[name] = raw
        elif head == "task_params" and name:
            kw.setdefault("task_params", {})[name] = raw
        elif head == "encoder_params" and name:
            kw.setdefault("encoder_params", {})[name] = raw
    for name, value in (overrides or {}).items():
        if value is not None:
            kw[name] = value
    if "label_fractions" in kw:
        kw["label_fractions"] = _floats(kw["label_fractions"])
    return TrainConfig(task=task, seed=seed, **kw)


def _load_manifest(data: str | None) -> DatasetManifest:
    if not data:
        raise TaskConfigMismatch("--data is required")
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return DatasetManifest.load(path)


def _first_train_volume(manifest: DatasetManifest):
    ids = manifest.splits.get("train", [])
    if not ids:
        raise EmptyDataset("manifest has no train split")
    return load_volume(manifest.volume_path(ids[0]))


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "voxssl-runs"))


def _plan_run_dir(args, exp: ExperimentConfig) -> Path:
    run_dir = _out_root(args) / f"{exp.command}-{exp.hash}"
    if run_dir.exists() and not args.force:
        raise RunDirCollision(
            f"{run_dir} already holds a run with these settings; "
            f"pass --force to replace it")
    return run_dir


def _create_run_dir(run_dir: Path, exp: ExperimentConfig):
    if run_dir.exists():  # only reachable after a --force check
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    (run_dir / "config.json").write_text(exp.to_json())


# ---------------------------------------------------------------------------
# gen-synthetic
# ---------------------------------------------------------------------------

def _prep_gen_synthetic(args) -> dict:
    config = _config(args)
    kw: dict = {}
    for key, raw in config.items():
        head, _, name = key.partition(".")
        if head != "synth" or not name:
            continue
        if name in ("fractions", "val_fraction", "seed"):
            continue
        if name not in _SYNTH_FIELDS:
            raise TaskConfigMismatch(f"unknown config key {key!r}")
        kw[name] = tuple(raw) if isinstance(raw, list) else raw
    if args.count is not None:
        kw["count"] = args.count
    if args.shape is not None:
        kw["shape"] = _ints(args.shape)
    if args.mode is not None:
        kw["task_mode"] = args.mode
    spec = SynthSpec(seed=_seed(args, config, "synth.seed"), **kw)
    fractions = _floats(args.fractions if args.fractions is not None
                        else config.get("synth.fractions", _DEFAULT_FRACTIONS))
    val_fraction = (args.val_fraction if args.val_fraction is not None
                    else float(config.get("synth.val_fraction", 0.2)))
    if not 0 <= val_fraction < 1:
        raise TaskConfigMismatch(f"val fraction {val_fraction} outside [0, 1)")
    exp = ExperimentConfig("gen-synthetic", {
        "spec": asdict(spec), "fractions": list(fractions),
        "val_fraction": val_fraction})
    return {"spec": spec, "fractions": fractions, "val_fraction": val_fraction,
            "exp": exp, "run_dir": _plan_run_dir(args, exp)}


def _run_gen_synthetic(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    manifest = generate(s["spec"], s["run_dir"], fractions=s["fractions"],
                        val_fraction=s["val_fraction"])
    return {"run_dir": str(s["run_dir"]),
            "manifest": str(s["run_dir"] / "manifest.json"),
            "count": len(manifest.entries),
            "train": len(manifest.splits.get("train", [])),
            "val": len(manifest.splits.get("val", []))}


# ---------------------------------------------------------------------------
# gen-permutations
# ---------------------------------------------------------------------------

def _prep_gen_permutations(args) -> dict:
    config = _config(args)
    cells = args.cells if args.cells is not None else config.get("perm.cells")
    count = args.count if args.count is not None else config.get("perm.count")
    if cells is None or count is None:
        raise TaskConfigMismatch("gen-permutations needs --cells and --count")
    cells, count = int(cells), int(count)
    candidates = int(args.candidates if args.candidates is not None
                     else config.get("perm.candidates", 1000))
    if cells < 2 or count < 1 or candidates < 1:
        raise TaskConfigMismatch("cells >= 2, count >= 1, candidates >= 1")
    if cells <= 20 and count > math.factorial(cells):
        raise InfeasibleRequest(
            f"{count} distinct permutations of {cells} elements do not exist")
    seed = _seed(args, config, "perm.seed")
    exp = ExperimentConfig("gen-permutations", {
        "cells": cells, "count": count, "candidates": candidates, "seed": seed})
    return {"cells": cells, "count": count, "candidates": candidates,
            "seed": seed, "exp": exp, "run_dir": _plan_run_dir(args, exp)}


def _run_gen_permutations(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    pset = generate_permutation_set(s["cells"], s["count"], seed=s["seed"],
                                    candidates=s["candidates"])
    path = pset.save(s["run_dir"] / "permutations.json")
    return {"run_dir": str(s["run_dir"]), "file": str(path), "m": pset.m,
            "count": len(pset), "min_hamming": pset.stats["min_hamming"]}


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _prep_pretrain(args) -> dict:
    config = _config(args)
    manifest = _load_manifest(args.data)
    task = args.task or config.get("train.task")
    if not task:
        raise TaskConfigMismatch("pretrain needs --task (or train.task in config)")
    cfg = _train_config(config, task, _seed(args, config), {
        "epochs": args.epochs, "batch_size": args.batch_size})
    if cfg.task == "scratch":
        raise TaskConfigMismatch("scratch is the no-pretraining baseline")
    v0 = _first_train_volume(manifest)
    make_driver(cfg, v0.spatial_rank, v0.channels, v0.spatial_shape)
    exp = ExperimentConfig("pretrain", {"data": args.data,
                                        "config": asdict(cfg)})
    return {"manifest": manifest, "cfg": cfg, "exp": exp,
            "run_dir": _plan_run_dir(args, exp)}


def _run_pretrain(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    ckpt = pretrain(s["manifest"], s["cfg"], run_dir=s["run_dir"])
    return {"run_dir": str(s["run_dir"]),
            "checkpoint": str(s["run_dir"] / "encoder.npz"),
            "task": ckpt.task,
            "final_loss": ckpt.meta["epoch_losses"][-1]}


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def _prep_finetune(args) -> dict:
    config = _config(args)
    manifest = _load_manifest(args.data)
    if args.fraction is None:
        raise TaskConfigMismatch("finetune needs --fraction")
    fraction = float(args.fraction)
    if not 0 < fraction <= 1:
        raise TaskConfigMismatch(f"fraction {fraction} outside (0, 1]")
    try:
        ids = manifest.subset_ids(fraction)
    except KeyError as exc:
        raise TaskConfigMismatch(str(exc)) from exc
    if not manifest.splits.get("val"):
        raise TaskConfigMismatch("fine-tuning needs a val split for evaluation")
    if args.ckpt in (None, "scratch"):
        ckpt, task = None, "scratch"
    else:
        ckpt = load_checkpoint(Path(args.ckpt))
        task = ckpt.task
        v0 = load_volume(manifest.volume_path(ids[0]))
        if v0.channels % ckpt.spec.in_channels:
            raise IncompatibleCheckpoint(
                f"cannot adapt {ckpt.spec.in_channels}-channel weights to "
                f"{v0.channels}-channel data")
    cfg = _train_config(config, task, _seed(args, config), {
        "epochs": args.epochs, "batch_size": args.batch_size})
    exp = ExperimentConfig("finetune", {
        "data": args.data, "ckpt": args.ckpt, "fraction": fraction,
        "config": asdict(cfg)})
    return {"manifest": manifest, "ckpt": ckpt, "fraction": fraction,
            "cfg": cfg, "exp": exp, "run_dir": _plan_run_dir(args, exp)}


def _run_finetune(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    record = finetune(s["ckpt"], s["manifest"], s["fraction"], s["cfg"],
                      run_dir=s["run_dir"])
    reach = epochs_to_threshold(record, 0.9)
    return {"run_dir": str(s["run_dir"]), "task": record.task,
            "fraction": s["fraction"], "model": record.checkpoint,
            "final": record.epochs[-1], "epochs_to_90pct": reach.epoch}


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _prep_sweep(args) -> dict:
    config = _config(args)
    manifest = _load_manifest(args.data)
    seed = _seed(args, config)
    cfg = _train_config(config, "scratch", seed, {
        "epochs": args.epochs, "batch_size": args.batch_size})
    raw_tasks = args.tasks if args.tasks is not None else config.get(
        "sweep.tasks", "all")
    if isinstance(raw_tasks, str):
        raw_tasks = [t.strip() for t in raw_tasks.split(",") if t.strip()]
    tasks = list(TASKS) if raw_tasks == ["all"] else list(raw_tasks)
    unknown = set(tasks) - set(TASKS) - {"scratch"}
    if unknown:
        raise TaskConfigMismatch(f"unknown tasks: {sorted(unknown)}")
    fractions = _floats(args.fractions if args.fractions is not None
                        else config.get("sweep.fractions", cfg.label_fractions))
    seeds = _ints(args.seeds if args.seeds is not None
                  else config.get("sweep.seeds", [seed]))
    pretrain_epochs = (args.pretrain_epochs if args.pretrain_epochs is not None
                       else config.get("sweep.pretrain_epochs"))
    for fraction in fractions:
        try:
            manifest.subset_ids(fraction)
        except KeyError as exc:
            raise TaskConfigMismatch(str(exc)) from exc
    exp = ExperimentConfig("sweep", {
        "data": args.data, "tasks": tasks, "fractions": list(fractions),
        "seeds": list(seeds), "pretrain_epochs": pretrain_epochs,
        "config": asdict(cfg)})
    return {"manifest": manifest, "tasks": tasks, "fractions": fractions,
            "seeds": seeds, "cfg": cfg,
            "pretrain_epochs": None if pretrain_epochs is None else int(pretrain_epochs),
            "exp": exp, "run_dir": _plan_run_dir(args, exp)}


def _run_sweep(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    result = sweep(s["manifest"], s["tasks"], s["fractions"], s["seeds"],
                   s["cfg"], s["run_dir"], pretrain_epochs=s["pretrain_epochs"])
    return {"run_dir": str(s["run_dir"]), "csv": str(result.csv_path),
            "curves": str(result.curves_path),
            "plots": [str(p) for p in result.plot_paths],
            "runs": len(result.rows), "failures": len(result.failures)}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _prep_eval(args) -> dict:
    config = _config(args)
    manifest = _load_manifest(args.data)
    if not args.model:
        raise TaskConfigMismatch("eval needs --model (a fine-tuned model file)")
    if not Path(args.model).is_file():
        raise FileNotFoundError(f"no model file at {args.model}")
    model = load_segmentation_model(args.model)
    split = args.split or str(config.get("eval.split", "val"))
    ids = manifest.splits.get(split)
    if not ids:
        raise TaskConfigMismatch(f"split {split!r} is missing or empty")
    missing = [i for i in ids if manifest.entry(i).label_path is None]
    if missing:
        raise TaskConfigMismatch(f"split {split!r} has unlabeled samples: "
                                 f"{missing[:3]}")
    exp = ExperimentConfig("eval", {"data": args.data, "model": args.model,
                                    "split": split})
    return {"manifest": manifest, "model": model, "split": split, "ids": ids,
            "exp": exp, "run_dir": _plan_run_dir(args, exp)}


def _run_eval(s) -> dict:
    _create_run_dir(s["run_dir"], s["exp"])
    vols, masks = load_labeled(s["manifest"], s["ids"])
    metrics = evaluate_segmentation(s["model"], vols, masks,
                                    s["model"].num_classes)
    report = {"schema_version": SCHEMA_VERSION, "split": s["split"],
              "n_volumes": len(vols), "metrics": metrics}
    (s["run_dir"] / "metrics.json").write_text(
        json.dumps(report, sort_keys=True, indent=1) + "\n")
    return {"run_dir": str(s["run_dir"]), **report}


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-synthetic": (_prep_gen_synthetic, _run_gen_synthetic),
    "gen-permutations": (_prep_gen_permutations, _run_gen_permutations),
    "pretrain": (_prep_pretrain, _run_pretrain),
    "finetune": (_prep_finetune, _run_finetune),
    "sweep": (_prep_sweep, _run_sweep),
    "eval": (_prep_eval, _run_eval),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxssl",
                     description="Self-supervised pretraining toolkit for "
                                 "volumetric images")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None,
                       help="flat 'dotted.key = value' file; flags override")
        p.add_argument("--out", default=None,
                       help=f"output root (default ${OUT_ROOT_ENV} or ./voxssl-runs)")
        p.add_argument("--force", action="store_true",
                       help="replace an existing run directory")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic labeled corpus")
    common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--shape", default=None, help="e.g. 32,32,32")
    p.add_argument("--mode", choices=("segmentation", "grading"), default=None)
    p.add_argument("--fractions", default=None, help="labeled subset fractions")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)

    p = sub.add_parser("gen-permutations", help="generate a jigsaw permutation set")
    common(p)
    p.add_argument("--cells", type=int, default=None, help="sequence length m")
    p.add_argument("--count", type=int, default=None, help="set size P")
    p.add_argument("--candidates", type=int, default=None)

    def train_common(p):
        common(p)
        p.add_argument("--data", default=None, help="dataset dir or manifest.json")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)

    p = sub.add_parser("pretrain", help="pretrain one proxy task")
    train_common(p)
    p.add_argument("--task", choices=TASKS, default=None)

    p = sub.add_parser("finetune", help="fine-tune segmentation on a label fraction")
    train_common(p)
    p.add_argument("--ckpt", default=None,
                   help="encoder checkpoint, or 'scratch' (default)")
    p.add_argument("--fraction", type=float, default=None)

    p = sub.add_parser("sweep", help="tasks x fractions x seeds grid with plots")
    train_common(p)
    p.add_argument("--tasks", default=None, help="comma list or 'all'")
    p.add_argument("--fractions", default=None)
    p.add_argument("--seeds", default=None)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int,
                   default=None)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model on a split")
    common(p)
    p.add_argument("--data", default=None, help="dataset dir or manifest.json")
    p.add_argument("--model", default=None, help="model file from finetune")
    p.add_argument("--split", default=None)

    return parser


def _emit_error(exc: BaseException, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


_VALIDATION_ERRORS = (_UsageError, VoxsslError, ValueError, KeyError, OSError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        return _emit_error(exc, 1)
    prep, run = _COMMANDS[args.command]
    try:
        settings = prep(args)
    except _VALIDATION_ERRORS as exc:
        return _emit_error(exc, 1)
    try:
        summary = run(settings)
    except Exception as exc:  # noqa: BLE001 - report, then fail with code 2
        return _emit_error(exc, 2)
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
