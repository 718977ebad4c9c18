"""Command line entry point: generate, train, adapt, sweep, verify and pipeline.

Every command writes into ``<out>/<command>-<hash8>-<timestamp>/`` next to a
``config.json`` holding the fully resolved configuration. Progress goes to
stderr; failures end with one JSON line on stderr and a nonzero exit code.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .adapt import write_alpha_csv
from .bench import (DatasetSplit, evaluate, generate_dataset, load_split, parse_method, save_split,
                    sweep, train_baseline)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DivergenceError, IncompatibleSnapshotError, PreconditionError
from .verify import run_all

log = logging.getLogger("domainadaptor")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class VerificationFailed(Exception):
    pass


def run_dir(base, command: str, cfg: ExperimentConfig) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    path = Path(base) / f"{command}-{cfg.digest()[:8]}-{stamp}"
    suffix = 1
    while path.exists():
        path = Path(base) / f"{command}-{cfg.digest()[:8]}-{stamp}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def run_id(command: str, cfg: ExperimentConfig) -> str:
    # no timestamp, so rerunning a resolved config reproduces the CSV bytes
    return f"{command}-{cfg.digest()[:8]}"


# data and checkpoints ------------------------------------------------------

def _require_dir(value: Optional[str], key: str) -> Path:
    if value is None:
        raise ConfigError(f"{key} must be set for this command")
    path = Path(value)
    if not path.is_dir():
        raise FileNotFoundError(f"{key}: directory {path} does not exist")
    return path


def load_data(data_dir: Path, cfg: ExperimentConfig) -> Dict[str, DatasetSplit]:
    splits = {}
    for d in cfg.dataset.domains:
        path = data_dir / f"{d.name}.dac"
        if not path.is_file():
            raise FileNotFoundError(f"dataset file {path} is missing")
        splits[d.name] = load_split(path)
    return splits


def load_models(ckpt_dir: Path, names: Sequence[str]):
    models = {}
    for name in names:
        path = ckpt_dir / f"heldout_{name}.dac"
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint {path} is missing")
        models[name] = load_checkpoint(path)
    return models


def do_generate(cfg: ExperimentConfig, out: Path) -> Dict[str, DatasetSplit]:
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    splits = generate_dataset(cfg.domain_specs(), cfg.dataset.per_domain_n, cfg.dataset.num_classes,
                              seed=cfg.dataset_seed, size=cfg.dataset.image_size)
    for name, split in splits.items():
        save_split(split, data_dir / f"{name}.dac")
    log.info("generated %d domains x %d images in %.1fs", len(splits), cfg.dataset.per_domain_n,
             time.perf_counter() - t0)
    return splits


def do_train(cfg: ExperimentConfig, splits: Dict[str, DatasetSplit], out: Path) -> None:
    """One ERM checkpoint per held-out domain, trained on the remaining domains."""
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    tcfg = cfg.train_config()
    with open(out / "train_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["held_out", "epoch", "train_loss", "train_acc", "val_acc", "held_out_acc"])
        for held in cfg.held_out():
            t0 = time.perf_counter()
            sources = [s for name, s in splits.items() if name != held]
            model, history = train_baseline(sources, tcfg, cfg.dataset.num_classes)
            save_checkpoint(model, ckpt_dir / f"heldout_{held}.dac",
                            extra={"held_out": held, "sources": [s.domain for s in sources]})
            target = evaluate(model, splits[held], replace(cfg.adapt.base(), method="source-only"),
                              cfg.adapt.batch_size, seed=0).accuracy
            for h in history:
                w.writerow([held, h["epoch"], repr(h["train_loss"]), repr(h["train_acc"]), repr(h["val_acc"]),
                            repr(target) if h is history[-1] else ""])
            log.info("held out %s: val %.3f, held-out source-only %.3f (%.1fs)", held, history[-1]["val_acc"],
                     target, time.perf_counter() - t0)


def _method_config(cfg: ExperimentConfig, spec: str):
    if spec.split("@")[0] == "mixbn-fixed":
        if cfg.adapt.alpha is None:
            raise ConfigError("adapt.alpha must be set to run mixbn-fixed")
        return parse_method(spec, replace(cfg.adapt.base(), alpha=cfg.adapt.alpha))
    return parse_method(spec, cfg.adapt.base())


def do_adapt(cfg: ExperimentConfig, splits, models, out: Path, rid: str) -> List[dict]:
    configs = [(spec, _method_config(cfg, spec)) for spec in cfg.adapt.methods]
    summary = []
    for held in cfg.held_out():
        first = True
        for spec, acfg in configs:
            for seed in cfg.adapt.seeds:
                t0 = time.perf_counter()
                rep = evaluate(models[held], splits[held], acfg, cfg.adapt.batch_size, seed=seed,
                               subset_size=cfg.adapt.subset_size)
                rep.write_csv(out / f"adapt_{held}.csv", rid, held, append=not first)
                write_alpha_csv([rep], out / f"alpha_{held}.csv", rid, held, append=not first)
                first = False
                summary.append({"domain": held, "method": spec, "seed": seed, "accuracy": rep.accuracy,
                                "n": len(splits[held])})
                log.info("%-8s %-28s seed %d acc %.4f (%.1fs)", held, spec, seed, rep.accuracy,
                         time.perf_counter() - t0)
    with open(out / "adapt_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "domain", "method", "seed", "accuracy", "n"])
        for row in summary:
            w.writerow([rid, row["domain"], row["method"], row["seed"], repr(row["accuracy"]), row["n"]])
    return summary


# commands ------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, args) -> Path:
    out = run_dir(args.out, "generate", cfg)
    do_generate(cfg, out)
    return out


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    data_dir = _require_dir(cfg.paths.data_dir, "paths.data_dir")
    splits = load_data(data_dir, cfg)
    out = run_dir(args.out, "train", cfg)
    do_train(cfg, splits, out)
    return out


def cmd_adapt(cfg: ExperimentConfig, args) -> Path:
    splits = load_data(_require_dir(cfg.paths.data_dir, "paths.data_dir"), cfg)
    models = load_models(_require_dir(cfg.paths.checkpoint_dir, "paths.checkpoint_dir"), cfg.held_out())
    out = run_dir(args.out, "adapt", cfg)
    do_adapt(cfg, splits, models, out, run_id("adapt", cfg))
    return out


def cmd_sweep(cfg: ExperimentConfig, args) -> Path:
    splits = load_data(_require_dir(cfg.paths.data_dir, "paths.data_dir"), cfg)
    held = cfg.held_out()
    models = load_models(_require_dir(cfg.paths.checkpoint_dir, "paths.checkpoint_dir"), held)
    out = run_dir(args.out, "sweep", cfg)
    base = cfg.adapt.base()
    if cfg.sweep.steps is not None:
        base = replace(base, steps=cfg.sweep.steps)
    t0 = time.perf_counter()
    rows = sweep(cfg.sweep.kind, cfg.sweep.grid, base, {d: (models[d], splits[d]) for d in held},
                 seeds=cfg.sweep.seeds, methods=cfg.sweep.methods, batch_size=cfg.sweep.batch_size,
                 out_dir=out, jobs=args.jobs)
    log.info("sweep %s: %d rows in %.1fs", cfg.sweep.kind, len(rows), time.perf_counter() - t0)
    return out


def cmd_verify(cfg: ExperimentConfig, args) -> Path:
    out = run_dir(args.out, "verify", cfg)
    results = run_all()
    with open(out / "verify.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "detail", "seconds"])
        for r in results:
            w.writerow([r.name, r.passed, r.detail, f"{r.seconds:.3f}"])
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}", file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"failed checks: {', '.join(failed)}")
    return out


def cmd_pipeline(cfg: ExperimentConfig, args) -> Path:
    """generate, train and adapt in one run directory."""
    out = run_dir(args.out, "pipeline", cfg)
    splits = do_generate(cfg, out)
    do_train(cfg, splits, out)
    models = load_models(out / "checkpoints", cfg.held_out())
    do_adapt(cfg, splits, models, out, run_id("pipeline", cfg))
    return out


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainadaptor", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON experiment config; defaults apply to missing keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON-parsed when possible); repeatable")
    parser.add_argument("--seed", type=int, help="root seed")
    parser.add_argument("--out", default="runs", help="parent directory for run directories")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.jobs < 1:
        return _fail(EXIT_CONFIG, "config", "--jobs must be at least 1")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        out = COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, IncompatibleSnapshotError) as e:
        kind = "file" if isinstance(e, FileNotFoundError) else "config"
        return _fail(EXIT_CONFIG, kind, str(e))
    except VerificationFailed as e:
        return _fail(EXIT_VERIFY, "verify", str(e))
    except (DivergenceError, PreconditionError, FloatingPointError, ArithmeticError, RuntimeError) as e:
        return _fail(EXIT_RUNTIME, "runtime", f"{type(e).__name__}: {e}")
    log.info("outputs in %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
