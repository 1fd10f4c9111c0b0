"""Command-line entry point: ``iclebm {gen-tasks,train,landscape,sample}``.

Exit codes: 0 success, 2 configuration/input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ConfigLayer, build_config, config_to_dict, load_config_file, parse_value
from .datagen import child_generators, load_tasks, sample_sequence, sample_task, save_tasks
from .evaluation import (
    sharpening_curve,
    energy_landscape,
    write_grid_csv,
    write_grid_pgm,
    write_report_csv,
)
from .model import CheckpointError, init_params, load_checkpoint, parameter_count
from .rng import derive_seed
from .sampler import sample_conditional, write_samples_csv
from .trainer import TrainingAborted, train

log = logging.getLogger("iclebm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(ValueError):
    """Bad user input other than config keys (exit code 2)."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class RunManifest:
    """JSON manifest written at run start and rewritten atomically at the end."""

    def __init__(self, path, command: str, config: dict, seed: int, extra: dict | None = None):
        self.path = Path(path)
        self.data = {
            "command": command,
            "code_version": __version__,
            "seed": seed,
            "threads": torch.get_num_threads(),
            "config": config,
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
            "artifacts": [],
        }
        if extra:
            self.data.update(extra)
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2) + "\n")
        os.replace(tmp, self.path)

    def add(self, *paths):
        self.data["artifacts"].extend(str(p) for p in paths)

    def finish(self, status: str = "ok"):
        self.data["status"] = status
        self.data["finished_at"] = _now()
        self._write()


def _overrides(args, seed_key: str, extra: dict) -> ConfigLayer:
    layer = ConfigLayer()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        layer[key] = parse_value(key, value, source="--set")
    for key, value in extra.items():
        if value is not None:
            layer[key] = value
    if args.seed is not None:
        layer[seed_key] = args.seed
    return layer


def _load(args, seed_key: str, extra: dict | None = None):
    layers = [load_config_file(args.config)] if args.config else []
    layers.append(_overrides(args, seed_key, extra or {}))
    return build_config(*layers)


def cmd_gen_tasks(args) -> int:
    cfg = _load(args, "tasks.seed", {"tasks.num_tasks": args.num_tasks})
    gens = child_generators(cfg.tasks.seed, cfg.tasks.num_tasks)
    tasks = [sample_task(cfg.prior, g) for g in gens]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tasks(tasks, out)
    print(f"wrote {len(tasks)} tasks to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args, "train.seed", {"train.num_steps": args.num_steps})
    tcfg = cfg.train_config()
    if args.dry_run:
        model = init_params(cfg.model, derive_seed(tcfg.seed, 0))
        print(f"config ok; parameter count: {parameter_count(model)}")
        return EXIT_OK
    out = Path(args.out)
    manifest = RunManifest(out / "manifest.json", "train", config_to_dict(cfg), tcfg.seed)

    def progress(m):
        if m.step % max(1, tcfg.log_every * 100) == 0:
            log.info("step %d loss %.5f gap %.5f", m.step, m.loss, m.energy_gap)

    try:
        final = train(cfg.prior, cfg.model, tcfg, out, progress=progress)
    except TrainingAborted as exc:
        manifest.add(out / "metrics.csv", exc.checkpoint)
        manifest.finish("aborted")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.add(out / "metrics.csv", *sorted((out / "checkpoints").glob("*.ckpt")))
    manifest.data["final_checkpoint"] = str(final)
    manifest.finish()
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _parse_lengths(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--lengths expects comma-separated integers, got {text!r}") from None


def cmd_landscape(args) -> int:
    lengths = _parse_lengths(args.lengths) if args.lengths else None
    cfg = _load(args, "eval.seed", {"eval.lengths": lengths})
    lengths = sorted(cfg.eval.lengths)
    tasks = load_tasks(args.tasks)
    model = load_checkpoint(args.checkpoint)
    if lengths and lengths[-1] > model.max_seq_len - 1:
        raise InputError(f"context length {lengths[-1]} exceeds max_seq_len - 1 = {model.max_seq_len - 1}")
    out = Path(args.out)
    manifest = RunManifest(
        out / "manifest.json", "landscape", config_to_dict(cfg), cfg.eval.seed,
        {"checkpoint": str(args.checkpoint), "tasks": str(args.tasks)},
    )
    grid = cfg.eval.grid
    reports = []
    n_max = max(lengths) if lengths else 0
    for tid, (task, gen) in enumerate(zip(tasks, child_generators(cfg.eval.seed, len(tasks)))):
        context = sample_sequence(task, max(n_max, 1), gen)
        for n in lengths:
            g = energy_landscape(model, context[:n], grid)
            stem = out / f"grid_task{tid:03d}_len{n:03d}"
            write_grid_csv(g, stem.with_suffix(".csv"))
            write_grid_pgm(g, stem.with_suffix(".pgm"))
            manifest.add(stem.with_suffix(".csv"), stem.with_suffix(".pgm"))
        reports.append(sharpening_curve(model, task, context, lengths, grid, task_id=tid))
    write_report_csv(reports, out / "report.csv")
    manifest.add(out / "report.csv")
    manifest.finish()
    print(f"wrote {len(tasks) * len(lengths)} grids and {out / 'report.csv'}")
    return EXIT_OK


def read_context_csv(path, dim: int | None = None) -> np.ndarray:
    """Read context points; columns ``x0..x{d-1}`` if a header is present, else all columns."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        return np.zeros((0, dim or 0))
    header = rows[0]
    try:
        [float(c) for c in header]
        cols, data, first = list(range(len(header))), rows, 1
    except ValueError:
        cols = [i for i, name in enumerate(header) if name.strip().startswith("x")]
        if not cols:
            raise InputError(f"{path}: header has no x0, x1, ... columns") from None
        data, first = rows[1:], 2
    out = []
    for r, row in enumerate(data, first):
        vals = []
        for c in cols:
            if c >= len(row):
                raise InputError(f"{path}: row {r}, column {c + 1}: missing value")
            try:
                vals.append(float(row[c]))
            except ValueError:
                raise InputError(f"{path}: row {r}, column {c + 1}: cannot parse {row[c]!r} as a number") from None
        out.append(vals)
    arr = np.asarray(out, dtype=np.float64).reshape(len(out), len(cols))
    if dim is not None and arr.shape[1] != dim:
        raise InputError(f"{path}: context has {arr.shape[1]} coordinate columns, model expects {dim}")
    return arr


def cmd_sample(args) -> int:
    cfg = _load(
        args,
        "eval.seed",
        {
            "eval.num_samples": args.num_samples,
            "langevin.step_size": args.step_size,
            "langevin.noise_scale": args.noise_scale,
            "langevin.num_steps": args.steps,
        },
    )
    model = load_checkpoint(args.checkpoint)
    context = read_context_csv(args.context, model.input_dim)
    if context.shape[0] + 1 > model.max_seq_len:
        raise InputError(f"context has {context.shape[0]} points; at most {model.max_seq_len - 1} allowed")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        out.with_name(out.stem + ".manifest.json"), "sample", config_to_dict(cfg), cfg.eval.seed,
        {"checkpoint": str(args.checkpoint), "context": str(args.context),
         "langevin": {k: v for k, v in config_to_dict(cfg).items() if k.startswith("langevin.")}},
    )
    res = sample_conditional(model, context, cfg.eval.num_samples, cfg.langevin, cfg.eval.seed,
                             return_trajectory=args.trajectory)
    if args.trajectory:
        final, traj = res
        write_samples_csv(out, final.detach().numpy(), traj.detach().numpy())
    else:
        write_samples_csv(out, res.detach().numpy())
    manifest.add(out)
    manifest.finish()
    print(f"wrote {cfg.eval.num_samples} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iclebm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help, out_default=None):
        sp.add_argument("--config", help="config file with section.key = value lines")
        sp.add_argument("--seed", type=int, help="seed for this command")
        sp.add_argument("--out", required=out_default is None, default=out_default, help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--threads", type=int, help="torch intra-op thread count")

    sp = sub.add_parser("gen-tasks", help="sample mixture tasks to a text file")
    common(sp, "output task file")
    sp.add_argument("--num-tasks", type=int)
    sp.set_defaults(func=cmd_gen_tasks)

    sp = sub.add_parser("train", help="train an energy transformer")
    common(sp, "output directory", out_default="runs/train")
    sp.add_argument("--dry-run", action="store_true", help="validate config and print parameter count")
    sp.add_argument("--num-steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("landscape", help="energy grids and sharpening report")
    common(sp, "output directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tasks", required=True, help="task file from gen-tasks")
    sp.add_argument("--lengths", help="comma-separated context lengths, e.g. 2,8,32")
    sp.set_defaults(func=cmd_landscape)

    sp = sub.add_parser("sample", help="Langevin samples conditioned on a context CSV")
    common(sp, "output samples CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--context", required=True)
    sp.add_argument("--num-samples", type=int)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--noise-scale", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--trajectory", action="store_true", help="export every chain state, not just the final one")
    sp.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
