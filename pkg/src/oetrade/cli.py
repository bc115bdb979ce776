"""Command-line driver.

Every command writes below an output root taken from ``--out`` or, failing
that, ``$OETRADE_OUTPUT`` (default ``./oetrade-output``), in a directory
named after the config. ``--seed`` overrides the seeds listed in a config.

Exit status: 0 on success, 1 when a run finished with failed seeds,
2 on bad arguments, configs or inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from . import data as data_mod
from . import harness as H
from . import metrics as M
from . import model as model_mod
from . import sampling
from .errors import ConfigError, OETradeError

OUTPUT_ENV = "OETRADE_OUTPUT"
DEFAULT_OUTPUT = "oetrade-output"

log = logging.getLogger("oetrade")


def parse_seeds(text: str) -> list[int]:
    """``"1..8"``, ``"1,3,5"``, ``"2"`` or a mix such as ``"1..3,7"``."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(v) for v in part.split("..", 1))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed list {text!r}; use e.g. 1..8 or 1,2,3") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def output_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _run_dir(args, cfg) -> Path:
    d = output_root(args) / cfg.name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _seed(cfg) -> int:
    return cfg.seeds[0]


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _teacher(args, cfg, task, seed):
    if getattr(args, "teacher", None):
        return model_mod.load(args.teacher)
    return H.pretrain(cfg, seed, task.id_train)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    doc = yaml.safe_load(Path(args.spec).read_text()) or {}
    out = output_root(args) / "data"
    out.mkdir(parents=True, exist_ok=True)
    suffix = ".csv" if args.format == "csv" else ".oetd"
    if "kind" in doc:
        spec = data_mod.DatasetSpec.from_dict(doc)
        spec.validate()
        datasets = [data_mod.generate(spec)]
    else:
        cfg = config_mod.from_dict(doc)
        task = H.build_data(cfg)
        datasets = [task.id_train, task.id_test, task.pool, *task.ood_tests]
    for ds in datasets:
        path = out / f"{ds.name or ds.kind}{suffix}"
        data_mod.save(ds, path)
        print(f"{path}\t{len(ds)} x {ds.dim}\t{ds.provenance}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    seed = _seed(cfg)
    task = H.build_data(cfg)
    teacher = H.pretrain(cfg, seed, task.id_train)
    path = _run_dir(args, cfg) / f"teacher-seed-{seed}.json"
    model_mod.save(teacher, path)
    acc = M.accuracy(model_mod.predict_logits(teacher, task.id_test.inputs).argmax(1), task.id_test.labels)
    print(f"{path}\tid_test acc {acc:.4f}")
    return 0


def cmd_sample_outliers(args) -> int:
    cfg = _load_config(args)
    seed = _seed(cfg)
    plan = sampling.SamplePlan(
        cfg.sampling.q if args.q is None else args.q,
        cfg.sampling.step if args.step is None else args.step,
        cfg.sampling.m if args.m is None else args.m,
    )
    task = H.build_data(cfg)
    teacher = _teacher(args, cfg, task, seed)
    scored = sampling.score_pool(teacher, task.pool.inputs, pool_id=task.pool.provenance)
    samples, idx = sampling.select(scored, plan)
    d = _run_dir(args, cfg)
    sampling.save_scored_pool(scored, d / f"scored-pool-seed-{seed}.json")
    tag = f"q{plan.q:.2f}-s{plan.step}-m{plan.m}-seed-{seed}"
    ds = data_mod.Dataset(samples, None, "outlier_pool", task.pool.classes, task.pool.seed,
                          f"{task.pool.provenance}:{tag}", f"sampled-{tag}")
    data_mod.save(ds, d / f"sampled-{tag}.oetd")
    np.savetxt(d / f"sampled-{tag}.idx", idx, fmt="%d")
    h = scored.hardness[idx]
    print(f"{d / f'sampled-{tag}.oetd'}\tm={len(idx)}\thardness mean {h.mean():.4f} min {h.min():.4f} max {h.max():.4f}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    seed = _seed(cfg)
    task = H.build_data(cfg)
    teacher = _teacher(args, cfg, task, seed)
    flags, weights = H.method_setup(cfg, args.method)
    if args.outliers:
        outliers = data_mod.load(args.outliers).inputs
    else:
        scored = sampling.score_pool(teacher, task.pool.inputs, pool_id=task.pool.provenance)
        outliers = H.sampled_outliers(cfg, scored, flags, seed)
    student, history = H.finetune(teacher, outliers, task.id_train, cfg, seed, flags, weights, task.feature_std)
    d = _run_dir(args, cfg)
    slug = H._slug(args.method)
    model_mod.save(student, d / f"student-{slug}-seed-{seed}.json")
    (d / f"student-{slug}-seed-{seed}.log.json").write_text(json.dumps(history, indent=2))
    last = history[-1]
    print(f"{d / f'student-{slug}-seed-{seed}.json'}\tfinal total {last['total']:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    seed = _seed(cfg)
    task = H.build_data(cfg)
    params = model_mod.load(args.checkpoint) if args.checkpoint else H.pretrain(cfg, seed, task.id_train)
    ev = H.evaluate(params, task.id_test, task.ood_tests, args.score or cfg.score, seed, cfg.aupr_positive)
    d = _run_dir(args, cfg)
    name = Path(args.checkpoint).stem if args.checkpoint else f"teacher-seed-{seed}"
    (d / f"eval-{name}-{ev.report.score}.json").write_text(json.dumps(ev.report.to_dict(), indent=2, sort_keys=True))
    if args.curves:
        for set_name, ss in ev.score_sets.items():
            M.write_roc_csv(d / f"roc-{name}-{set_name}.csv", ss)
    _print_json(ev.report.to_dict())
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(parse_seeds(args.seeds)))
    methods = args.methods.split(",") if args.methods else None
    d = _run_dir(args, cfg)
    record = H.run_experiment(cfg, d, methods, write_curves=args.curves)
    sys.stdout.write(H.aggregate_csv(record))
    if record.failed:
        for seed, msg in record.failures.items():
            print(f"seed {seed} failed: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    q_grid = [float(v) for v in args.q_grid.split(",")] if args.q_grid else sampling.Q_GRID
    step_grid = [int(v) for v in args.step_grid.split(",")] if args.step_grid else sampling.STEP_GRID
    result = H.grid_search_sampling(cfg, q_grid, step_grid)
    d = _run_dir(args, cfg)
    (d / "grid.csv").write_text(result.to_csv())
    sys.stdout.write(result.to_csv())
    print(f"best q={result.best[0]:.2f} step={result.best[1]}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    record = H.load_run(args.run_dir)
    if args.format == "csv":
        sys.stdout.write(H.aggregate_csv(record))
    else:
        _print_json(record.to_dict())
    return 1 if record.failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oetrade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="experiment config (YAML or JSON)")
        sp.add_argument("--seed", type=int, help="run this single seed instead of the config's seeds")
        sp.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        return sp

    sp = sub.add_parser("gen-data", help="generate datasets from a dataset spec or an experiment config")
    sp.add_argument("spec")
    sp.add_argument("--format", choices=("binary", "csv"), default="binary")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_gen_data)

    with_config("pretrain", "train the teacher on classification only").set_defaults(func=cmd_pretrain)

    sp = with_config("sample-outliers", "score the pool with the teacher and select outliers")
    sp.add_argument("--q", type=float)
    sp.add_argument("--step", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--teacher", help="teacher checkpoint; pretrains when omitted")
    sp.set_defaults(func=cmd_sample_outliers)

    sp = with_config("finetune", "fine-tune a student from the teacher")
    sp.add_argument("--teacher")
    sp.add_argument("--outliers", help="sampled outlier dataset; samples from the pool when omitted")
    sp.add_argument("--method", default="custom", choices=("custom", *config_mod.METHODS))
    sp.set_defaults(func=cmd_finetune)

    sp = with_config("eval", "evaluate a checkpoint on the ID and OOD test sets")
    sp.add_argument("--score", choices=tuple(M.SCORERS))
    sp.add_argument("--checkpoint", help="model checkpoint; pretrains a teacher when omitted")
    sp.add_argument("--curves", action="store_true", help="also write ROC point CSVs")
    sp.set_defaults(func=cmd_eval)

    sp = with_config("run", "full pipeline over seeds, with optional ablation ladder")
    sp.add_argument("--seeds", help="e.g. 1..8 or 1,2,3")
    sp.add_argument("--methods", help="comma-separated ladder rungs, default: config ladder or custom")
    sp.add_argument("--curves", action="store_true", help="write ROC point CSVs per seed and OOD set")
    sp.set_defaults(func=cmd_run)

    sp = with_config("grid", "sweep the sampling quantile and step")
    sp.add_argument("--q-grid", help="comma-separated q values (default 0.00..0.90)")
    sp.add_argument("--step-grid", help="comma-separated steps (default 1,2)")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("report", help="print a finished run as CSV or JSON")
    sp.add_argument("run_dir")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OETradeError, FileNotFoundError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"oetrade: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
