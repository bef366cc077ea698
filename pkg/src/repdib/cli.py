"""Command-line entry point: stage execution, analyses, figures and ablation grids."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bottleneck import ConfigurationError, dump_codebook_csv
from .envs import ContractError
from .metrics import LogParseError, coverage, distance_map, export_embeddings, write_matrix_csv
from .numcore import CheckpointError
from .pipeline import ConfigError, DivergenceError, RunConfig, StageOrderError, Trainer

log = logging.getLogger("repdib")

COMMANDS = ("pretrain-bottleneck", "pretrain-encoder", "finetune", "run-all", "eval",
            "export-embeddings", "distance-map", "plot", "ablate")
STAGE_CHECKPOINTS = {1: "checkpoint_stage1.bin", 2: "checkpoint_stage2.bin", 3: "checkpoint.bin"}
MAX_ABLATION_RUNS = 64
SUMMARY_HEADER = ["n_seeds", "mean_return", "std_return", "coverage"]


class CliError(RuntimeError):
    pass


def _out_base(args) -> Path:
    return Path(args.out or os.environ.get("REPDIB_OUT") or "runs")


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set or [])
    if args.seed is not None:
        cfg = cfg.with_overrides([f"seed={args.seed}"])
    return cfg.validate()


def _write_config(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} checkpoint not found: expected {path}")
    return path


def _load(run_dir: Path, stage: int, cfg: RunConfig) -> Trainer:
    path = _require(run_dir / STAGE_CHECKPOINTS[stage], f"stage {stage}")
    return Trainer.load(path, run_dir, cfg)


def _finish(trainer: Trainer, run_dir: Path, stage: int) -> None:
    trainer.save(run_dir / STAGE_CHECKPOINTS[stage])
    trainer.close()


def run_stage(cfg: RunConfig, run_dir: Path, stage: int, force: bool) -> bool:
    """Run one stage into ``run_dir``; returns False when it had already completed."""
    target = run_dir / STAGE_CHECKPOINTS[stage]
    if target.exists() and not force:
        return False
    if stage == 1:
        if force and run_dir.exists():
            _clear_run(run_dir)
        _write_config(cfg, run_dir)
        trainer = Trainer(cfg, run_dir)
        trainer.stage1()
    else:
        trainer = _load(run_dir, stage - 1, cfg)
        _write_config(cfg, run_dir)
        if stage == 2:
            trainer.stage2()
        else:
            trainer.stage3()
    _finish(trainer, run_dir, stage)
    if stage == 3:
        render_figures(cfg, run_dir, force=True)
    return True


def run_all(cfg: RunConfig, run_dir: Path, force: bool = False) -> bool:
    if (run_dir / STAGE_CHECKPOINTS[3]).exists() and not force:
        return False
    if force and run_dir.exists():
        _clear_run(run_dir)
    _write_config(cfg, run_dir)
    trainer = Trainer(cfg, run_dir)
    for stage, fn in ((1, trainer.stage1), (2, trainer.stage2), (3, trainer.stage3)):
        fn()
        trainer.save(run_dir / STAGE_CHECKPOINTS[stage])
    trainer.close()
    render_figures(cfg, run_dir, force=True)
    return True


def _clear_run(run_dir: Path) -> None:
    for child in run_dir.iterdir():
        if child.is_dir():
            shutil.rmtree(child)
        else:
            child.unlink()


def render_figures(cfg: RunConfig, run_dir: Path, force: bool = False) -> list[Path]:
    from . import envs
    from .plotting import plot_run
    svgs = list(run_dir.glob("*.svg"))
    if svgs and not force:
        return []
    return plot_run(run_dir, envs.make_layout(cfg.pretrain_env))


def _latest_checkpoint(run_dir: Path) -> Path:
    for stage in (3, 2, 1):
        path = run_dir / STAGE_CHECKPOINTS[stage]
        if path.exists():
            return path
    raise CliError(f"no checkpoint found: expected {run_dir / STAGE_CHECKPOINTS[3]}")


def _guard_output(path: Path, force: bool) -> bool:
    """True when ``path`` may be written."""
    return force or not path.exists()


def cmd_eval(cfg, run_dir, args) -> int:
    out = run_dir / "eval_final.csv"
    if not _guard_output(out, args.force):
        return 0
    trainer = Trainer.load(_latest_checkpoint(run_dir), None, cfg)
    returns = trainer.evaluate()
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_row", "start_col", "return"])
        for row in trainer.eval_rows[-len(returns):]:
            w.writerow([row[1], row[2], row[3]])
    print(f"mean greedy return {np.mean(returns):.2f} over {len(returns)} starts")
    return 0


def cmd_export(cfg, run_dir, args) -> int:
    out = run_dir / "embeddings.csv"
    cb_out = run_dir / "codebook.csv"
    if not (_guard_output(out, args.force) and _guard_output(cb_out, args.force)):
        return 0
    trainer = Trainer.load(_latest_checkpoint(run_dir), None, cfg)
    export_embeddings(trainer.model, trainer.pre_spec, out)
    if trainer.model.codebook is not None:
        dump_codebook_csv(trainer.model.codebook, cb_out)
    return 0


def cmd_distance_map(cfg, run_dir, args) -> int:
    out = run_dir / ("distance_map.csv" if not args.prequant else "distance_map_prequant.csv")
    if not _guard_output(out, args.force):
        return 0
    trainer = Trainer.load(_latest_checkpoint(run_dir), None, cfg)
    anchor = tuple(int(x) for x in args.anchor.split(",")) if args.anchor else None
    matrix = distance_map(trainer.model, trainer.pre_spec, anchor, quantized=not args.prequant)
    write_matrix_csv(matrix, out)
    return 0


def cmd_plot(cfg, run_dir, args) -> int:
    if not run_dir.exists():
        raise CliError(f"run directory not found: {run_dir}")
    made = render_figures(cfg, run_dir, force=args.force)
    for path in made:
        print(path)
    return 0


# ---------------------------------------------------------------- ablation
def parse_axes(specs: list[str]) -> list[tuple[str, list[str]]]:
    axes = []
    names = set(RunConfig.field_names())
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"axis {spec!r} is not key=v1,v2,...")
        key, values = spec.split("=", 1)
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(names))}")
        vals = [v for v in values.split(",") if v != ""]
        if not vals:
            raise ConfigError(f"axis {key!r} has no values")
        axes.append((key, vals))
    return axes


def _combo_tag(combo: dict) -> str:
    return "_".join(f"{k}-{v}" for k, v in combo.items()) or "base"


def _ablation_job(payload) -> dict:
    cfg_dict, run_dir, force = payload
    cfg = RunConfig.from_dict(cfg_dict)
    run_dir = Path(run_dir)
    run_all(cfg, run_dir, force)
    return summarize_run(run_dir, cfg)


def summarize_run(run_dir: Path, cfg: RunConfig) -> dict:
    """Final-evaluation mean return and pretraining coverage of one finished run."""
    from . import envs
    with open(run_dir / "eval.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    last = max(int(r["step"]) for r in rows)
    returns = [float(r["return"]) for r in rows if int(r["step"]) == last]
    cov = coverage(run_dir / "trajectory.csv", envs.make_layout(cfg.pretrain_env)).fraction
    return {"return": float(np.mean(returns)), "coverage": cov}


def ablate(base: RunConfig, axes, seeds: list[int], out: Path, force: bool = False,
           jobs: int = 1, allow_large: bool = False) -> Path:
    combos = [dict(zip([k for k, _ in axes], values)) for values in itertools.product(*[v for _, v in axes])]
    n_runs = len(combos) * len(seeds)
    if n_runs > MAX_ABLATION_RUNS and not allow_large:
        raise CliError(f"ablation would launch {n_runs} runs (> {MAX_ABLATION_RUNS}); pass --allow-large to proceed")
    payloads, keys = [], []
    for combo in combos:
        for seed in seeds:
            cfg = base.with_overrides([f"{k}={v}" for k, v in combo.items()] + [f"seed={seed}"])
            run_dir = out / "ablate" / _combo_tag(combo) / cfg.run_name
            payloads.append((cfg.to_dict(), str(run_dir), force))
            keys.append(_combo_tag(combo))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_job, payloads))
    else:
        results = [_ablation_job(p) for p in payloads]
    by_combo: dict[str, list[dict]] = {}
    for key, res in zip(keys, results):
        by_combo.setdefault(key, []).append(res)
    summary = out / "ablate_summary.csv"
    out.mkdir(parents=True, exist_ok=True)
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([k for k, _ in axes] + SUMMARY_HEADER)
        for combo in combos:
            res = by_combo[_combo_tag(combo)]
            rets = np.array([r["return"] for r in res])
            covs = np.array([r["coverage"] for r in res])
            w.writerow(list(combo.values()) + [len(res), repr(float(rets.mean())), repr(float(rets.std())),
                                               repr(float(covs.mean()))])
    return summary


# -------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output root (default: $REPDIB_OUT or ./runs)")
    common.add_argument("--force", action="store_true", help="redo work and overwrite artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="repdib", description="Discrete information bottleneck RL on small mazes")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "distance-map":
            p.add_argument("--anchor", help="anchor cell as row,col (default: maze center)")
            p.add_argument("--prequant", action="store_true", help="use pre-quantization embeddings")
        if name == "ablate":
            p.add_argument("axes", nargs="+", metavar="KEY=V1,V2", help="config axes to sweep")
            p.add_argument("--seeds", default="0", help="comma-separated seeds averaged per combination")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
            p.add_argument("--allow-large", action="store_true", help=f"permit more than {MAX_ABLATION_RUNS} runs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        base = _out_base(args)
        if args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",")]
            summary = ablate(cfg, parse_axes(args.axes), seeds, base, args.force, args.jobs, args.allow_large)
            print(summary)
            return 0
        run_dir = base / cfg.run_name
        if args.command == "run-all":
            if not run_all(cfg, run_dir, args.force):
                print(f"{run_dir}: already complete (use --force to redo)")
            return 0
        stage = {"pretrain-bottleneck": 1, "pretrain-encoder": 2, "finetune": 3}.get(args.command)
        if stage is not None:
            if not run_stage(cfg, run_dir, stage, args.force):
                print(f"{run_dir / STAGE_CHECKPOINTS[stage]}: already complete (use --force to redo)")
            return 0
        handler = {"eval": cmd_eval, "export-embeddings": cmd_export,
                   "distance-map": cmd_distance_map, "plot": cmd_plot}[args.command]
        return handler(cfg, run_dir, args)
    except (CliError, ConfigError, ConfigurationError, StageOrderError, DivergenceError,
            CheckpointError, LogParseError, ContractError, json.JSONDecodeError, OSError) as exc:
        print(f"repdib {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
