"""Command-line runner: single runs, seed batches, grid presets and plot exports.

Output layout under ``--out``::

    <branch>_<pattern>_<strategy>/
        seed-<n>/            config.json, metrics.jsonl, loss.csv, gradvar.csv, summary.csv
        summary.csv          one row per seed plus an aggregate row
        aggregate.json       mean/std/min/max across seeds
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .allocation import AllocationError, BRANCH_SELECTORS, LayerPattern, make_policy
from .data import DataConfig
from .harness import (
    SUMMARY_COLUMNS,
    RunConfig,
    RunMetrics,
    aggregate_seeds,
    read_run,
    run_stream,
    summary_row,
    write_csv,
    write_run,
)
from .memory import memory_footprint
from .model import ModelConfig
from .optim import STRATEGIES, OptimError, ZOConfig

log = logging.getLogger("mozo_lab")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
SEED_ENV = "MOZO_LAB_SEED"
TABLE_SEEDS = 5

# branches x patterns x strategies; ``train=False`` cells only evaluate the cost model
GRID_PRESETS = {
    "paper-table1": dict(branches=("none", "dual", "vision", "language"), patterns=("all",), strategies=("zo-conservative",)),
    "paper-table2": dict(
        branches=("dual", "vision", "language"),
        patterns=("hop-odd", "hop-even", "prefix:6", "suffix:6"),
        strategies=("zo-conservative",),
    ),
    "paper-table3": dict(branches=("dual",), patterns=("hop-odd", "hop-even"), strategies=("zo-conservative", "mozo")),
    "paper-table4": dict(branches=("dual", "vision", "language"), patterns=("all",), strategies=("zo-naive", "zo-sign")),
    "paper-table5": dict(
        branches=("none", "dual", "vision", "language"), patterns=("all",), strategies=("zo-conservative",), train=False
    ),
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Cell:
    branch: str
    pattern: str
    strategy: str

    @property
    def name(self) -> str:
        return f"{self.branch}_{self.pattern.replace(':', '')}_{self.strategy}"


@dataclass(frozen=True)
class ExperimentGrid:
    cells: tuple[Cell, ...]
    seeds: tuple[int, ...]
    base: RunConfig
    train: bool = True

    def __len__(self) -> int:
        return len(self.cells) * len(self.seeds)

    def runs(self):
        for cell in self.cells:
            for seed in self.seeds:
                yield cell, seed


def _block(cfg: dict, key: str, typ):
    try:
        return typ(**cfg.get(key, {}))
    except (TypeError, ValueError, OptimError) as exc:
        raise UsageError(f"config block {key!r}: {exc}") from None


def load_config(path: Optional[str]) -> tuple[RunConfig, Optional[int]]:
    """Read a JSON config with ``data``, ``model``, ``zo`` and ``run`` blocks."""
    if path is None:
        return RunConfig(), None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(cfg) - {"data", "model", "zo", "run", "seed"}
    if unknown:
        raise UsageError(f"unknown config blocks {sorted(unknown)}")
    run = dict(cfg.get("run", {}))
    for k in ("data", "model", "zo", "opt_seed", "output"):
        if k in run:
            raise UsageError(f"run block may not set {k!r}")
    try:
        base = RunConfig(
            data=_block(cfg, "data", DataConfig),
            model=_block(cfg, "model", ModelConfig),
            zo=_block(cfg, "zo", ZOConfig),
            **run,
        )
    except TypeError as exc:
        raise UsageError(f"config block 'run': {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return base, cfg.get("seed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mozo-lab", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file (blocks: data, model, zo, run)")
    p.add_argument("--branch", choices=sorted(BRANCH_SELECTORS), help="branches optimized with ZO")
    p.add_argument("--pattern", help="all | hop-odd | hop-even | prefix:K | suffix:K")
    p.add_argument("--strategy", choices=STRATEGIES, help="optimizer for the selected units")
    p.add_argument("--inc", type=int, help="classes per task")
    p.add_argument("--epochs", type=int, help="epochs per task")
    p.add_argument("--seeds", type=int, default=None, help="number of seeds (consecutive from the base seed)")
    p.add_argument("--seed", type=int, default=None, help=f"base seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--grid", choices=sorted(GRID_PRESETS), help="run a named experiment grid")
    p.add_argument("--list", action="store_true", help="print the runs that would execute and exit")
    p.add_argument("--export", nargs=2, metavar=("RUN_DIR", "KIND"), help="re-export plot data (loss|gradvar|summary)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _base_seed(flag: Optional[int], config_seed: Optional[int]) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0 if config_seed is None else int(config_seed)


def build_grid(args: argparse.Namespace) -> ExperimentGrid:
    base, config_seed = load_config(args.config)
    overrides = {}
    if args.inc is not None:
        overrides["inc_size"] = args.inc
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    base = dataclasses.replace(base, **overrides)
    if base.inc_size < 1 or base.data.num_classes % base.inc_size:
        raise UsageError(f"--inc {base.inc_size} does not divide num_classes {base.data.num_classes}")
    train = True
    if args.grid:
        if args.branch or args.pattern or args.strategy:
            raise UsageError("--grid cannot be combined with --branch/--pattern/--strategy")
        preset = GRID_PRESETS[args.grid]
        cells = [Cell(*c) for c in itertools.product(preset["branches"], preset["patterns"], preset["strategies"])]
        n_seeds = args.seeds if args.seeds is not None else (TABLE_SEEDS if preset.get("train", True) else 1)
        train = preset.get("train", True)
    else:
        cells = [Cell(args.branch or base.branch, args.pattern or base.pattern, args.strategy or base.strategy)]
        n_seeds = 1 if args.seeds is None else args.seeds
    if n_seeds < 1:
        raise UsageError("--seeds must be >= 1")
    for cell in cells:
        try:
            LayerPattern.parse(cell.pattern)
            make_policy(base.model, cell.branch, cell.pattern, cell.strategy)
        except AllocationError as exc:
            raise UsageError(str(exc)) from None
        if cell.strategy == "mozo" and cell.branch != "none":
            try:
                base.zo.check_mozo()
            except OptimError as exc:
                raise UsageError(str(exc)) from None
    start = _base_seed(args.seed, config_seed)
    return ExperimentGrid(tuple(cells), tuple(range(start, start + n_seeds)), base, train)


def cell_config(grid: ExperimentGrid, cell: Cell, seed: int, out: Path) -> RunConfig:
    base = dataclasses.asdict(grid.base)
    for k in ("data", "model", "zo"):
        base[k] = getattr(grid.base, k)
    base.update(branch=cell.branch, pattern=cell.pattern, strategy=cell.strategy)
    base.pop("opt_seed")
    base["output"] = str(out / cell.name / f"seed-{seed}")
    return RunConfig.from_seed(seed, **base)


def _execute(config_dict: dict, seed: int, train: bool) -> tuple[dict, bool]:
    """Worker body: one run, written to its own directory."""
    config = RunConfig.from_dict(config_dict)
    if train:
        metrics = run_stream(config)
    else:
        policy = config.policy()
        metrics = RunMetrics(config=config.to_dict(), policy=policy.name)
        metrics.memory = memory_footprint(config.model, policy, config.batch_size, config.inc_size)
    write_run(metrics, config.output, seed)
    return summary_row(metrics, seed), metrics.partial


def run_grid(grid: ExperimentGrid, out: Path, jobs: int = 1) -> int:
    jobs_list = [(cell, seed, cell_config(grid, cell, seed, out)) for cell, seed in grid.runs()]
    payload = [(c.to_dict(), seed, grid.train) for _, seed, c in jobs_list]
    if jobs > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute, *zip(*payload)))
    else:
        results = [_execute(*p) for p in payload]
    diverged = False
    by_cell: dict[Cell, list] = {}
    for (cell, seed, _), (row, partial) in zip(jobs_list, results):
        by_cell.setdefault(cell, []).append((seed, row))
        if partial:
            diverged = True
            log.error("run %s seed %d diverged; partial metrics written", cell.name, seed)
    for cell, rows in by_cell.items():
        write_cell_summary(out / cell.name, [r for _, r in rows], grid.train)
    return EXIT_DIVERGED if diverged else EXIT_OK


def write_cell_summary(cell_dir: Path, rows: Sequence[dict], trained: bool = True) -> None:
    table = [tuple(r[c] for c in SUMMARY_COLUMNS) for r in rows]
    if len(rows) >= 2 and trained:
        runs = [read_run(cell_dir / f"seed-{r['seed']}") for r in rows]
        stats = aggregate_seeds(runs)
        first = rows[0]
        table.append(
            (first["policy"], "aggregate", stats["last_acc"]["mean"], stats["avg_acc"]["mean"],
             first["tape_floats"], first["grad_floats"], first["perturb_floats"])
        )
        (cell_dir / "aggregate.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_csv(cell_dir / "summary.csv", SUMMARY_COLUMNS, table)


def export_plotdata(run_dir, kind: str) -> Path:
    """Rewrite the tidy CSV of one metric family from ``metrics.jsonl``; idempotent."""
    from .harness import GRADVAR_COLUMNS, LOSS_COLUMNS

    d = Path(run_dir)
    if not (d / "metrics.jsonl").is_file():
        raise FileNotFoundError(f"no run found in {d}")
    m = read_run(d)
    seed = d.name.split("-", 1)[1] if d.name.startswith("seed-") else None
    if kind == "loss":
        path = d / "plot_loss.csv"
        write_csv(path, LOSS_COLUMNS, m.loss)
    elif kind == "gradvar":
        path = d / "plot_gradvar.csv"
        write_csv(path, GRADVAR_COLUMNS, m.gradvar)
    elif kind == "summary":
        path = d / "plot_summary.csv"
        row = summary_row(m, seed)
        write_csv(path, SUMMARY_COLUMNS, [tuple(row[c] for c in SUMMARY_COLUMNS)])
    else:
        raise ValueError(f"unknown export kind {kind!r}; expected loss, gradvar or summary")
    return path


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.export:
        try:
            print(export_plotdata(*args.export))
        except (FileNotFoundError, ValueError) as exc:
            print(f"mozo-lab: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return EXIT_OK
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        grid = build_grid(args)
    except UsageError as exc:
        print(f"mozo-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    if args.list:
        for cell, seed in grid.runs():
            print(f"{cell.name}/seed-{seed}")
        return EXIT_OK
    log.info("running %d runs into %s", len(grid), out)
    return run_grid(grid, out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
