#!/usr/bin/env python3
"""
rap-engine CLI

Commands:
- encode: Infer a dataset's schema and persist it as a sidecar
- run: Run a single experiment cell
- grid: Run a full experiment grid from a config file
- future-eval: Run a partial-knowledge (future error) experiment
- drift-tv: Emit the TV distance vs drift curve

Example Usage:
    rap-engine encode adult.csv --output adult.schema.json
    rap-engine run --data adult.csv --epsilon 1 --workload-size 64 -T 4 -K 16
    rap-engine run --config config-templates/experiment.yaml --mechanism gm --epsilon 0.5
    rap-engine grid --config config-templates/experiment.yaml --epsilons 0.1,1 --workers 4
    rap-engine future-eval --config exp.yaml --distribution geometric --gammas 0,0.1,0.5
    rap-engine drift-tv --d 14 --distribution geometric --output tv.csv
"""

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from rap_engine.config import get_settings
from rap_engine.engine.dataset import load_dataset
from rap_engine.engine.generalization import drift_tv_curve, make_distribution
from rap_engine.exceptions import ConfigurationError, RapEngineError
from rap_engine.harness.progress import PROGRESS_COLUMNS
from rap_engine.harness.results import CsvAppender, ResultWriter
from rap_engine.harness.runner import (
    expand_grid,
    load_experiment_dataset,
    mean_errors_by_mechanism,
    query_throughput,
    run_cell,
    run_grid,
    summarize_grid,
    trial_dump_dir,
)
from rap_engine.storage.artifacts import (
    ArtifactStore,
    build_experiment_config,
    load_experiment_config,
    load_schema,
    load_workload,
    merge_overrides,
    save_schema,
)
from rap_engine.utils.log_config import configure_logging
from rap_engine.utils.types import (
    ALL,
    CellConfig,
    DistributionKind,
    DistributionSpec,
    ExperimentConfig,
    MechanismName,
    PerRoundK,
    ResultRow,
    SelectionMode,
)

console = Console()
logger = structlog.get_logger()


def parse_k(value: str) -> PerRoundK:
    if value.upper() == ALL:
        return ALL
    try:
        return int(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"K must be an integer or ALL, got {value!r}") from e


def parse_float_list(value: str) -> list[float]:
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {value!r}") from e


def parse_int_list(value: str) -> list[int]:
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {value!r}") from e


def parse_k_list(value: str) -> list[PerRoundK]:
    return [parse_k(item.strip()) for item in value.split(",") if item.strip()]


def _distribution(args: argparse.Namespace) -> Optional[DistributionSpec]:
    if not getattr(args, "distribution", None):
        return None
    return DistributionSpec(kind=DistributionKind(args.distribution), zipf_s=args.zipf_s, geometric_p=args.geometric_p)


def _results_table(rows: Sequence[ResultRow], title: str) -> Table:
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("Mechanism", style="cyan", no_wrap=True)
    table.add_column("ε", justify="right")
    table.add_column("|W|", justify="right")
    table.add_column("T", justify="right")
    table.add_column("K", justify="right")
    table.add_column("Trial", justify="right")
    table.add_column("err_P", justify="right")
    table.add_column("err_F", justify="right")
    table.add_column("ms", justify="right")

    for row in rows:
        if row.error:
            table.add_row(row.mechanism, f"{row.epsilon:g}", str(row.workload_size), "", "", str(row.trial), f"[red]{row.error}[/red]", "", "")
            continue
        table.add_row(
            row.mechanism,
            f"{row.epsilon:g}",
            str(row.workload_size),
            str(row.rounds_T or ""),
            row.per_round_K or "",
            str(row.trial),
            f"{row.err_present:.4f}",
            f"{row.err_future:.4f} ± {row.err_future_halfwidth:.4f}" if row.err_future is not None else "",
            f"{row.runtime_ms:.0f}",
        )
    return table


def cmd_encode(args: argparse.Namespace) -> int:
    """
    Infer a schema from a delimited file and write it as JSON.

    Args:
        args: Command-line arguments

    Returns:
        Exit code (0 for success)
    """
    dataset = load_dataset(args.data, delimiter=args.delimiter)
    output = Path(args.output) if args.output else Path(args.data).with_suffix(".schema.json")
    save_schema(dataset.schema, output)

    table = Table(title="Inferred Schema", show_header=True, header_style="bold cyan")
    table.add_column("#", justify="right")
    table.add_column("Feature", style="cyan")
    table.add_column("Categories", justify="right")
    for j, feature in enumerate(dataset.schema.features):
        table.add_row(str(j), feature.name, str(feature.cardinality))
    console.print(table)
    console.print(
        Panel(
            f"[green]✅ n={dataset.n}, d={dataset.schema.d}, d'={dataset.schema.d_prime}[/green]\n"
            f"[dim]Schema written to {output}[/dim]",
            title="📋 Encode",
            border_style="green",
        )
    )
    return 0


def _print_throughput(cell: CellConfig, dump_dir: Path) -> None:
    for trial in range(cell.trials):
        store = ArtifactStore(trial_dump_dir(dump_dir, cell, trial))
        if not store.synthetic_path.exists():
            continue
        rate = query_throughput(store.load_synthetic(), load_workload(store.workload_path), cell.batch_cap)
        console.print(f"  [cyan]trial {trial}[/cyan]: {rate:,.0f} queries/s")


def cmd_run(args: argparse.Namespace) -> int:
    """Run one experiment cell."""
    config = _run_config(args)
    dataset = load_experiment_dataset(config)
    cells = expand_grid(config, dataset.name)
    if len(cells) != 1:
        raise ConfigurationError("run needs exactly one cell; use grid for sweeps", {"cells": len(cells)})
    cell = cells[0]

    if args.throughput and not (cell.mechanism == MechanismName.RAP and args.dump_dir):
        raise ConfigurationError("--throughput needs --dump-dir and the rap mechanism")

    progress_rows: list[dict] = []
    rows = run_cell(cell, dataset, progress_rows=progress_rows, dump_dir=args.dump_dir)
    ResultWriter(config.results_path).write(rows)
    if config.progress_path:
        CsvAppender(config.progress_path, PROGRESS_COLUMNS).append(progress_rows)

    console.print(_results_table(rows, f"Cell: {cell.mechanism.value} on {dataset.name}"))
    if args.throughput:
        _print_throughput(cell, Path(args.dump_dir))
    console.print(f"\n[dim]Results appended to {config.results_path}[/dim]\n")
    return 1 if any(row.error for row in rows) else 0


def _optimizer_overrides(args: argparse.Namespace) -> dict:
    return {
        "learning_rate": args.learning_rate,
        "max_iterations": args.max_iterations,
        "stop_tolerance": args.stop_tolerance,
        "patience": args.patience,
        "moment_decay_1": args.beta1,
        "moment_decay_2": args.beta2,
        "epsilon_stabilizer": args.epsilon_stabilizer,
    }


def _shared_overrides(args: argparse.Namespace) -> dict:
    return {
        "r": args.r,
        "k": args.k,
        "n_prime": args.n_prime,
        "optimizer": _optimizer_overrides(args),
        "selection": args.selection,
        "batch_cap": args.batch_cap,
        "filter_large": True if args.filter_large else None,
        "trials": args.trials,
        "root_seed": args.seed,
        "progress_path": args.progress,
        "log_progress": True if args.progress else None,
    }


def _run_config(args: argparse.Namespace) -> ExperimentConfig:
    """Experiment config for one cell; flags win over --config values."""
    distribution = _distribution(args)
    overrides = {
        **_shared_overrides(args),
        "dataset_path": args.data,
        "schema_path": args.schema,
        "delimiter": args.delimiter,
        "mechanisms": [args.mechanism] if args.mechanism else None,
        "epsilons": [args.epsilon] if args.epsilon is not None else None,
        "delta_mode": "explicit" if args.delta is not None else None,
        "delta": args.delta,
        "workload_sizes": [args.workload_size] if args.workload_size is not None else None,
        "rounds": [args.rounds] if args.rounds is not None else None,
        "per_round_k": [args.per_round_k] if args.per_round_k is not None else None,
        "distribution": distribution.model_dump() if distribution is not None else None,
        "gammas": [args.gamma] if args.gamma is not None else None,
        "num_future": args.num_future,
        "results_path": args.output,
    }
    if args.config:
        return load_experiment_config(args.config, overrides)

    settings = get_settings()
    defaults = {
        "n_prime": settings.DEFAULT_N_PRIME,
        "trials": settings.DEFAULT_TRIALS,
        "batch_cap": settings.BATCH_CAP,
        "results_path": str(Path(settings.RESULTS_DIR) / "results.csv"),
    }
    return build_experiment_config(merge_overrides(defaults, overrides))


def _grid_overrides(args: argparse.Namespace) -> dict:
    return {
        **_shared_overrides(args),
        "epsilons": args.epsilons,
        "workload_sizes": args.workload_sizes,
        "rounds": args.rounds,
        "per_round_k": args.per_round_k,
        "mechanisms": args.mechanisms,
        "results_path": args.output,
        "workers": args.workers,
    }


def cmd_grid(args: argparse.Namespace) -> int:
    """Run every cell of an experiment grid."""
    config = load_experiment_config(args.config, _grid_overrides(args))
    rows = list(run_grid(config, writer=ResultWriter(config.results_path)))

    summary = summarize_grid(rows)
    if summary:
        table = Table(title="Best (T, K) by mean present error", show_header=True, header_style="bold cyan")
        for column in ("ε", "|W|", "T", "K", "mean err_P", "trials"):
            table.add_column(column, justify="right")
        for entry in summary:
            table.add_row(
                f"{entry['epsilon']:g}",
                str(entry["workload_size"]),
                str(entry["rounds_T"]),
                entry["per_round_K"],
                f"{entry['mean_err_present']:.4f}",
                str(entry["trials"]),
            )
        console.print(table)

    for mechanism, error in mean_errors_by_mechanism(rows).items():
        console.print(f"  [cyan]{mechanism}[/cyan]: mean err_P = {error:.4f}")
    failed = sum(1 for row in rows if row.error)
    console.print(f"\n[bold]Summary:[/bold] {len(rows)} rows, {failed} failed → {config.results_path}\n")
    return 1 if failed else 0


def cmd_future_eval(args: argparse.Namespace) -> int:
    """Run a partial-knowledge experiment and report future error."""
    distribution = _distribution(args)
    overrides = {
        **_grid_overrides(args),
        "distribution": distribution.model_dump() if distribution is not None else None,
        "gammas": args.gammas,
        "num_future": args.num_future,
    }

    config = load_experiment_config(args.config, overrides)
    if config.distribution is None:
        raise ConfigurationError("future-eval needs a feature distribution (config key or --distribution)")
    rows = list(run_grid(config, writer=ResultWriter(config.results_path)))

    frame = pd.DataFrame([row.model_dump() for row in rows if row.error is None and row.err_future is not None])
    if not frame.empty:
        means = frame.groupby(["mechanism", "gamma"], as_index=False)["err_future"].mean()
        table = Table(title=f"Future error ({config.distribution.label()})", show_header=True, header_style="bold cyan")
        table.add_column("Mechanism", style="cyan")
        table.add_column("γ", justify="right")
        table.add_column("mean err_F", justify="right")
        for record in means.to_dict(orient="records"):
            table.add_row(record["mechanism"], f"{record['gamma']:g}", f"{record['err_future']:.4f}")
        console.print(table)

    failed = sum(1 for row in rows if row.error)
    console.print(f"\n[bold]Summary:[/bold] {len(rows)} rows, {failed} failed → {config.results_path}\n")
    return 1 if failed else 0


def cmd_drift_tv(args: argparse.Namespace) -> int:
    """Emit mean TV distance between historical and drifted distributions per γ."""
    if args.d is not None:
        d = args.d
    elif args.schema:
        d = load_schema(args.schema).d
    else:
        raise ConfigurationError("drift-tv needs --d or --schema")

    spec = _distribution(args) or DistributionSpec(kind=DistributionKind.GEOMETRIC)
    rows = drift_tv_curve(make_distribution(spec, d), args.gammas, args.trials, np.random.default_rng(args.seed))

    table = Table(title=f"TV distance vs drift ({spec.label()}, d={d})", show_header=True, header_style="bold cyan")
    table.add_column("γ", justify="right")
    table.add_column("mean TV", justify="right")
    table.add_column("± 95%", justify="right")
    for row in rows:
        table.add_row(f"{row['gamma']:g}", f"{row['mean_tv']:.4f}", f"{row['halfwidth']:.4f}")
    console.print(table)

    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows).to_csv(args.output, index=False)
        console.print(f"\n[dim]Curve written to {args.output}[/dim]\n")
    return 0


def _add_distribution_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--distribution", choices=[kind.value for kind in DistributionKind], help="Feature distribution")
    parser.add_argument("--zipf-s", type=float, default=1.0, help="Zipf exponent")
    parser.add_argument("--geometric-p", type=float, default=0.5, help="Geometric success probability")


def _add_shared_args(parser: argparse.ArgumentParser) -> None:
    """Flags that map onto experiment config keys; unset flags keep config values."""
    parser.add_argument("--r", type=int, help="Matches required")
    parser.add_argument("--k", type=int, help="Features per threshold")
    parser.add_argument("--selection", choices=[s.value for s in SelectionMode])
    parser.add_argument("--n-prime", type=int, help="Synthetic rows")
    parser.add_argument("--batch-cap", type=int, help="Largest answer buffer, in queries")
    parser.add_argument("--filter-large", action="store_true", help="Sample only thresholds with at most n queries")
    parser.add_argument("--trials", type=int, help="Trials per cell")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--output", help="Results CSV (overrides results_path)")
    parser.add_argument("--progress", help="Per-iteration progress CSV (overrides progress_path)")

    optimizer = parser.add_argument_group("optimizer")
    optimizer.add_argument("--learning-rate", type=float)
    optimizer.add_argument("--max-iterations", type=int)
    optimizer.add_argument("--stop-tolerance", type=float, help="Loss improvement counted as progress")
    optimizer.add_argument("--patience", type=int, help="Iterations without progress before stopping")
    optimizer.add_argument("--beta1", type=float, help="First moment decay")
    optimizer.add_argument("--beta2", type=float, help="Second moment decay")
    optimizer.add_argument("--epsilon-stabilizer", type=float, help="Adam denominator constant")


def _add_grid_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="YAML or JSON experiment config")
    parser.add_argument("--epsilons", type=parse_float_list, help="Comma-separated privacy parameters")
    parser.add_argument("--workload-sizes", type=parse_int_list, help="Comma-separated workload sizes")
    parser.add_argument("--rounds", "-T", type=parse_int_list, help="Comma-separated adaptive round counts")
    parser.add_argument("--per-round-k", "-K", type=parse_k_list, help="Comma-separated queries per round, or ALL")
    parser.add_argument("--mechanisms", type=lambda value: value.split(","), help="Comma-separated mechanisms")
    parser.add_argument("--workers", type=int, help="Cells run in parallel")
    _add_shared_args(parser)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="rap-engine",
        description="Differentially private answers to r-of-k threshold workloads",
    )
    parser.add_argument("--version", action="version", version=f"rap-engine {settings.APP_VERSION}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # encode command
    encode_parser = subparsers.add_parser("encode", help="Infer and persist a dataset schema")
    encode_parser.add_argument("data", help="Delimited dataset file")
    encode_parser.add_argument("--delimiter", default=",", help="Field separator")
    encode_parser.add_argument("--output", "-o", help="Schema JSON path (default: <data>.schema.json)")
    encode_parser.set_defaults(func=cmd_encode)

    # run command
    run_parser = subparsers.add_parser("run", help="Run a single experiment cell")
    run_parser.add_argument("--config", help="Experiment config supplying defaults; flags override it")
    run_parser.add_argument("--data", help="Delimited dataset file (overrides dataset_path)")
    run_parser.add_argument("--schema", help="Schema JSON sidecar")
    run_parser.add_argument("--delimiter", help="Field separator")
    run_parser.add_argument("--mechanism", choices=[m.value for m in MechanismName])
    run_parser.add_argument("--epsilon", type=float, help="Privacy parameter ε")
    run_parser.add_argument("--delta", type=float, help="Privacy parameter δ (default 1/n²)")
    run_parser.add_argument("--workload-size", type=int, help="Thresholds in the workload")
    run_parser.add_argument("--rounds", "-T", type=int, help="Adaptive rounds")
    run_parser.add_argument("--per-round-k", "-K", type=parse_k, help="Queries per round, or ALL")
    run_parser.add_argument("--gamma", type=float, help="Drift between historical and future features")
    run_parser.add_argument("--num-future", type=int, help="Future thresholds sampled")
    _add_shared_args(run_parser)
    run_parser.add_argument("--dump-dir", help="Directory for synthetic dataset dumps")
    run_parser.add_argument("--throughput", action="store_true", help="Report surrogate evaluation speed per dumped trial")
    _add_distribution_args(run_parser)
    run_parser.set_defaults(func=cmd_run)

    # grid command
    grid_parser = subparsers.add_parser("grid", help="Run a full experiment grid")
    _add_grid_args(grid_parser)
    grid_parser.set_defaults(func=cmd_grid)

    # future-eval command
    future_parser = subparsers.add_parser("future-eval", help="Run a partial-knowledge experiment")
    _add_grid_args(future_parser)
    _add_distribution_args(future_parser)
    future_parser.add_argument("--gammas", type=parse_float_list, help="Comma-separated drift values")
    future_parser.add_argument("--num-future", type=int, help="Future thresholds sampled")
    future_parser.set_defaults(func=cmd_future_eval)

    # drift-tv command
    tv_parser = subparsers.add_parser("drift-tv", help="Emit the TV distance vs drift curve")
    tv_parser.add_argument("--d", type=int, help="Number of features")
    tv_parser.add_argument("--schema", help="Schema JSON sidecar (sets d)")
    tv_parser.add_argument("--gammas", type=parse_float_list, default=[0.0, 0.05, 0.1, 0.2, 0.5, 1.0])
    tv_parser.add_argument("--trials", type=int, default=100)
    tv_parser.add_argument("--seed", type=int, default=0)
    tv_parser.add_argument("--output", "-o", help="CSV path (gamma, mean_tv, halfwidth, trials)")
    _add_distribution_args(tv_parser)
    tv_parser.set_defaults(func=cmd_drift_tv)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    settings = get_settings()
    configure_logging("DEBUG" if args.verbose else settings.LOG_LEVEL, settings.LOG_FORMAT)

    if not args.command:
        parser.print_help()
        console.print(
            "\n[bold cyan]Quick Start:[/bold cyan]\n"
            "  1. [cyan]rap-engine encode data.csv[/cyan]                 # Persist a schema\n"
            "  2. [cyan]rap-engine run --data data.csv --epsilon 1 --workload-size 16[/cyan]\n"
            "  3. [cyan]rap-engine grid --config experiment.yaml[/cyan]   # Full grid\n"
        )
        return 1

    try:
        return args.func(args)
    except KeyboardInterrupt:
        console.print("\n\n[yellow]⚠️  Operation cancelled by user[/yellow]\n")
        return 130
    except RapEngineError as e:
        console.print(f"\n[red]✗ Error:[/red] {e}\n")
        return 1
    except Exception as e:
        console.print(f"\n[red]✗ Error:[/red] {e}\n")
        if args.verbose:
            import traceback

            console.print("[dim]" + traceback.format_exc() + "[/dim]")
        return 1


if __name__ == "__main__":
    sys.exit(main())
