#!/usr/bin/env python3
import argparse
import logging
import os
import sys

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from fairness_core import ConfigError, FairwatchError
from harness import load_config, run

load_dotenv()
logging.basicConfig(level=logging.INFO, format="%(asctime)s [%(levelname)s] %(message)s")

console = Console(stderr=True)


def default_jobs() -> int:
    value = os.getenv("FAIRWATCH_JOBS", "").strip()
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        logging.warning(f"Ignoring non-integer FAIRWATCH_JOBS={value!r}")
        return 1


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="fairwatch",
        description="Monitor and enforce fairness of coin-toss processes from a flat key = value config.")
    parser.add_argument("--config", required=True, help="experiment config (key = value per line)")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=None, help="overrides the config output path")
    parser.add_argument("--jobs", type=int, default=default_jobs(), help="parallel trial workers (default: $FAIRWATCH_JOBS or 1)")
    parser.add_argument("--quiet", action="store_true", help="no progress bars or summary table")
    return parser.parse_args(argv)


def report_error(error: FairwatchError) -> int:
    message = " ".join(str(error).split())
    print(f"fairwatch: error code={error.code} exit={error.exit_code} message={message}", file=sys.stderr)
    console.print(f"[red]Error:[/] {message}", style="bold")
    logging.error(f"{type(error).__name__}: {message}")
    return error.exit_code


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.quiet:
        logging.getLogger().setLevel(logging.WARNING)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = load_config(args.config, {"seed": args.seed, "out": args.out})
        result = run(config, jobs=args.jobs, progress=not args.quiet)
    except FairwatchError as e:
        return report_error(e)

    if not args.quiet:
        table = Table(title=f"fairwatch {result.kind}")
        table.add_column("Key", style="cyan", no_wrap=True)
        table.add_column("Value", overflow="fold")
        table.add_row("config_hash", result.config_hash)
        for key, value in result.summary.items():
            table.add_row(str(key), str(value))
        console.print(table)
        console.print(f"\n{result.rows} rows written to [green]{result.out}[/green]")
    return 0


if __name__ == '__main__':
    sys.exit(main())
