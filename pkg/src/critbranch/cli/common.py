from pathlib import Path
from typing import Optional

import typer

from critbranch.config import load_config
from critbranch.output import Output
from critbranch.records import RunRecord
from critbranch.runner import Runner
from critbranch.utils.misc import EXIT_FAILED
from critbranch.verify import Verdict, summarize

ConfigOption = typer.Option(None, "--config", "-c", envvar="CRITBRANCH_CONFIG", help="Experiment TOML file")
SeedOption = typer.Option(None, "--seed", envvar="CRITBRANCH_SEED", min=0, help="Master seed (u64)")
ThreadsOption = typer.Option(None, "--threads", envvar="CRITBRANCH_THREADS", min=1, help="Worker threads")
OutOption = typer.Option(None, "--out", envvar="CRITBRANCH_OUT", help="Output directory")
CapOption = typer.Option(None, "--cap", envvar="CRITBRANCH_CAP", min=1, help="Population cap per Monte Carlo replica")


def construct_runner(
    task: Optional[str],
    config: Optional[Path],
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[Path] = None,
    source: Optional[str] = None,
    cap: Optional[int] = None,
) -> Runner:
    return Runner(load_config(config, task=task, seed=seed, threads=threads, out=out, source=source, cap=cap))


def report(record: RunRecord, out: Optional[Path] = None) -> None:
    """Print the verdict table; a failing verify task exits with 1."""
    if record.verdicts:
        summarize([Verdict.from_dict(v) for v in record.verdicts], title=f"{record.task} verdicts")
    for name, table in record.tables.items():
        Output.info(f"{name}: {len(table['rows'])} rows")
    if out is not None:
        Output.info(f"Record {record.config_hash[:12]} written to {out}")
    if record.task.startswith("verify") and not record.passed:
        Output.error(f"{record.task} failed")
        raise typer.Exit(EXIT_FAILED)
    Output.success(f"{record.task} finished")


def execute(
    task: Optional[str], config, seed, threads, out, source: Optional[str] = None, cap: Optional[int] = None
) -> RunRecord:
    runner = construct_runner(task, config, seed, threads, out, source, cap)
    record = runner.run()
    report(record, runner.out)
    return record
