"""
Every command reads an experiment config (--config, else critbranch.toml in
the working directory, else the user config directory), applies --seed,
--threads, --out and --cap, runs one task and appends a record to <out>/records.jsonl.

Exit codes: 0 pass, 1 verdict failure or replay mismatch, 2 config error,
3 task error.
"""

from pathlib import Path
from typing import Optional

import typer

from critbranch.cli import verify
from critbranch.cli.common import CapOption, ConfigOption, OutOption, SeedOption, ThreadsOption, execute
from critbranch.output import Output
from critbranch.records import load_record
from critbranch.runner import replay as replay_record
from critbranch.utils.misc import handle_exceptions

app = typer.Typer(pretty_exceptions_enable=False, no_args_is_help=True)
app.add_typer(verify.app, name="verify", help="Check the limit theorems against solver or Monte Carlo output.")


@app.command()
@handle_exceptions
def spectral(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
):
    """Eigen-triplet of the mean generator and the ergodicity gap."""
    execute("spectral", config, seed, threads, out)


@app.command()
@handle_exceptions
def solve(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
):
    """Survival functional u_t (or V_t) on the configured time grid."""
    execute("solve", config, seed, threads, out)


@app.command()
@handle_exceptions
def simulate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    cap: Optional[int] = CapOption,
):
    """Monte Carlo survival estimate (direct or spine)."""
    execute("simulate", config, seed, threads, out, cap=cap)


@app.command()
@handle_exceptions
def audit(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
):
    """Report on assumptions (H1)-(H5)."""
    execute("audit", config, seed, threads, out)


@app.command()
@handle_exceptions
def run(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    cap: Optional[int] = CapOption,
):
    """Run the task named in the config file."""
    execute(None, config, seed, threads, out, cap=cap)


@app.command()
@handle_exceptions
def replay(
    record: Path = typer.Argument(..., help="records.jsonl (or the directory holding it)"),
    index: int = typer.Option(-1, "--index", "-i", help="Which record in the file"),
    threads: Optional[int] = ThreadsOption,
):
    """Re-run a recorded experiment and demand bit-identical tables."""
    recorded = load_record(record, index)
    replayed = replay_record(recorded, threads=threads)
    Output.success(
        f"Replay of {recorded.task} ({recorded.config_hash[:12]}) matched "
        f"{sum(len(t['rows']) for t in replayed.tables.values())} rows"
    )


if __name__ == "__main__":
    app()
