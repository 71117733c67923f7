from pathlib import Path
from typing import Optional

import typer
from typing_extensions import Annotated

from critbranch.cli.common import CapOption, ConfigOption, OutOption, SeedOption, ThreadsOption, execute
from critbranch.utils.misc import handle_exceptions

app = typer.Typer(pretty_exceptions_enable=False, no_args_is_help=True)

Source = Annotated[
    Optional[str],
    typer.Option("--source", help="deterministic or monte_carlo; overrides numeric.source"),
]


@app.command()
@handle_exceptions
def kolmogorov(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    source: Source = None,
    cap: Optional[int] = CapOption,
):
    """Survival probability against <φ, μ> t^{-1/α} ℓ̃(t)."""
    execute("verify-kolmogorov", config, seed, threads, out, source, cap)


@app.command()
@handle_exceptions
def yaglom(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    source: Source = None,
    cap: Optional[int] = CapOption,
):
    """Conditional Laplace functional against 1 - θ'/(1 + θ'^α)^{1/α}."""
    execute("verify-yaglom", config, seed, threads, out, source, cap)


if __name__ == "__main__":
    app()
