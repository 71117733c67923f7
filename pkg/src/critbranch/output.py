from typing import Sequence

import typer
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table


class Output:
    @staticmethod
    def success(message: str):
        typer.secho(f"✔ {message}", fg=typer.colors.GREEN, bold=True)

    @staticmethod
    def info(message: str):
        typer.secho(f"ℹ {message}", fg=typer.colors.BLUE)

    @staticmethod
    def warning(message: str):
        typer.secho(f"⚠ {message}", fg=typer.colors.YELLOW)

    @staticmethod
    def error(message: str):
        typer.secho(f"✖ {message}", fg=typer.colors.RED, err=True)

    @staticmethod
    def table(title: str, columns: Sequence[str], rows: Sequence[Sequence]):
        table = Table(title=title)
        for column in columns:
            table.add_column(str(column))
        for row in rows:
            table.add_row(*[_format_cell(cell) for cell in row])
        Console().print(table)

    @staticmethod
    def progress() -> Progress:
        return Progress(
            SpinnerColumn("dots"),
            TextColumn("[bold blue]{task.description}"),
            transient=True,
        )


def _format_cell(cell) -> str:
    if isinstance(cell, bool):
        return "[green]pass[/green]" if cell else "[red]FAIL[/red]"
    if isinstance(cell, float):
        return f"{cell:.6g}"
    return str(cell)
