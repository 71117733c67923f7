import functools
import subprocess
from pathlib import Path
from typing import List

import psutil
import typer

from critbranch.output import Output
from critbranch.utils.exceptions import (
    ConfigurationError,
    CritbranchError,
    ReplayMismatch,
    SubprocessError,
    TaskError,
)

EXIT_PASS = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_TASK = 3


def exit_code(error: Exception) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, ReplayMismatch):
        return EXIT_FAILED
    return EXIT_TASK


def run_subprocess(
    command: List[str],
    check: bool = True,
    **kwargs,
) -> subprocess.CompletedProcess:
    """
    A wrapper around subprocess.run with standardized error handling.
    Args:
        command: The command to execute.
        check: If True, raise SubprocessError on non-zero exit codes.
        **kwargs: Additional arguments to pass to subprocess.run.
    Returns:
        A subprocess.CompletedProcess instance.
    Raises:
        SubprocessError: If the command fails and check is True.
    """
    if kwargs.get("capture_output") and "text" not in kwargs:
        kwargs["text"] = True

    try:
        return subprocess.run(command, check=check, **kwargs)
    except subprocess.CalledProcessError as e:
        raise SubprocessError(
            message=f"Command '{' '.join(str(c) for c in command)}' failed.",
            command=command,
            exit_code=e.returncode,
            stdout=e.stdout or "",
            stderr=e.stderr or "",
        ) from e
    except FileNotFoundError as e:
        raise SubprocessError(
            message=f"Command not found: {command[0]}",
            command=command,
            exit_code=127,
            stdout="",
            stderr=str(e),
        ) from e


def git_describe(cwd: Path | None = None) -> str:
    """``git describe --always --dirty`` of the source tree, or "unknown"."""
    try:
        result = run_subprocess(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            cwd=str(cwd or Path(__file__).resolve().parent),
        )
    except SubprocessError:
        return "unknown"
    return result.stdout.strip() or "unknown"


def default_threads() -> int:
    return psutil.cpu_count(logical=False) or 1


def handle_exceptions(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except typer.Exit:
            raise
        except CritbranchError as e:
            field = getattr(e, "field", None)
            suffix = f" (field: {field})" if field else ""
            Output.error(f"[{e.code}] {e}{suffix}")
            raise typer.Exit(exit_code(e))
        except Exception as e:
            Output.error(f"[{TaskError.code}] {e}")
            raise typer.Exit(EXIT_TASK)

    return wrapper
