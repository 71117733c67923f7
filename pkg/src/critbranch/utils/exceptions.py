class CritbranchError(Exception):
    code = "ERROR"


class ConfigurationError(CritbranchError):
    code = "CONFIG_ERROR"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TaskError(CritbranchError):
    """Base for errors raised by the numerical modules while a task runs."""

    code = "TASK_ERROR"


class DomainError(TaskError, ValueError):
    code = "DOMAIN_ERROR"


class NonConvergence(TaskError):
    code = "NON_CONVERGENCE"


class QuadratureError(TaskError):
    code = "QUADRATURE_ERROR"


class FitError(TaskError):
    code = "FIT_ERROR"


class DegenerateFit(FitError):
    code = "DEGENERATE_FIT"


class Diverges(TaskError):
    code = "DIVERGES"


class NotIrreducible(TaskError):
    code = "NOT_IRREDUCIBLE"


class NotCritical(TaskError):
    code = "NOT_CRITICAL"

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class StepSizeError(TaskError):
    code = "STEP_SIZE_ERROR"


class SingularStart(TaskError):
    code = "SINGULAR_START"


class DivisionByNegligible(TaskError):
    code = "DIVISION_BY_NEGLIGIBLE"


class PopulationExplosion(TaskError):
    code = "POPULATION_EXPLOSION"


class InsufficientReplicas(TaskError):
    code = "INSUFFICIENT_REPLICAS"


class ReplayMismatch(CritbranchError):
    code = "REPLAY_MISMATCH"

    def __init__(self, table, row, column, recorded, replayed):
        super().__init__(
            f"Replay differs in table '{table}' at row {row}, column '{column}': "
            f"recorded {recorded!r}, replayed {replayed!r}"
        )
        self.table = table
        self.row = row
        self.column = column
        self.recorded = recorded
        self.replayed = replayed


class SubprocessError(CritbranchError):
    code = "SUBPROCESS_ERROR"

    def __init__(self, message, command, exit_code, stdout, stderr):
        super().__init__(message)
        self.command = command
        self.exit_code = exit_code
        self.stdout = stdout
        self.stderr = stderr

    def __str__(self):
        return f"""{super().__str__()}
  Command: {" ".join(str(c) for c in self.command)}
  Exit Code: {self.exit_code}
  Stdout: {self.stdout}
  Stderr: {self.stderr}"""
