import pytest
import typer
from unittest.mock import MagicMock, patch
from typer.testing import CliRunner

from critbranch.cli.common import construct_runner
from critbranch.cli.main import app
from critbranch.records import RECORDS_FILE, load_records
from critbranch.utils.exceptions import ConfigurationError, DomainError, ReplayMismatch, SubprocessError
from critbranch.utils.misc import (
    EXIT_CONFIG,
    EXIT_FAILED,
    EXIT_PASS,
    EXIT_TASK,
    default_threads,
    exit_code,
    git_describe,
    handle_exceptions,
    run_subprocess,
)

runner = CliRunner()

STABLE_TOML = """
task = "verify-yaglom"

[model]
kind = "stable-csbp"
kappa = 1.0
alpha = 0.5

[numeric]
T = 100.0
t_grid = [1.0, 10.0, 100.0]
theta_grid = [0.5, 1.0, 2.0]
"""

GW_TOML = """
task = "solve"

[model]
kind = "gw"
beta = {beta}

[model.offspring]
law = "finite"
probabilities = [0.5, 0.0, 0.5]

[numeric]
T = 4.0
t_grid = [1.0, 2.0, 4.0]
n_reps = 200
"""


@pytest.fixture
def stable_file(tmp_path):
    path = tmp_path / "stable.toml"
    path.write_text(STABLE_TOML)
    return path


@pytest.fixture
def gw_file(tmp_path):
    path = tmp_path / "gw.toml"
    path.write_text(GW_TOML.format(beta=1.0))
    return path


@pytest.fixture(autouse=True)
def no_git():
    with patch("critbranch.runner.git_describe", return_value="v0-test"):
        yield


class TestExitCode:
    def test_mapping(self):
        """Test exit_code maps each error family to its code."""
        assert exit_code(DomainError("x")) == EXIT_TASK
        assert exit_code(ReplayMismatch("t", 0, "c", 1.0, 2.0)) == EXIT_FAILED
        assert exit_code(RuntimeError("x")) == EXIT_TASK


class TestHelp:
    def test_top_level_help(self):
        """Test --help lists every command and the verify group."""
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == EXIT_PASS, result.output
        for command in ("spectral", "solve", "simulate", "audit", "run", "replay", "verify"):
            assert command in result.output

    def test_verify_help(self):
        """Test verify --help lists kolmogorov and yaglom."""
        result = runner.invoke(app, ["verify", "--help"])
        assert result.exit_code == EXIT_PASS, result.output
        assert "kolmogorov" in result.output
        assert "yaglom" in result.output

    @pytest.mark.parametrize("command", ["kolmogorov", "yaglom"])
    def test_verify_commands_take_cap(self, command):
        """Test the verify commands accept --cap."""
        result = runner.invoke(app, ["verify", command, "--help"])
        assert result.exit_code == EXIT_PASS, result.output
        assert "--cap" in result.output


class TestConstructRunner:
    def test_task_override(self, gw_file, tmp_path):
        """Test construct_runner replaces the task named in the file."""
        built = construct_runner("spectral", gw_file, seed=4, threads=1, out=tmp_path)
        assert built.task == "spectral"
        assert built.seed == 4
        assert built.out == tmp_path


class TestCommands:
    def test_solve(self, gw_file, tmp_path):
        """Test solve exits 0 and writes its record."""
        out = tmp_path / "runs"
        result = runner.invoke(app, ["solve", "--config", str(gw_file), "--out", str(out)])
        assert result.exit_code == EXIT_PASS, result.output
        assert "solve finished" in result.output
        assert load_records(out)[0].task == "solve"
        assert (out / "solve-survival.csv").exists()

    def test_run_uses_file_task(self, stable_file, tmp_path):
        """Test run executes the task named in the config."""
        result = runner.invoke(app, ["run", "-c", str(stable_file), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_PASS, result.output
        assert load_records(tmp_path)[0].task == "verify-yaglom"

    def test_spectral_and_audit(self, gw_file, tmp_path):
        """Test spectral and audit exit 0 on a critical process."""
        for command in ("spectral", "audit"):
            result = runner.invoke(app, [command, "-c", str(gw_file), "--out", str(tmp_path)])
            assert result.exit_code == EXIT_PASS, result.output
        assert [r.task for r in load_records(tmp_path)] == ["spectral", "audit"]

    def test_simulate_seed_from_environment(self, gw_file, tmp_path):
        """Test CRITBRANCH_SEED reaches the record."""
        result = runner.invoke(
            app,
            ["simulate", "-c", str(gw_file), "--out", str(tmp_path), "--threads", "2"],
            env={"CRITBRANCH_SEED": "123"},
        )
        assert result.exit_code == EXIT_PASS, result.output
        record = load_records(tmp_path)[0]
        assert record.config["rng"]["seed"] == 123
        assert record.config["rng"]["threads"] == 2

    def test_cap_flag(self, gw_file, tmp_path):
        """Test --cap overrides numeric.cap."""
        result = runner.invoke(app, ["simulate", "-c", str(gw_file), "--out", str(tmp_path), "--cap", "5000"])
        assert result.exit_code == EXIT_PASS, result.output
        assert load_records(tmp_path)[0].config["numeric"]["cap"] == 5000

    def test_config_from_environment(self, gw_file, tmp_path):
        """Test CRITBRANCH_CONFIG stands in for --config."""
        result = runner.invoke(app, ["solve", "--out", str(tmp_path)], env={"CRITBRANCH_CONFIG": str(gw_file)})
        assert result.exit_code == EXIT_PASS, result.output


class TestVerifyCommands:
    def test_yaglom_passes(self, stable_file, tmp_path):
        """Test verify yaglom exits 0 when every verdict passes."""
        result = runner.invoke(app, ["verify", "yaglom", "-c", str(stable_file), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_PASS, result.output
        assert load_records(tmp_path)[0].passed

    def test_failing_verdict_exits_one(self, stable_file, tmp_path):
        """Test a failing verdict exits 1 and is still recorded."""
        with patch("critbranch.runner.models.tail_index", return_value=0.9):
            result = runner.invoke(app, ["verify", "yaglom", "-c", str(stable_file), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_FAILED, result.output
        assert not load_records(tmp_path)[0].passed

    def test_source_override(self, stable_file, tmp_path):
        """Test --source monte_carlo on a superprocess is a config error."""
        result = runner.invoke(
            app, ["verify", "kolmogorov", "-c", str(stable_file), "--out", str(tmp_path), "--source", "monte_carlo"]
        )
        assert result.exit_code == EXIT_CONFIG
        assert "model.kind" in result.output


class TestErrors:
    def test_negative_beta_exits_two(self, tmp_path):
        """Test an invalid parameter exits 2 and names its field."""
        path = tmp_path / "bad.toml"
        path.write_text(GW_TOML.format(beta=-1.0))
        result = runner.invoke(app, ["solve", "-c", str(path), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_CONFIG
        assert "model.beta" in result.output
        assert not (tmp_path / RECORDS_FILE).exists()

    def test_missing_config_exits_two(self, tmp_path):
        """Test a missing config file exits 2."""
        result = runner.invoke(app, ["solve", "-c", str(tmp_path / "absent.toml")])
        assert result.exit_code == EXIT_CONFIG

    @patch("critbranch.runner.evolution.solve_u", side_effect=DomainError("t_max must be positive"))
    def test_task_error_exits_three(self, mock_solve, gw_file, tmp_path):
        """Test a numerical error during the task exits 3."""
        result = runner.invoke(app, ["solve", "-c", str(gw_file), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_TASK
        assert "DOMAIN_ERROR" in result.output

    @patch("critbranch.runner.Runner.execute", side_effect=RuntimeError("boom"))
    def test_unexpected_error_exits_three(self, mock_execute, gw_file, tmp_path):
        """Test an unexpected exception exits 3."""
        result = runner.invoke(app, ["solve", "-c", str(gw_file), "--out", str(tmp_path)])
        assert result.exit_code == EXIT_TASK


class TestReplayCommand:
    def test_replay_matches(self, gw_file, tmp_path):
        """Test replay of a Monte Carlo record with another thread count exits 0."""
        runner.invoke(app, ["simulate", "-c", str(gw_file), "--out", str(tmp_path), "--seed", "9", "--threads", "1"])
        result = runner.invoke(app, ["replay", str(tmp_path), "--threads", "3"])
        assert result.exit_code == EXIT_PASS, result.output
        assert "matched" in result.output

    def test_replay_mismatch_exits_one(self, gw_file, tmp_path):
        """Test a tampered record exits 1."""
        runner.invoke(app, ["solve", "-c", str(gw_file), "--out", str(tmp_path)])
        path = tmp_path / RECORDS_FILE
        text = path.read_text()
        record = load_records(path)[0]
        cell = record.tables["survival"]["rows"][-1][-1]
        path.write_text(text.replace(repr(cell), repr(cell * (1.0 + 1e-12)), 1))
        result = runner.invoke(app, ["replay", str(path)])
        assert result.exit_code == EXIT_FAILED
        assert "REPLAY_MISMATCH" in result.output

    def test_replay_missing_file(self, tmp_path):
        """Test replay of a missing record file exits 2."""
        result = runner.invoke(app, ["replay", str(tmp_path / "nowhere.jsonl")])
        assert result.exit_code == EXIT_CONFIG


class TestMisc:
    def test_run_subprocess_missing_command(self):
        """Test run_subprocess with a command that does not exist."""
        with pytest.raises(SubprocessError) as excinfo:
            run_subprocess(["critbranch-no-such-command"])
        assert excinfo.value.exit_code == 127

    @patch("critbranch.utils.misc.run_subprocess")
    def test_git_describe(self, mock_run):
        """Test git_describe strips the describe output."""
        mock_run.return_value = MagicMock(stdout="v0.1.0-3-gabc123-dirty\n")
        assert git_describe() == "v0.1.0-3-gabc123-dirty"

    @patch("critbranch.utils.misc.run_subprocess")
    def test_git_describe_outside_repository(self, mock_run):
        """Test git_describe falls back to unknown."""
        mock_run.side_effect = SubprocessError("failed", ["git"], 128, "", "not a git repository")
        assert git_describe() == "unknown"

    @patch("critbranch.utils.misc.psutil.cpu_count", return_value=None)
    def test_default_threads_fallback(self, mock_count):
        """Test default_threads when psutil cannot count cores."""
        assert default_threads() == 1

    def test_handle_exceptions_names_field(self):
        """Test handle_exceptions prints the field and exits 2."""

        @handle_exceptions
        def broken():
            raise ConfigurationError("bad value", field="numeric.dt")

        with patch("critbranch.utils.misc.Output.error") as mock_error:
            with pytest.raises(typer.Exit) as excinfo:
                broken()
        assert excinfo.value.exit_code == EXIT_CONFIG
        mock_error.assert_called_once_with("[CONFIG_ERROR] bad value (field: numeric.dt)")
