import json
import math
import pytest
from pathlib import Path
from unittest.mock import patch

from critbranch.config import ConfigFile, config_hash, validate_config
from critbranch.records import RECORDS_FILE, RunRecord, load_record
from critbranch.runner import Runner, replay
from critbranch.utils.exceptions import ConfigurationError, ReplayMismatch

BINARY = {"law": "finite", "probabilities": [0.5, 0.0, 0.5]}


def gw_config(task, **numeric):
    return validate_config(
        {
            "task": task,
            "model": {"kind": "gw", "beta": 1.0, "offspring": BINARY},
            "numeric": {"T": 10.0, "t_grid": [1.0, 5.0, 10.0], **numeric},
            "rng": {"seed": 11},
        }
    )


def stable_config(task, **numeric):
    return validate_config(
        {
            "task": task,
            "model": {"kind": "stable-csbp", "kappa": 1.0, "alpha": 0.5},
            "numeric": {"T": 1e4, **numeric},
        }
    )


def two_type_config(task):
    return validate_config(
        {
            "task": task,
            "model": {
                "kind": "multitype-gw",
                "beta": [1.0, 1.0],
                "offspring": BINARY,
                "displacement": [[0.0, 1.0], [1.0, 0.0]],
            },
            "numeric": {"T": 5.0, "t_grid": [0.5, 1.0, 5.0]},
        }
    )


class TestRunnerInit:
    def test_defaults_from_config(self, tmp_path):
        """Test Runner takes threads and out from the config."""
        config = gw_config("solve")
        config["rng"]["threads"] = 2
        config["io"]["out"] = str(tmp_path)
        runner = Runner(config)
        assert runner.threads == 2
        assert runner.out == tmp_path
        assert runner.seed == 11
        assert runner.model.n == 1

    @patch("critbranch.runner.default_threads", return_value=6)
    @patch("critbranch.runner.default_out_dir", return_value=Path("/fake/data/runs"))
    def test_fallbacks(self, mock_out, mock_threads):
        """Test Runner falls back to the physical core count and the user data directory."""
        runner = Runner(gw_config("solve"))
        assert runner.threads == 6
        assert runner.out == Path("/fake/data/runs")

    def test_explicit_arguments_win(self, tmp_path):
        """Test explicit threads and out override the config."""
        config = gw_config("solve")
        config["rng"]["threads"] = 2
        runner = Runner(config, threads=4, out=tmp_path)
        assert runner.threads == 4
        assert runner.out == tmp_path

    def test_invalid_model(self, tmp_path):
        """Test a model that cannot be built is a configuration error."""
        config = validate_config(
            {"task": "solve", "model": {"kind": "diffusion", "d": 1.0, "offspring": BINARY}}
        )
        with pytest.raises(ConfigurationError):
            Runner(config, out=tmp_path)


class TestTasks:
    def test_spectral(self, tmp_path):
        """Test the spectral task on the symmetric two-type process."""
        tables, verdicts = Runner(two_type_config("spectral"), out=tmp_path).execute()
        assert verdicts == []
        assert tables["triplet"]["columns"] == ["type", "phi", "phi_tilde"]
        assert tables["triplet"]["rows"][0][1:] == pytest.approx([1.0, 0.5])
        eigenvalue, critical, irreducible = tables["eigenvalue"]["rows"][0]
        assert eigenvalue == pytest.approx(0.0, abs=1e-12)
        assert critical and irreducible
        assert [row[0] for row in tables["delta"]["rows"]] == [0.0, 0.5, 1.0, 5.0]

    def test_solve_gw(self, tmp_path):
        """Test binary splitting gives u_t = 1/(1 + t/2)."""
        tables, _ = Runner(gw_config("solve"), out=tmp_path).execute()
        survival = tables["survival"]
        assert survival["columns"] == ["t", "a_t", "u0"]
        for t, a_t, u in survival["rows"]:
            assert u == pytest.approx(1.0 / (1.0 + 0.5 * t), rel=1e-7)
            assert a_t == pytest.approx(u)
        for _, a_t, direct in tables["a_t"]["rows"]:
            assert direct == pytest.approx(a_t, abs=1e-6)

    def test_solve_stable_csbp(self, tmp_path):
        """Test the stable CSBP survival is 1 - exp(-V_t(∞)) with V_t(∞) = (t/2)^{-2}."""
        tables, _ = Runner(stable_config("solve", t_grid=[1.0, 10.0]), out=tmp_path).execute()
        for t, v, p in tables["survival"]["rows"]:
            assert v == pytest.approx((0.5 * t) ** -2.0)
            assert p == pytest.approx(-math.expm1(-v))

    def test_audit(self, tmp_path):
        """Test the audit task reports every assumption."""
        tables, verdicts = Runner(gw_config("audit"), out=tmp_path).execute()
        names = [row[0] for row in tables["assumptions"]["rows"]]
        for name in ("H1", "H2", "H3", "H4", "H5"):
            assert name in names
        assert all(v.passed for v in verdicts)

    def test_verify_kolmogorov_stable(self, tmp_path):
        """Test the Kolmogorov ratio and decay exponent pass for the stable CSBP."""
        tables, verdicts = Runner(stable_config("verify-kolmogorov"), out=tmp_path).execute()
        assert [v.name for v in verdicts] == ["kolmogorov", "decay-exponent"]
        assert all(v.passed for v in verdicts)
        assert verdicts[1].observed == pytest.approx(-2.0, rel=1e-3)
        assert tables["kolmogorov"]["columns"] == ["t", "survival", "asymptote", "ratio"]

    def test_verify_kolmogorov_gw_has_uniform_error(self, tmp_path):
        """Test the finite-type table carries the uniform ratio error."""
        tables, _ = Runner(gw_config("verify-kolmogorov"), out=tmp_path).execute()
        assert tables["kolmogorov"]["columns"][-1] == "uniform_error"

    def test_verify_yaglom_stable(self, tmp_path):
        """Test the small-mass stable profile is exact at every θ."""
        tables, verdicts = Runner(stable_config("verify-yaglom", theta_grid=[0.5, 1.0, 2.0]), out=tmp_path).execute()
        assert len(verdicts) == 4
        assert all(v.passed for v in verdicts)
        for _, _, lf_min, lf_max, target in tables["yaglom"]["rows"]:
            assert lf_min == pytest.approx(target, abs=1e-8)
            assert lf_max == pytest.approx(target, abs=1e-8)

    def test_simulate(self, tmp_path):
        """Test the simulate task records survival, martingale and a verdict."""
        config = gw_config("simulate", n_reps=400, t_grid=[1.0, 2.0], T=2.0)
        tables, verdicts = Runner(config, threads=2, out=tmp_path).execute()
        assert {"survival", "martingale"} <= set(tables)
        assert verdicts[0].name == "phi-martingale"
        assert len(tables["survival"]["rows"]) == 2


class TestRunAndReplay:
    @patch("critbranch.runner.git_describe", return_value="v0-test")
    def test_run_persists(self, mock_git, tmp_path):
        """Test run writes records.jsonl, the CSV tables and the config as run."""
        config = gw_config("solve")
        record = Runner(config, out=tmp_path).run()
        assert record.git_describe == "v0-test"
        assert record.config_hash == config_hash(config)
        assert (tmp_path / RECORDS_FILE).exists()
        assert (tmp_path / "solve-survival.csv").exists()
        assert (tmp_path / "solve-a_t.csv").exists()
        assert ConfigFile(tmp_path / "config.toml").configs["task"] == "solve"
        assert load_record(tmp_path) == RunRecord.from_dict(json.loads(record.to_json()))

    @patch("critbranch.runner.git_describe", return_value="v0-test")
    def test_run_without_saving(self, mock_git, tmp_path):
        """Test run(save=False) leaves the output directory alone."""
        Runner(gw_config("solve"), out=tmp_path / "runs").run(save=False)
        assert not (tmp_path / "runs").exists()

    @patch("critbranch.runner.git_describe", return_value="v0-test")
    def test_replay_across_thread_counts(self, mock_git, tmp_path):
        """Test a Monte Carlo record replays bit for bit with another thread count."""
        config = gw_config("simulate", n_reps=300, t_grid=[1.0, 2.0], T=2.0)
        record = Runner(config, threads=1, out=tmp_path).run()
        replayed = replay(load_record(tmp_path), threads=3)
        assert replayed.tables == record.tables
        assert replayed.config_hash == record.config_hash

    @patch("critbranch.runner.git_describe", return_value="v0-test")
    def test_replay_detects_tampering(self, mock_git, tmp_path):
        """Test an edited table cell fails the replay."""
        record = Runner(gw_config("solve"), out=tmp_path).run(save=False)
        record.tables["survival"]["rows"][0][2] += 1e-15
        with pytest.raises(ReplayMismatch):
            replay(record)
