"""
Runner executes one experiment config and returns a RunRecord:

<out>/
├── records.jsonl                # one RunRecord per line, append-only
├── config.toml                  # last validated config, as run
└── {task}-{table}.csv           # result tables, trailing "# config_hash=..."
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from critbranch import evolution, models, montecarlo, spectral, verify
from critbranch.config import ConfigFile, ExperimentConfig, build_model, config_hash, default_out_dir
from critbranch.evolution import Trajectory, TrajectoryKind
from critbranch.output import Output
from critbranch.records import RunRecord, compare_tables, make_table, persist, utc_now
from critbranch.regvar import survival_asymptote
from critbranch.utils.exceptions import FitError
from critbranch.utils.misc import default_threads, git_describe
from critbranch.verify import Provenance, Verdict

# only the requested times (and T) are recorded
RECORD_ONLY_TIMES = 2**62


@dataclass
class Runner:
    config: ExperimentConfig
    threads: Optional[int] = None
    out: Optional[Path] = None
    model: models.Model = field(init=False)

    def __post_init__(self) -> None:
        self.task = self.config["task"]
        self.numeric = self.config["numeric"]
        self.seed = self.config["rng"]["seed"]
        if not self.threads:
            self.threads = self.config["rng"]["threads"] or default_threads()
        if self.out is None:
            configured = self.config["io"]["out"]
            self.out = Path(configured) if configured else default_out_dir()
        self.model = build_model(self.config["model"])
        self._triplet: Optional[spectral.EigenTriplet] = None

    ### main API ###
    def execute(self) -> Tuple[Dict[str, dict], List[Verdict]]:
        handlers = {
            "spectral": self._spectral,
            "solve": self._solve,
            "simulate": self._simulate,
            "audit": self._audit,
            "verify-kolmogorov": self._verify_kolmogorov,
            "verify-yaglom": self._verify_yaglom,
        }
        with Output.progress() as progress:
            progress.add_task(description=f"Running {self.task} on {self.model.kind}", total=None)
            return handlers[self.task]()

    def run(self, save: bool = True) -> RunRecord:
        started = utc_now()
        tables, verdicts = self.execute()
        record = RunRecord(
            config=self.config,
            config_hash=config_hash(self.config),
            git_describe=git_describe(),
            started=started,
            finished=utc_now(),
            tables=tables,
            verdicts=[v.to_dict() for v in verdicts],
        )
        if save:
            persist(record, self.out, self.config["io"]["formats"])
            ConfigFile(self.out / "config.toml").write(self.config)
        return record

    ### helpers ###
    @property
    def triplet(self) -> spectral.EigenTriplet:
        if self._triplet is None:
            self._triplet = spectral.model_triplet(self.model)
        return self._triplet

    @property
    def dt(self) -> float:
        if isinstance(self.model, models.StableCSBP):
            return self.numeric["dt"]
        return evolution.stable_dt(self.model, self.numeric["dt"])

    @property
    def t0(self) -> float:
        return min(1.0, 0.5 * self.numeric["T"])

    def _is_gw(self) -> bool:
        return isinstance(self.model, models.MultiTypeGW)

    def _is_diffusion(self) -> bool:
        return isinstance(self.model, models.BranchingDiffusion1D)

    def _at_x0(self, values: np.ndarray) -> np.ndarray:
        """Interpolate grid profiles (one per row) at the starting point."""
        grid = np.concatenate(([0.0], self.model.grid, [self.model.d]))
        padded = np.pad(np.atleast_2d(values), ((0, 0), (1, 1)))
        return np.array([np.interp(self.numeric["init"], grid, row) for row in padded])

    def _survival_trajectory(self) -> Trajectory:
        """u_t[0] or V_t[∞] on the requested grid, origin dropped."""
        T, t_grid = self.numeric["T"], self.numeric["t_grid"]
        if models.is_particle_model(self.model):
            traj = evolution.solve_u(self.model, 0.0, T, self.dt, times=t_grid, stride=RECORD_ONLY_TIMES)
        elif isinstance(self.model, models.StableCSBP):
            t = np.asarray(t_grid, dtype=float)
            return Trajectory(TrajectoryKind.V, t, np.asarray(evolution.solve_V_csbp(self.model, np.inf, t))[:, None])
        else:
            traj = evolution.solve_V_multitype(
                self.model, np.inf, T, self.dt, t0=self.t0, times=t_grid, stride=RECORD_ONLY_TIMES
            )
        return Trajectory(traj.kind, traj.t_grid[1:], traj.values[1:])

    def _survival_probability(self, traj: Trajectory) -> np.ndarray:
        init = self.numeric["init"]
        if isinstance(self.model, models.StableCSBP):
            return -np.expm1(-init * traj.values[:, 0])
        if self._is_diffusion():
            return self._at_x0(traj.values)
        if self._is_gw():
            if isinstance(init, list):
                return 1.0 - np.prod((1.0 - traj.values) ** np.asarray(init), axis=1)
            return traj.values[:, init]
        if isinstance(init, list):
            return -np.expm1(-(traj.values @ np.asarray(init, dtype=float)))
        return -np.expm1(-traj.values[:, init])

    def _replicas(self, t_grid, method: Optional[str] = None) -> montecarlo.ReplicaBatch:
        return montecarlo.run_replicas(
            self.model,
            self.numeric["init"],
            t_grid,
            self.numeric["n_reps"],
            method=method or self.numeric["method"],
            seed=self.seed,
            threads=self.threads,
            dt=self.numeric["sim_dt"],
            cap=self.numeric["cap"],
            block_size=self.numeric["block_size"],
        )

    ### tasks ###
    def _spectral(self):
        L = spectral.generator_L(self.model)
        triplet = spectral.eigen_triplet(L)
        self._triplet = triplet
        if self._is_diffusion():
            label, points = "x", self.model.grid
        else:
            label, points = "type", range(self.model.n)
        tables = {
            "triplet": make_table([label, "phi", "phi_tilde"], zip(points, triplet.phi, triplet.phi_tilde)),
            "eigenvalue": make_table(
                ["eigenvalue", "critical", "irreducible"],
                [[triplet.eigenvalue, triplet.is_critical(), spectral.is_irreducible(L)]],
            ),
        }
        if triplet.is_critical() and self.model.n > 1:
            t_grid = [0.0, *self.numeric["t_grid"]]
            profile = spectral.delta_profile(L, triplet, t_grid)
            tables["delta"] = make_table(["t", "delta"], zip(profile.t_grid, profile.delta_values))
        return tables, []

    def _solve(self):
        traj = self._survival_trajectory()
        if isinstance(self.model, models.StableCSBP):
            survival = self._survival_probability(traj)
            return {
                "survival": make_table(["t", "V_t", "survival"], zip(traj.t_grid, traj.values[:, 0], survival))
            }, []
        a_t = traj.paired(self.triplet.phi_tilde)
        if self._is_diffusion():
            rows = zip(traj.t_grid, a_t, self._survival_probability(traj))
            return {"survival": make_table(["t", "a_t", "u_x0"], rows)}, []
        prefix = traj.kind.value
        columns = ["t", "a_t", *[f"{prefix}{i}" for i in range(self.model.n)]]
        rows = [[t, a, *values] for t, a, values in zip(traj.t_grid, a_t, traj.values)]
        tables = {"survival": make_table(columns, rows)}
        if models.is_particle_model(self.model):
            check = evolution.solve_at(
                self.model, self.numeric["T"], self.dt, self.triplet, times=self.numeric["t_grid"], stride=RECORD_ONLY_TIMES
            )
            tables["a_t"] = make_table(["t", "a_t", "a_t_direct"], zip(check.t_grid, check.values, check.cross_check))
        return tables, []

    def _simulate(self):
        batch = self._replicas(self.numeric["t_grid"])
        table = montecarlo.survival_from_batch(batch)
        tables = {"survival": make_table(table.columns, table.rows())}
        verdicts = []
        if batch.method == "direct":
            check = montecarlo.martingale_check(batch)
            tables["martingale"] = make_table(
                ["t", "observed", "expected", "std_err"], zip(check.t, check.observed, check.expected, check.std_err)
            )
            verdicts.append(
                Verdict(
                    "phi-martingale",
                    float(np.max(check.z_scores)),
                    0.0,
                    self.numeric["sigmas"],
                    check.passed(self.numeric["sigmas"]),
                    Provenance.MONTE_CARLO,
                    "largest z-score",
                )
            )
        if int(batch.n_censored.max()) > 0:
            Output.warning(f"{int(batch.n_censored.max())} replicas hit the population cap")
        return tables, verdicts

    def _audit(self):
        report = verify.assumption_report(
            self.model,
            delta_grid=self.numeric["deltas"],
            t_grid=[0.0, *self.numeric["t_grid"]],
            h3_horizon=self.numeric["T"],
        )
        return {"assumptions": make_table(report.columns, report.table_rows())}, report.verdicts()

    def _verify_kolmogorov(self):
        triplet = None if isinstance(self.model, models.StableCSBP) else self.triplet
        alpha, ell = verify.scaling_pair(self.model, triplet)
        tolerance, sigmas = self.numeric["tolerance"], self.numeric["sigmas"]
        tables = {}
        if self.numeric["source"] == "monte_carlo":
            survival = montecarlo.survival_from_batch(self._replicas(self.numeric["t_grid"]))
            tables["survival"] = make_table(survival.columns, survival.rows())
            t, p = survival.t, survival.p_hat
            source = survival
        else:
            traj = self._survival_trajectory()
            t, p = traj.t_grid, self._survival_probability(traj)
            source = (t, p)

        asymptote = np.atleast_1d(survival_asymptote(alpha, ell, t))
        columns, rows = ["t", "survival", "asymptote", "ratio"], [list(r) for r in zip(t, p, asymptote, p / asymptote)]
        if self._is_gw() and self.numeric["source"] == "deterministic":
            a_traj = Trajectory(TrajectoryKind.A_SCALAR, traj.t_grid, traj.paired(triplet.phi_tilde))
            uniform = evolution.uniform_ratio_error(traj, a_traj, triplet, traj.t_grid)
            columns.append("uniform_error")
            rows = [row + [err] for row, err in zip(rows, uniform)]
        tables["kolmogorov"] = make_table(columns, rows)

        verdicts = [
            verify.kolmogorov_verdict(self.model, self.numeric["init"], source, alpha, ell, triplet, tolerance, sigmas)
        ]
        if self.numeric["source"] == "deterministic":
            try:
                fit = verify.fit_power_law(t, p, (t[-1] / 100.0, t[-1]))
                target = -1.0 / alpha
                verdicts.append(
                    Verdict(
                        "decay-exponent",
                        fit.slope,
                        target,
                        tolerance * abs(target),
                        abs(fit.slope - target) <= tolerance * abs(target),
                        Provenance.DETERMINISTIC,
                        f"window {fit.window[0]:g}..{fit.window[1]:g}",
                    )
                )
            except FitError as e:
                Output.warning(f"Decay exponent not fitted: {e}")
        return tables, verdicts

    def _verify_yaglom(self):
        t, theta = self.numeric["t"], self.numeric["theta_grid"]
        f_dir = self.numeric["f_dir"]
        alpha = models.tail_index(self.model)
        if self.numeric["source"] == "monte_carlo":
            a_t = float(evolution.solve_at(self.model, t, self.dt, self.triplet).final)
            table = montecarlo.conditional_laplace(
                self.model,
                self.numeric["init"],
                t,
                theta,
                f_dir,
                a_t,
                self.numeric["n_reps"],
                seed=self.seed,
                threads=self.threads,
                method=self.numeric["method"],
                cap=self.numeric["cap"],
                block_size=self.numeric["block_size"],
            )
            theta_prime = table.theta * self.triplet.pair(np.broadcast_to(np.asarray(f_dir, dtype=float), (self.model.n,)))
            rows = [row + [float(target)] for row, target in zip(table.rows(), evolution.yaglom_limit(theta_prime, alpha))]
            tables = {"yaglom": make_table([*table.columns, "target_lf"], rows)}
        else:
            triplet = None if isinstance(self.model, models.StableCSBP) else self.triplet
            table = evolution.yaglom_profile(
                self.model, theta, f_dir, t, self.dt, triplet=triplet, mass=self.numeric["mass"], t0=self.t0
            )
            lf = table.laplace
            rows = zip(table.theta, table.theta_prime, lf.min(axis=1), lf.max(axis=1), evolution.yaglom_limit(table.theta_prime, alpha))
            tables = {"yaglom": make_table(["theta", "theta_prime", "lf_min", "lf_max", "target_lf"], rows)}
        verdicts = verify.yaglom_verdict(
            self.model,
            t,
            theta,
            f_dir,
            table,
            alpha=alpha,
            triplet=None if isinstance(self.model, models.StableCSBP) else self.triplet,
            tolerance=self.numeric["tolerance"],
            sigmas=self.numeric["sigmas"],
        )
        return tables, verdicts


def replay(record: RunRecord, threads: Optional[int] = None) -> RunRecord:
    """Re-execute a record with its embedded seed; every table must match bit for bit."""
    started = utc_now()
    tables, verdicts = Runner(record.config, threads=threads).execute()
    compare_tables(record.tables, tables)
    return RunRecord(
        config=record.config,
        config_hash=record.config_hash,
        git_describe=git_describe(),
        started=started,
        finished=utc_now(),
        tables=tables,
        verdicts=[v.to_dict() for v in verdicts],
    )
