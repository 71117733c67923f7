"""
Verdicts for the survival asymptotics and the Yaglom limit.

Deterministic sources pass within a relative tolerance plus a trend
requirement (the error must not grow over the last decade of t); Monte Carlo
sources pass when the target lies within ``sigmas`` standard errors.
"""

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from critbranch import evolution, models, spectral
from critbranch.evolution import Trajectory, YaglomProfile
from critbranch.montecarlo import LaplaceTable, SurvivalTable
from critbranch.output import Output
from critbranch.regvar import SlowlyVarying, survival_asymptote
from critbranch.utils.exceptions import DegenerateFit, FitError, TaskError

DETERMINISTIC_TOL = 0.02
MC_SIGMAS = 3.0
MIN_FIT_POINTS = 5


class Provenance(str, Enum):
    DETERMINISTIC = "deterministic"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    stderr: float
    r2: float
    window: tuple


@dataclass(frozen=True)
class Verdict:
    criterion: str
    observed: float
    target: float
    tolerance: float
    passed: bool
    provenance: Provenance
    note: str = ""

    def to_dict(self) -> dict:
        record = asdict(self)
        record["provenance"] = self.provenance.value
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "Verdict":
        return cls(**{**record, "provenance": Provenance(record["provenance"])})


def fit_power_law(t_values, y_values, window: Optional[tuple] = None) -> FitResult:
    """Least squares on (log t, log y) inside ``window``."""
    t = np.asarray(t_values, dtype=float)
    y = np.asarray(y_values, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if t.size < MIN_FIT_POINTS:
        raise FitError(f"Power-law fit needs {MIN_FIT_POINTS} points, got {t.size}")
    if np.any(y <= 0) or np.any(t <= 0):
        raise FitError("Power-law fit needs positive t and y")
    if math.log10(t.max() / t.min()) < 1.0 - 1e-9:
        raise DegenerateFit("Fit window spans less than one decade of t")
    fit = stats.linregress(np.log(t), np.log(y))
    r2 = min(max(fit.rvalue**2, 0.0), 1.0)
    return FitResult(float(fit.slope), float(fit.intercept), float(fit.stderr), float(r2), (float(t.min()), float(t.max())))


def sliding_slopes(t_values, y_values, decades: float = 1.0, points: int = 5) -> np.ndarray:
    """Slopes over windows of ``decades`` starting at grid points, sliding right along t."""
    t = np.asarray(t_values, dtype=float)
    span = 10.0**decades * (1.0 + 1e-12)
    eligible = np.flatnonzero(t * span <= t.max() * (1.0 + 1e-9))
    if eligible.size == 0:
        raise DegenerateFit(f"t spans less than {decades:g} decades")
    picks = np.unique(eligible[np.rint(np.linspace(0, eligible.size - 1, points)).astype(int)])
    return np.array([fit_power_law(t, y_values, (t[i], t[i] * span)).slope for i in picks])


def yaglom_target(theta_prime, alpha: float):
    """θ'/(1 + θ'^α)^{1/α}: 0 at θ' = 0, increasing, tends to 1."""
    theta_prime = np.asarray(theta_prime, dtype=float)
    return theta_prime / (1.0 + theta_prime**alpha) ** (1.0 / alpha)


def error_trend_decreasing(t_values, errors, slack: float = 1e-12) -> bool:
    """|error| non-increasing over the last decade of t."""
    t = np.asarray(t_values, dtype=float)
    err = np.abs(np.asarray(errors, dtype=float))
    tail = err[t >= t.max() / 10.0]
    if tail.size < 2:
        return True
    return bool(np.all(np.diff(tail) <= slack + 1e-9 * tail[:-1]))


def scaling_pair(model, triplet: Optional[spectral.EigenTriplet] = None, x_grid=None):
    """
    (α, ℓ) with ⟨A[xφ], φ̃⟩ ~ x^{1+α} ℓ(x): exact for a closed-form stable
    CSBP, read off the (H4) audit otherwise.
    """
    if isinstance(model, models.StableCSBP) and model.closed_form:
        return model.alpha, SlowlyVarying.constant(model.effective_kappa)
    h4 = models.audit_H4(model, x_grid if x_grid is not None else models.default_x_grid(), triplet)
    return h4.alpha_hat, h4.ell_hat


def initial_phi_mass(model, init, triplet: Optional[spectral.EigenTriplet] = None) -> float:
    """⟨φ, μ⟩ for a type index, a count vector, a position or a CSBP mass."""
    if isinstance(model, models.StableCSBP):
        return float(init)
    if isinstance(model, models.BranchingDiffusion1D):
        positions = np.atleast_1d(np.asarray(init, dtype=float))
        return float(np.sum(model.eigenfunction(positions)))
    trip = triplet or spectral.model_triplet(model)
    init = np.asarray(init)
    if init.ndim == 0 and np.issubdtype(init.dtype, np.integer):
        return float(trip.phi[int(init)])
    return float(np.asarray(init, dtype=float) @ trip.phi)


def _survival_curve(survival):
    if isinstance(survival, SurvivalTable):
        return survival.t, survival.p_hat, survival.std_err, Provenance.MONTE_CARLO
    t, p = survival
    return np.asarray(t, dtype=float), np.asarray(p, dtype=float), None, Provenance.DETERMINISTIC


def kolmogorov_verdict(
    model,
    init,
    survival: Union[SurvivalTable, tuple],
    alpha: float,
    ell: SlowlyVarying,
    triplet: Optional[spectral.EigenTriplet] = None,
    tolerance: float = DETERMINISTIC_TOL,
    sigmas: float = MC_SIGMAS,
) -> Verdict:
    """
    P(ζ > t) / (t^{-1/α} ℓ̃(t)) at the largest t against ⟨φ, μ⟩.
    ``survival`` is a Monte Carlo table or a deterministic (t, p) pair.
    """
    target = initial_phi_mass(model, init, triplet)
    t, p, se, provenance = _survival_curve(survival)
    positive = t > 0
    t, p = t[positive], p[positive]
    asymptote = np.atleast_1d(survival_asymptote(alpha, ell, t))
    ratio = p / asymptote
    observed = float(ratio[-1])
    if provenance is Provenance.DETERMINISTIC:
        allowed = tolerance * abs(target)
        trend = error_trend_decreasing(t, ratio - target)
        passed = abs(observed - target) <= allowed and trend
        note = "" if trend else "error grows over the last decade"
    else:
        allowed = sigmas * float(se[positive][-1] / asymptote[-1])
        passed = abs(observed - target) <= allowed
        note = f"{sigmas:g} sigma rule"
    return Verdict("kolmogorov", observed, target, allowed, bool(passed), provenance, note)


def _laplace_curve(model, lf_table, f_dir, triplet):
    if isinstance(lf_table, YaglomProfile):
        return lf_table.theta_prime, lf_table.ratio, None, Provenance.DETERMINISTIC
    if isinstance(lf_table, LaplaceTable):
        if isinstance(model, models.BranchingDiffusion1D):
            raise TaskError("Conditional Laplace verdicts are defined on finite type spaces")
        trip = triplet or spectral.model_triplet(model)
        f = np.broadcast_to(np.asarray(f_dir, dtype=float), (model.n,))
        theta_prime = lf_table.theta * trip.pair(f)
        return theta_prime, (1.0 - lf_table.lf_hat)[:, None], lf_table.std_err, Provenance.MONTE_CARLO
    raise TaskError(f"Unsupported Laplace table {type(lf_table).__name__}")


def yaglom_verdict(
    model,
    t: float,
    theta_grid,
    f_dir,
    lf_table: Union[YaglomProfile, LaplaceTable],
    alpha: Optional[float] = None,
    triplet: Optional[spectral.EigenTriplet] = None,
    tolerance: float = DETERMINISTIC_TOL,
    sigmas: float = MC_SIGMAS,
) -> List[Verdict]:
    """
    One verdict per θ in the 1 - LF form against θ'/(1 + θ'^α)^{1/α}, plus
    the aggregate sup-distance.
    """
    alpha = alpha if alpha is not None else models.tail_index(model)
    theta_prime, observed, se, provenance = _laplace_curve(model, lf_table, f_dir, triplet)
    target = yaglom_target(theta_prime, alpha)
    verdicts = []
    worst = 0.0
    for i, th in enumerate(theta_prime):
        deviations = observed[i] - target[i]
        k = int(np.argmax(np.abs(deviations)))
        distance = float(abs(deviations[k]))
        worst = max(worst, distance)
        allowed = tolerance if provenance is Provenance.DETERMINISTIC else sigmas * float(se[i])
        verdicts.append(
            Verdict(
                f"yaglom[theta'={th:.6g}]",
                float(observed[i][k]),
                float(target[i]),
                allowed,
                bool(distance <= allowed),
                provenance,
                f"t={t:g}",
            )
        )
    sup_allowed = tolerance if provenance is Provenance.DETERMINISTIC else max(v.tolerance for v in verdicts)
    verdicts.append(
        Verdict("yaglom-sup", worst, 0.0, sup_allowed, all(v.passed for v in verdicts), provenance, f"t={t:g}")
    )
    return verdicts


@dataclass(frozen=True)
class AssumptionRow:
    assumption: str
    passed: bool
    value: float
    evidence: str
    required: bool = True


@dataclass(frozen=True)
class AssumptionReport:
    model_kind: str
    rows: List[AssumptionRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows if row.required)

    def verdicts(self) -> List[Verdict]:
        return [
            Verdict(row.assumption, row.value, float("nan"), float("nan"), row.passed, Provenance.DETERMINISTIC, row.evidence)
            for row in self.rows
            if row.required
        ]

    columns = ("assumption", "passed", "value", "evidence")

    def table_rows(self) -> List[list]:
        return [[row.assumption, row.passed, row.value, row.evidence] for row in self.rows]


def assumption_report(
    model,
    delta_grid: Optional[Sequence[float]] = None,
    x_grid=None,
    t_grid=None,
    h3_horizon: float = 50.0,
) -> AssumptionReport:
    """Audit (H1)-(H5); failures become rows, never exceptions."""
    rows: List[AssumptionRow] = []
    alpha = models.tail_index(model)

    h1 = models.audit_H1(model)
    rows.append(AssumptionRow("H1", bool(np.isfinite(h1)), h1, "sup of the mean offspring / transferred mass"))

    triplet = None
    try:
        L = spectral.generator_L(model)
        triplet = spectral.eigen_triplet(L)
        critical = triplet.is_critical()
        evidence = f"lambda={triplet.eigenvalue:.3e}"
        if critical and model.n > 1:
            profile = spectral.delta_profile(L, triplet, t_grid if t_grid is not None else np.linspace(0.0, 20.0, 21))
            evidence += f", sup Delta_t={profile.delta_sup:.4g}, final Delta_t={profile.delta_values[-1]:.3e}"
            critical = bool(np.isfinite(profile.delta_sup))
        rows.append(AssumptionRow("H2", critical, triplet.eigenvalue, evidence))
    except TaskError as e:
        rows.append(AssumptionRow("H2", False, float("nan"), f"[{e.code}] {e}"))

    h3 = models.audit_H3(model)
    rows.append(AssumptionRow("H3", h3.passed, h3.value, h3.criterion))

    h4 = None
    try:
        h4 = models.audit_H4(model, x_grid if x_grid is not None else models.default_x_grid(), triplet)
        rows.append(
            AssumptionRow("H4", True, h4.alpha_hat, f"slope={h4.slope:.6g}, nonlinearity={h4.nonlinearity:.3g}")
        )
    except TaskError as e:
        rows.append(AssumptionRow("H4", False, float("nan"), f"[{e.code}] {e}"))

    deltas = delta_grid if delta_grid is not None else [0.5 * alpha, min(1.5 * alpha, 0.99)]
    finite = []
    for delta in deltas:
        try:
            value = models.audit_H5(model, delta, triplet)
            finite.append(delta)
            rows.append(AssumptionRow(f"H5(delta={delta:.4g})", True, value, "finite", required=False))
        except TaskError as e:
            rows.append(AssumptionRow(f"H5(delta={delta:.4g})", False, float("inf"), f"[{e.code}] {e}", required=False))
    rows.append(AssumptionRow("H5", bool(finite), min(finite) if finite else float("nan"), "some delta in (0, 1) finite"))

    if models.is_particle_model(model) and triplet is not None and triplet.is_critical() and h4 is not None:
        rows.append(_extinction_proxy(model, triplet, h4, h3_horizon))
    return AssumptionReport(model.kind, rows)


def _extinction_proxy(model, triplet, h4, horizon: float) -> AssumptionRow:
    """a_T from the solver against ten times the survival asymptote."""
    try:
        dt = evolution.stable_dt(model)
        a_T = float(evolution.solve_at(model, horizon, dt, triplet).final)
        bound = 10.0 * float(survival_asymptote(h4.alpha_hat, h4.ell_hat, horizon))
        return AssumptionRow(
            "H3-proxy", a_T <= bound, a_T, f"a_T={a_T:.4g} vs 10 x asymptote {bound:.4g} at T={horizon:g}", required=False
        )
    except TaskError as e:
        return AssumptionRow("H3-proxy", False, float("nan"), f"[{e.code}] {e}", required=False)


def summarize(verdicts: Sequence[Verdict], title: str = "Verdicts") -> bool:
    Output.table(
        title,
        ["criterion", "observed", "target", "tolerance", "pass", "source", "note"],
        [[v.criterion, v.observed, v.target, v.tolerance, v.passed, v.provenance.value, v.note] for v in verdicts],
    )
    return all(v.passed for v in verdicts)
