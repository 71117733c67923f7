"""
Deterministic evolution equations.

The mild equations are solved in differential form,

    du/dt = L u - A[u],   u_0 = 1 - g          (particle models)
    dV/dt = L V - J[V],   V_0 = f              (superprocesses)

by fixed-step explicit Runge-Kutta. Several initial functions (the columns
of a 2-d array) are marched together, which is how θ grids are solved.
"""

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from critbranch import models, spectral
from critbranch.models import MultiTypeCSBP, StableCSBP
from critbranch.utils.exceptions import (
    DivisionByNegligible,
    DomainError,
    NonConvergence,
    QuadratureError,
    SingularStart,
    StepSizeError,
)

DEFAULT_DT = 0.01
RANGE_TOL = 1e-9
RATE_BOUND = 0.1
STABILITY_BOUND = 2.5
NEGLIGIBLE = 1e-300
MAX_RECORDS = 10_000
CROSS_CHECK_TOL = 1e-6
START_TOL = 1e-6


class TrajectoryKind(str, Enum):
    U = "u"
    V = "V"
    A_SCALAR = "a"


@dataclass(frozen=True)
class ButcherTableau:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    @classmethod
    def classic(cls) -> "ButcherTableau":
        return cls(
            a=np.array(
                [
                    [0.0, 0.0, 0.0, 0.0],
                    [0.5, 0.0, 0.0, 0.0],
                    [0.0, 0.5, 0.0, 0.0],
                    [0.0, 0.0, 1.0, 0.0],
                ]
            ),
            b=np.array([1.0, 2.0, 2.0, 1.0]) / 6.0,
            c=np.array([0.0, 0.5, 0.5, 1.0]),
            order=4,
        )

    @property
    def stages(self) -> int:
        return self.b.size


class RungeKutta4:
    """Fixed-step explicit Runge-Kutta marching driven by a Butcher tableau."""

    def __init__(self, tableau: Optional[ButcherTableau] = None):
        self.tableau = tableau or ButcherTableau.classic()

    def step(self, rhs: Callable, t: float, y: np.ndarray, dt: float) -> np.ndarray:
        a, b, c = self.tableau.a, self.tableau.b, self.tableau.c
        k = []
        for i in range(self.tableau.stages):
            yi = y
            for j in range(i):
                if a[i, j] != 0.0:
                    yi = yi + dt * a[i, j] * k[j]
            k.append(rhs(t + c[i] * dt, yi))
        increment = sum(b[i] * k[i] for i in range(self.tableau.stages) if b[i] != 0.0)
        return y + dt * increment

    def march(
        self,
        rhs: Callable,
        y0: np.ndarray,
        t0: float,
        steps: np.ndarray,
        record: np.ndarray,
        project: Optional[Callable] = None,
    ):
        """
        Advance y0 through the step sizes ``steps``; the state after step i is
        kept when ``record[i]``. ``project`` validates (and may clamp) each
        new state.
        """
        times = t0 + np.cumsum(steps)
        kept_t, kept_y = [t0], [np.array(y0, dtype=float)]
        y = np.array(y0, dtype=float)
        t = t0
        for i, dt in enumerate(steps):
            y = self.step(rhs, t, y, dt)
            t = times[i]
            if project is not None:
                y = project(y, t)
            if record[i]:
                kept_t.append(t)
                kept_y.append(y.copy())
        return np.array(kept_t), np.stack(kept_y)


@dataclass(frozen=True)
class Trajectory:
    kind: TrajectoryKind
    t_grid: np.ndarray
    values: np.ndarray
    cross_check: Optional[np.ndarray] = field(default=None, repr=False)

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        if abs(self.t_grid[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"t={t} was not recorded on this trajectory")
        return i

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def paired(self, weights) -> np.ndarray:
        """⟨values_t, weights⟩ along the trajectory (a_t from φ̃)."""
        return np.tensordot(self.values, np.asarray(weights, dtype=float), axes=([1], [0]))

    def to_csv(self, path: Path, labels: Optional[Sequence[str]] = None) -> Path:
        values = self.values.reshape(self.values.shape[0], -1)
        labels = list(labels) if labels else [f"{self.kind.value}{i}" for i in range(values.shape[1])]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", *labels])
            for t, row in zip(self.t_grid, values):
                writer.writerow([repr(float(t)), *[repr(float(v)) for v in row]])
        return path


def max_rate(model) -> float:
    """Largest jump rate of a particle model (β E[N] over types)."""
    if isinstance(model, models.MultiTypeGW):
        return float(np.max(model.beta * np.maximum(model.offspring_means, 1.0)))
    if isinstance(model, models.BranchingDiffusion1D):
        return float(model.grid_beta * model.offspring.mean)
    return 0.0


def check_step(model, dt: float) -> None:
    if dt <= 0:
        raise StepSizeError("dt must be positive")
    rate = max_rate(model)
    if rate * dt >= RATE_BOUND:
        raise StepSizeError(f"dt={dt} does not resolve the branching rate {rate:.4g}")
    stiffness = float(np.max(np.abs(spectral.generator_L(model)).sum(axis=1)))
    if stiffness * dt >= STABILITY_BOUND:
        raise StepSizeError(
            f"dt={dt} is beyond the explicit stability limit of the mean generator "
            f"(|L| = {stiffness:.4g}); use dt < {STABILITY_BOUND / stiffness:.3g}"
        )


def stable_dt(model, target: float = DEFAULT_DT) -> float:
    """Largest dt <= target passing check_step, with some headroom."""
    stiffness = float(np.max(np.abs(spectral.generator_L(model)).sum(axis=1)))
    limits = [target]
    if stiffness > 0:
        limits.append(0.5 * STABILITY_BOUND / stiffness)
    rate = max_rate(model)
    if rate > 0:
        limits.append(0.5 * RATE_BOUND / rate)
    return min(limits)


def _uniform_steps(T: float, dt: float) -> np.ndarray:
    count = max(1, int(math.ceil(T / dt - 1e-9)))
    return np.full(count, T / count)


def _record_mask(steps: np.ndarray, t0: float, times, stride: Optional[int]) -> np.ndarray:
    count = steps.size
    if stride is None:
        stride = max(1, count // MAX_RECORDS)
    mask = np.zeros(count, dtype=bool)
    mask[stride - 1 :: stride] = True
    mask[-1] = True
    if times is not None:
        grid = t0 + np.cumsum(steps)
        for t in np.atleast_1d(times):
            if t <= t0:
                continue
            i = int(np.argmin(np.abs(grid - t)))
            if abs(grid[i] - t) > 0.5 * steps[i] + 1e-12:
                raise DomainError(f"Requested time {t} lies outside the integration window")
            mask[i] = True
    return mask


def _project_unit(y: np.ndarray, t: float) -> np.ndarray:
    if np.any(~np.isfinite(y)) or y.min() < -RANGE_TOL or y.max() > 1.0 + RANGE_TOL:
        raise StepSizeError(f"u left [0, 1] at t={t:.6g}; reduce dt")
    return np.clip(y, 0.0, 1.0)


def _project_positive(y: np.ndarray, t: float) -> np.ndarray:
    if np.any(~np.isfinite(y)) or y.min() < -RANGE_TOL * max(1.0, float(np.max(np.abs(y)))):
        raise StepSizeError(f"V became negative at t={t:.6g}; reduce dt")
    return np.maximum(y, 0.0)


def _particle_rhs(model, L: np.ndarray) -> Callable:
    def rhs(t, u):
        return L @ u - model.A(u)

    return rhs


def solve_u(
    model,
    g,
    T: float,
    dt: float = DEFAULT_DT,
    times=None,
    stride: Optional[int] = None,
    check: bool = True,
) -> Trajectory:
    """
    u_t[g] on [0, T]. ``g`` is a function on types, or an (n, k) array of k
    initial functions solved together.
    """
    if not models.is_particle_model(model):
        raise DomainError("solve_u needs a particle model")
    if T <= 0:
        raise DomainError("T must be positive")
    if check:
        check_step(model, dt)
    g = np.asarray(g, dtype=float)
    g = np.full(model.n, float(g)) if g.ndim == 0 else g
    if g.shape[0] != model.n:
        raise DomainError(f"g has {g.shape[0]} entries, model has {model.n} types")
    u0 = _project_unit(1.0 - g, 0.0)
    steps = _uniform_steps(T, dt)
    L = spectral.generator_L(model)
    t_grid, values = RungeKutta4().march(
        _particle_rhs(model, L), u0, 0.0, steps, _record_mask(steps, 0.0, times, stride), _project_unit
    )
    return Trajectory(TrajectoryKind.U, t_grid, values)


def solve_at(
    model,
    T: float,
    dt: float = DEFAULT_DT,
    triplet: Optional[spectral.EigenTriplet] = None,
    times=None,
    stride: Optional[int] = None,
) -> Trajectory:
    """
    a_t = ⟨u_t[0], φ̃⟩, with the direct form ⟨1, φ̃⟩ - ∫_0^t ⟨A[u_s], φ̃⟩ ds
    integrated alongside as ``cross_check``.
    """
    if not models.is_particle_model(model):
        raise DomainError("solve_at needs a particle model")
    check_step(model, dt)
    trip = triplet or spectral.model_triplet(model, critical=True)
    L = spectral.generator_L(model)
    n = model.n

    def rhs(t, y):
        u = y[:n]
        nonlinear = model.A(u)
        return np.concatenate((L @ u - nonlinear, [-(trip.phi_tilde @ nonlinear)]))

    def project(y, t):
        return np.concatenate((_project_unit(y[:n], t), y[n:]))

    y0 = np.concatenate((np.ones(n), [trip.total_mass]))
    steps = _uniform_steps(T, dt)
    t_grid, values = RungeKutta4().march(
        rhs, y0, 0.0, steps, _record_mask(steps, 0.0, times, stride), project
    )
    a = values[:, :n] @ trip.phi_tilde
    direct = values[:, n]
    gap = float(np.max(np.abs(a - direct)))
    if gap > CROSS_CHECK_TOL:
        raise NonConvergence(f"a_t and its direct integral disagree by {gap:.3e}")
    return Trajectory(TrajectoryKind.A_SCALAR, t_grid, a, cross_check=direct)


def _grey_time(mech: StableCSBP, lower: float, upper: float) -> float:
    """∫_lower^upper dλ / ψ(λ)."""
    value, error = integrate.quad(lambda lam: 1.0 / float(mech.psi(lam)), lower, upper, limit=200)
    if not np.isfinite(value) or error > 1e-8 * max(abs(value), 1e-300):
        raise QuadratureError(f"∫ dλ/ψ failed on ({lower}, {upper})")
    return value


def _flow_root(mech: StableCSBP, theta: float, t: float) -> float:
    if t == 0:
        return theta
    ceiling = (mech.alpha * mech.kappa * t) ** (-1.0 / mech.alpha)
    if mech.c > 0:
        ceiling = min(ceiling, 1.0 / (mech.c * t))
    hi = min(theta, ceiling)
    lo = 0.5 * hi
    for _ in range(2000):
        if _grey_time(mech, lo, theta) > t:
            break
        lo *= 0.5
    else:
        raise NonConvergence("Could not bracket the CSBP flow")
    return optimize.brentq(lambda v: _grey_time(mech, v, theta) - t, lo, hi, xtol=1e-300, rtol=1e-14)


def solve_V_csbp(mech: StableCSBP, theta, t):
    """
    V_t(θ) of the CSBP flow dV/dt = -ψ(V); θ may be ``np.inf``. Closed form
    (θ^{-α} + ακt)^{-1/α} for the stable mechanism, root finding on
    ∫_V^θ dλ/ψ = t otherwise.
    """
    theta_arr, t_arr = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(t, dtype=float))
    if np.any(t_arr < 0) or np.any(theta_arr < 0):
        raise DomainError("solve_V_csbp needs t >= 0 and theta >= 0")
    if np.any(np.isinf(theta_arr) & (t_arr <= 0)):
        raise DomainError("V_t(∞) needs t > 0")

    if mech.closed_form:
        alpha, kappa = mech.alpha, mech.effective_kappa
        with np.errstate(divide="ignore"):
            out = (theta_arr ** (-alpha) + alpha * kappa * t_arr) ** (-1.0 / alpha)
        out = np.where(theta_arr == 0, 0.0, out)
    else:
        out = np.vectorize(
            lambda th, s: 0.0 if th == 0 else _flow_root(mech, th, s), otypes=[float]
        )(theta_arr, t_arr)
    return float(out) if out.ndim == 0 else out


def csbp_survival(mech: StableCSBP, z: float, t):
    """P_z(ζ > t) = 1 - exp(-z V_t)."""
    return -np.expm1(-z * np.asarray(solve_V_csbp(mech, np.inf, t)))


def _superprocess_rhs(model: MultiTypeCSBP, L: np.ndarray) -> Callable:
    def rhs(t, v):
        return L @ v - model.J(v)

    return rhs


def start_up_mesh(alpha: float, kappa: float, theta: float, t0: float, dt: float) -> np.ndarray:
    """
    Geometric steps from the θ^{-α} time scale up to dt, then uniform steps
    to t0.
    """
    first = 0.01 / ((1.0 + alpha) * kappa * theta**alpha)
    ratio = 1.0 + 0.1 * alpha / (1.0 + alpha)
    steps, total, step = [], 0.0, first
    while step < dt and total + step < t0:
        steps.append(step)
        total += step
        step *= ratio
    remaining = t0 - total
    if remaining > 0:
        steps.extend(_uniform_steps(remaining, min(dt, remaining)))
    return np.asarray(steps)


def _nonlinear_scale(model: MultiTypeCSBP, theta: float) -> float:
    """Effective κ of J near θ, i.e. max_i J[θ](i) / θ^{1+α}."""
    alpha = models.tail_index(model)
    values = np.atleast_1d(model.J(np.full(model.n, theta)))
    return max(float(np.max(values)) / theta ** (1.0 + alpha), 1e-12)


def _solve_from_large(model: MultiTypeCSBP, theta: float, t0: float, dt: float) -> np.ndarray:
    alpha = models.tail_index(model)
    steps = start_up_mesh(alpha, _nonlinear_scale(model, theta), theta, t0, dt)
    L = spectral.generator_L(model)
    mask = np.zeros(steps.size, dtype=bool)
    mask[-1] = True
    _, values = RungeKutta4().march(
        _superprocess_rhs(model, L), np.full(model.n, theta), 0.0, steps, mask, _project_positive
    )
    return values[-1]


def solve_V_multitype(
    model: MultiTypeCSBP,
    f,
    T: float,
    dt: float = DEFAULT_DT,
    t0: float = 1.0,
    times=None,
    stride: Optional[int] = None,
    theta_start: Optional[float] = None,
) -> Trajectory:
    """
    V_t[f] of a multi-type superprocess. ``f = np.inf`` starts at t0 from a
    large θ after checking that V_{t0} no longer depends on it.
    """
    if not isinstance(model, MultiTypeCSBP):
        raise DomainError("solve_V_multitype needs a MultiTypeCSBP")
    L = spectral.generator_L(model)
    stiffness = float(np.max(np.abs(L).sum(axis=1)))
    if dt <= 0 or stiffness * dt >= STABILITY_BOUND:
        raise StepSizeError(f"dt={dt} is beyond the explicit stability limit of L")
    f_arr = np.asarray(f, dtype=float)
    rhs = _superprocess_rhs(model, L)

    if np.all(np.isinf(f_arr)):
        if not (0 < t0 < T):
            raise DomainError("Infinite initial data needs 0 < t0 < T")
        alpha = models.tail_index(model)
        theta = theta_start or 1e12 ** (1.0 / alpha)
        start = _solve_from_large(model, theta, t0, dt)
        check = _solve_from_large(model, 10.0 * theta, t0, dt)
        gap = float(np.max(np.abs(start - check)))
        if gap > START_TOL * max(1.0, float(np.max(start))):
            raise SingularStart(f"V_{{t0}} still depends on the starting θ (gap {gap:.3e})")
        v0, origin = start, t0
    else:
        if np.any(np.isinf(f_arr)) or np.any(f_arr < 0):
            raise DomainError("f must be non-negative and finite (or entirely infinite)")
        v0 = np.full(model.n, float(f_arr)) if f_arr.ndim == 0 else f_arr
        if v0.shape[0] != model.n:
            raise DomainError(f"f has {v0.shape[0]} entries, model has {model.n} types")
        origin = 0.0

    steps = _uniform_steps(T - origin, dt)
    t_grid, values = RungeKutta4().march(
        rhs, v0, origin, steps, _record_mask(steps, origin, times, stride), _project_positive
    )
    return Trajectory(TrajectoryKind.V, t_grid, values)


@dataclass(frozen=True)
class YaglomProfile:
    """
    Deterministic Yaglom functional at time t over a θ grid. ``ratio`` is
    u_t[e^{-θ a_t f}] / u_t[0] (or its superprocess analogue) per θ and
    type; the conditional Laplace functional is 1 - ratio.
    """

    t: float
    a_t: float
    theta: np.ndarray
    theta_prime: np.ndarray
    ratio: np.ndarray

    @property
    def laplace(self) -> np.ndarray:
        return 1.0 - self.ratio


def _direction(model, f_dir) -> np.ndarray:
    f = np.asarray(f_dir, dtype=float)
    f = np.full(model.n, float(f)) if f.ndim == 0 else f
    if f.shape[0] != model.n or np.any(f < 0) or not np.any(f > 0):
        raise DomainError("f_dir must be a non-negative, non-zero function on types")
    return f


def yaglom_profile(
    model,
    theta,
    f_dir,
    t: float,
    dt: float = DEFAULT_DT,
    triplet: Optional[spectral.EigenTriplet] = None,
    mass: Optional[float] = None,
    t0: float = 1.0,
) -> YaglomProfile:
    """
    ``mass`` selects the exact conditional functional of a superprocess
    started from z δ_x; by default the small-mass limit 1 - V_t[θa_t f]/V_t
    is reported.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(theta < 0):
        raise DomainError("theta must be non-negative")

    if isinstance(model, StableCSBP):
        a_t = float(solve_V_csbp(model, np.inf, t))
        f = _direction(model, f_dir)
        pushed = np.asarray(solve_V_csbp(model, theta * a_t * f[0], t))
        ratio = _superprocess_ratio(pushed, a_t, mass)[:, None]
        return YaglomProfile(t, a_t, theta, theta * f[0], ratio)

    trip = triplet or spectral.model_triplet(model, critical=True)
    f = _direction(model, f_dir)
    if models.is_particle_model(model):
        survival = solve_u(model, 0.0, t, dt).final
        a_t = float(trip.phi_tilde @ survival)
        if np.any(survival < NEGLIGIBLE):
            raise DivisionByNegligible(f"u_t vanishes at t={t}; the conditional law is undefined")
        g = np.exp(-np.outer(f, theta) * a_t)
        pushed = solve_u(model, g, t, dt).final
        ratio = (pushed / survival[:, None]).T
    else:
        v_t = solve_V_multitype(model, np.inf, t, dt, t0=min(t0, 0.5 * t)).final
        a_t = float(trip.phi_tilde @ v_t)
        if np.any(v_t < NEGLIGIBLE):
            raise DivisionByNegligible(f"V_t vanishes at t={t}")
        pushed = solve_V_multitype(model, np.outer(f, theta) * a_t, t, dt).final
        ratio = np.stack([_superprocess_ratio(pushed[i], v_t[i], mass) for i in range(model.n)]).T
    return YaglomProfile(t, a_t, theta, theta * trip.pair(f), ratio)


def _superprocess_ratio(pushed, v_t, mass: Optional[float]):
    pushed = np.asarray(pushed, dtype=float)
    if mass is None:
        return pushed / v_t
    survival = -np.expm1(-mass * v_t)
    if survival < NEGLIGIBLE:
        raise DivisionByNegligible("Survival probability is negligible")
    return -np.expm1(-mass * pushed) / survival


def yaglom_ratio(model, theta: float, f_dir, t: float, dt: float = DEFAULT_DT, x: int = 0, **kwargs) -> float:
    """E_{δx}[exp(-θ a_t ⟨f, X_t⟩) | ζ > t] from solver trajectories."""
    profile = yaglom_profile(model, [theta], f_dir, t, dt, **kwargs)
    return float(profile.laplace[0, x])


def survival_oracle(alpha: float, beta: float, c: float, t):
    """u_t of the single-type Slack model: (1 + αβct)^{-1/α}."""
    return (1.0 + alpha * beta * c * np.asarray(t, dtype=float)) ** (-1.0 / alpha)


def yaglom_limit(theta_prime, alpha: float):
    """Limiting conditional Laplace functional 1 - θ'/(1 + θ'^α)^{1/α}."""
    theta_prime = np.asarray(theta_prime, dtype=float)
    return 1.0 - theta_prime / (1.0 + theta_prime**alpha) ** (1.0 / alpha)


def richardson_limit(t, values):
    """
    Extrapolate values(t) -> t = ∞ from the last three points of a geometric
    t sequence, assuming an error ~ C t^{-p}. Returns (limit, p); p is nan
    when the differences do not contract.
    """
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if t.size < 3:
        raise DomainError("Richardson extrapolation needs three points")
    q = t[-1] / t[-2]
    if not np.isclose(t[-2] / t[-3], q):
        raise DomainError("Richardson extrapolation needs a geometric t sequence")
    d1, d2 = values[-2] - values[-3], values[-1] - values[-2]
    if d1 == 0 or d2 == 0 or np.sign(d1) != np.sign(d2) or abs(d2) >= abs(d1):
        return float(values[-1]), float("nan")
    p = math.log(abs(d1 / d2)) / math.log(q)
    return float(values[-1] + d2 / (q**p - 1.0)), p


def uniform_ratio_error(u: Trajectory, a: Trajectory, triplet: spectral.EigenTriplet, times) -> np.ndarray:
    """max_x |u_t(x) / (a_t φ(x)) - 1| at each of ``times``."""
    return np.array(
        [float(np.max(np.abs(u.at(t) / (a.at(t) * triplet.phi) - 1.0))) for t in np.atleast_1d(times)]
    )


def semigroup_defect(model, g, t: float, s: float, dt: float = DEFAULT_DT) -> float:
    """|u_{t+s}[g] - u_t[1 - u_s[g]]| in sup norm."""
    whole = solve_u(model, g, t + s, dt).final
    first = solve_u(model, g, s, dt).final
    restarted = solve_u(model, 1.0 - first, t, dt).final
    return float(np.max(np.abs(whole - restarted)))
