"""
Event-driven simulation of the particle models.

Two measures are simulated: the original law P and the spine law P^φ under
which one marked particle never dies, branches at rate β^φ with size-biased
offspring and moves by the φ-transformed motion. The identity

    E^φ_{δx}[1 / ⟨φ, X_t⟩] = P_{δx}(ζ > t) / φ(x)

turns the spine into an importance sampler for survival probabilities.

Every replica (multi-type GW) or every fixed-size block of replicas
(branching diffusion) draws from its own counter-based Philox substream
keyed by the run seed, so results do not depend on the thread count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from critbranch import spectral
from critbranch.models import BranchingDiffusion1D, MultiTypeGW
from critbranch.utils.exceptions import DomainError, InsufficientReplicas, PopulationExplosion

DEFAULT_CAP = 10**7
DEFAULT_DIFFUSION_DT = 1e-3
DIFFUSION_BLOCK = 1000
MIN_REPLICAS = 100
MIN_SURVIVORS = 30
CONFIDENCE = 0.95
BOOTSTRAP_RESAMPLES = 999


def substream(seed: int, index: int) -> np.random.Generator:
    """Philox generator for substream ``index`` of ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(index)]))


@dataclass
class PopulationState:
    """
    Type counts (multi-type GW) or particle positions (branching diffusion).
    """

    counts: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None
    time: float = 0.0
    extinction_time: Optional[float] = None
    censored: bool = False

    def __post_init__(self):
        if (self.counts is None) == (self.positions is None):
            raise DomainError("A population holds either type counts or positions")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if np.any(self.counts < 0):
                raise DomainError("Type counts must be non-negative")
        else:
            self.positions = np.asarray(self.positions, dtype=float)

    @classmethod
    def single(cls, n_types: int, x: int) -> "PopulationState":
        counts = np.zeros(n_types, dtype=np.int64)
        counts[x] = 1
        return cls(counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) if self.counts is not None else int(self.positions.size)

    @property
    def is_extinct(self) -> bool:
        return self.total == 0

    def phi_weight(self, phi: Union[np.ndarray, Callable]) -> float:
        if self.counts is not None:
            return float(self.counts @ phi)
        return float(np.sum(phi(self.positions)))


@dataclass
class SpineState:
    spine_position: Union[int, float]
    side_populations: PopulationState
    phi_weight: float

    def __post_init__(self):
        if not self.phi_weight > 0:
            raise DomainError("The spine carries positive φ-mass")


@dataclass(frozen=True)
class PathSummary:
    """Observables per replica (rows) and observation time (columns)."""

    total: np.ndarray
    phi_mass: np.ndarray
    f_mass: np.ndarray
    censored: np.ndarray

    @classmethod
    def concatenate(cls, parts: Sequence["PathSummary"]) -> "PathSummary":
        return cls(*(np.concatenate([getattr(p, name) for p in parts]) for name in cls.__dataclass_fields__))


@dataclass(frozen=True)
class ReplicaBatch:
    n_reps: int
    seed: int
    method: str
    t_grid: np.ndarray
    block_size: int
    results: PathSummary = field(repr=False)
    phi_x0: float = 1.0

    @property
    def stream_offsets(self) -> np.ndarray:
        return np.arange(0, self.n_reps, self.block_size)

    @property
    def n_censored(self) -> np.ndarray:
        return self.results.censored.sum(axis=0)


def _as_counts(model: MultiTypeGW, init) -> np.ndarray:
    if isinstance(init, PopulationState):
        return init.counts.copy()
    init = np.asarray(init)
    if init.ndim == 0:
        return PopulationState.single(model.n, int(init)).counts
    return init.astype(np.int64).copy()


def _gillespie(
    model: MultiTypeGW,
    counts: np.ndarray,
    t_obs: np.ndarray,
    rng: np.random.Generator,
    cap: int,
    spine: Optional[int] = None,
    triplet: Optional[spectral.EigenTriplet] = None,
):
    """
    Exact event-driven path. Returns the type counts (side particles only when
    a spine is followed) and the spine type at each observation time, the
    extinction time and the censoring time.
    """
    n = model.n
    beta = model.beta
    D = model.displacement
    laws = model.offspring
    single = n == 1
    obs_counts = np.zeros((t_obs.size, n), dtype=np.int64)
    obs_spine = np.full(t_obs.size, -1, dtype=np.int64)
    if spine is not None:
        biased_rate = beta * model.offspring_means * (D @ triplet.phi) / triplet.phi
        spine_children = D * triplet.phi[None, :]
        spine_children /= spine_children.sum(axis=1, keepdims=True)

    t, j = 0.0, 0
    extinction, censored_at = None, None
    while j < t_obs.size:
        side_rates = beta * counts
        side_total = float(side_rates.sum())
        spine_rate = float(biased_rate[spine]) if spine is not None else 0.0
        rate = side_total + spine_rate
        wait = rng.exponential(1.0 / rate) if rate > 0 else math.inf
        while j < t_obs.size and t + wait > t_obs[j]:
            obs_counts[j] = counts
            obs_spine[j] = -1 if spine is None else spine
            j += 1
        if j == t_obs.size:
            break
        t += wait

        if spine is not None and rng.random() * rate < spine_rate:
            k = laws[spine].sample(rng, size_biased=True)
            new_spine = spine if single else int(rng.choice(n, p=spine_children[spine]))
            if k > 1:
                if single:
                    counts[0] += k - 1
                else:
                    counts += rng.multinomial(k - 1, D[spine])
            spine = new_spine
        else:
            i = 0 if single else int(np.searchsorted(np.cumsum(side_rates), rng.random() * side_total, side="right"))
            i = min(i, n - 1)
            k = laws[i].sample(rng)
            counts[i] -= 1
            if k > 0:
                if single:
                    counts[0] += k
                else:
                    counts += rng.multinomial(k, D[i])

        total = int(counts.sum())
        if total > cap:
            censored_at = t
            obs_counts[j:] = -1
            break
        if total == 0 and spine is None:
            extinction = t
            break
    return obs_counts, obs_spine, extinction, censored_at


def simulate_bmp(model: MultiTypeGW, init, t_end: float, rng: np.random.Generator, cap: int = DEFAULT_CAP) -> PopulationState:
    """State of a multi-type GW at ``t_end``; ``init`` is a type index, counts or a state."""
    counts = _as_counts(model, init)
    if counts.sum() == 0:
        return PopulationState(counts=counts, time=t_end, extinction_time=0.0)
    obs, _, extinction, censored_at = _gillespie(model, counts.copy(), np.array([float(t_end)]), rng, cap)
    if censored_at is not None:
        raise PopulationExplosion(f"Population passed {cap} particles at t={censored_at:.6g}")
    return PopulationState(counts=obs[0], time=t_end, extinction_time=extinction)


def simulate_spine(
    model: MultiTypeGW,
    x0: int,
    t_end: float,
    rng: np.random.Generator,
    triplet: Optional[spectral.EigenTriplet] = None,
    cap: int = DEFAULT_CAP,
) -> SpineState:
    trip = triplet or spectral.model_triplet(model, critical=True)
    counts = np.zeros(model.n, dtype=np.int64)
    obs, spines, _, censored_at = _gillespie(model, counts, np.array([float(t_end)]), rng, cap, spine=int(x0), triplet=trip)
    if censored_at is not None:
        raise PopulationExplosion(f"Side population passed {cap} particles at t={censored_at:.6g}")
    side = PopulationState(counts=obs[0], time=t_end)
    return SpineState(int(spines[0]), side, float(trip.phi[spines[0]] + obs[0] @ trip.phi))


def _gw_replicas(model, counts0, spine0, t_obs, seed, indices, cap, trip, f):
    m = t_obs.size
    size = len(indices)
    total = np.zeros((size, m))
    phi_mass = np.zeros((size, m))
    f_mass = np.zeros((size, m))
    censored = np.zeros((size, m), dtype=bool)
    for row, index in enumerate(indices):
        rng = substream(seed, index)
        obs, spines, _, censored_at = _gillespie(model, counts0.copy(), t_obs, rng, cap, spine=spine0, triplet=trip)
        lost = np.any(obs < 0, axis=1)
        obs = np.where(lost[:, None], 0, obs)
        spine_phi = trip.phi[spines] if spine0 is not None else 0.0
        spine_f = f[spines] if spine0 is not None else 0.0
        total[row] = obs.sum(axis=1) + (1 if spine0 is not None else 0)
        phi_mass[row] = obs @ trip.phi + spine_phi
        f_mass[row] = obs @ f + spine_f
        phi_mass[row, lost] = f_mass[row, lost] = total[row, lost] = 0.0
        censored[row] = lost
    return PathSummary(total, phi_mass, f_mass, censored)


def _diffusion_step(positions, owners, model: BranchingDiffusion1D, dt, rng, branch_prob):
    positions = positions + math.sqrt(dt) * rng.standard_normal(positions.size)
    inside = (positions > 0.0) & (positions < model.d)
    positions, owners = positions[inside], owners[inside]
    branching = rng.random(positions.size) < branch_prob
    if np.any(branching):
        k = np.atleast_1d(model.offspring.sample(rng, size=int(branching.sum())))
        positions = np.concatenate((positions[~branching], np.repeat(positions[branching], k)))
        owners = np.concatenate((owners[~branching], np.repeat(owners[branching], k)))
    return positions, owners


def _spine_drift(x, d):
    return (math.pi / d) / np.tan(math.pi * x / d)


def _reflect(x, d):
    x = np.abs(x)
    return np.where(x > d, 2.0 * d - x, x)


def _diffusion_block(
    model: BranchingDiffusion1D,
    x0: float,
    t_obs: np.ndarray,
    dt: float,
    rng: np.random.Generator,
    size: int,
    cap: int,
    f: Callable,
    spine: bool,
) -> PathSummary:
    phi = model.eigenfunction
    m = t_obs.size
    total = np.zeros((size, m))
    phi_mass = np.zeros((size, m))
    f_mass = np.zeros((size, m))
    censored = np.zeros((size, m), dtype=bool)
    lost = np.zeros(size, dtype=bool)

    if spine:
        positions = np.empty(0)
        owners = np.empty(0, dtype=np.int64)
        spine_x = np.full(size, float(x0))
        spine_prob = -math.expm1(-model.beta * model.offspring.mean * dt)
    else:
        positions = np.full(size, float(x0))
        owners = np.arange(size, dtype=np.int64)
    branch_prob = -math.expm1(-model.beta * dt)

    obs_steps = np.rint(t_obs / dt).astype(np.int64)
    if np.any(np.abs(obs_steps * dt - t_obs) > 1e-9 * np.maximum(1.0, t_obs)):
        raise DomainError("Observation times must be multiples of dt")
    step, j = 0, 0
    while j < m:
        while j < m and obs_steps[j] == step:
            live = ~lost
            counts = np.bincount(owners, minlength=size)
            total[:, j] = counts + (1 if spine else 0)
            phi_mass[:, j] = np.bincount(owners, weights=phi(positions), minlength=size)
            f_mass[:, j] = np.bincount(owners, weights=f(positions), minlength=size)
            if spine:
                phi_mass[:, j] += phi(spine_x)
                f_mass[:, j] += f(spine_x)
            censored[:, j] = lost
            total[~live, j] = phi_mass[~live, j] = f_mass[~live, j] = 0.0
            j += 1
        if j == m:
            break
        positions, owners = _diffusion_step(positions, owners, model, dt, rng, branch_prob)
        if spine:
            noise = rng.standard_normal(size)
            spine_x = _reflect(spine_x + _spine_drift(spine_x, model.d) * dt + math.sqrt(dt) * noise, model.d)
            spine_x = np.clip(spine_x, 1e-12, model.d - 1e-12)
            events = np.flatnonzero(rng.random(size) < spine_prob)
            if events.size:
                k = np.atleast_1d(model.offspring.sample(rng, size=events.size, size_biased=True))
                positions = np.concatenate((positions, np.repeat(spine_x[events], k - 1)))
                owners = np.concatenate((owners, np.repeat(events, k - 1)))
        counts = np.bincount(owners, minlength=size)
        over = counts > cap
        if np.any(over):
            lost |= over
            keep = ~lost[owners]
            positions, owners = positions[keep], owners[keep]
        step += 1
    return PathSummary(total, phi_mass, f_mass, censored)


def simulate_branching_diffusion(
    model: BranchingDiffusion1D,
    x0: float,
    t_end: float,
    dt: float,
    rng: np.random.Generator,
    cap: int = DEFAULT_CAP,
) -> PopulationState:
    """
    Euler-Maruyama particles on (0, d), killed when a step ends outside,
    branching by thinning of the constant rate beta.
    """
    if not (0.0 < x0 < model.d):
        raise DomainError(f"x0={x0} is not inside (0, {model.d})")
    positions = np.array([float(x0)])
    owners = np.zeros(1, dtype=np.int64)
    branch_prob = -math.expm1(-model.beta * dt)
    steps = int(round(t_end / dt))
    extinction = None
    for step in range(steps):
        positions, owners = _diffusion_step(positions, owners, model, dt, rng, branch_prob)
        if positions.size > cap:
            raise PopulationExplosion(f"Population passed {cap} particles at t={(step + 1) * dt:.6g}")
        if positions.size == 0:
            extinction = (step + 1) * dt
            break
    return PopulationState(positions=positions, time=t_end, extinction_time=extinction)


def simulate_spine_diffusion(
    model: BranchingDiffusion1D,
    x0: float,
    t_end: float,
    dt: float,
    rng: np.random.Generator,
    cap: int = DEFAULT_CAP,
) -> SpineState:
    """
    Spine with motion dX = (π/d) cot(πX/d) dt + dW, branching at rate β E[N]
    with size-biased offspring; side children are killed branching Brownian
    motions.
    """
    if not (0.0 < x0 < model.d):
        raise DomainError(f"x0={x0} is not inside (0, {model.d})")
    spine_x, side = _spine_positions(model, x0, t_end, dt, rng, cap)
    weight = float(model.eigenfunction(spine_x) + np.sum(model.eigenfunction(side)))
    return SpineState(float(spine_x), PopulationState(positions=side, time=t_end), weight)


def _spine_positions(model, x0, t_end, dt, rng, cap):
    spine_x = float(x0)
    positions = np.empty(0)
    owners = np.empty(0, dtype=np.int64)
    branch_prob = -math.expm1(-model.beta * dt)
    spine_prob = -math.expm1(-model.beta * model.offspring.mean * dt)
    for step in range(int(round(t_end / dt))):
        positions, owners = _diffusion_step(positions, owners, model, dt, rng, branch_prob)
        noise = rng.standard_normal()
        spine_x = float(_reflect(spine_x + _spine_drift(spine_x, model.d) * dt + math.sqrt(dt) * noise, model.d))
        spine_x = min(max(spine_x, 1e-12), model.d - 1e-12)
        if rng.random() < spine_prob:
            k = model.offspring.sample(rng, size_biased=True)
            positions = np.concatenate((positions, np.full(k - 1, spine_x)))
            owners = np.concatenate((owners, np.zeros(k - 1, dtype=np.int64)))
        if positions.size > cap:
            raise PopulationExplosion(f"Side population passed {cap} particles at t={(step + 1) * dt:.6g}")
    return spine_x, positions


def _chunks(n_reps: int, block: int) -> List[range]:
    return [range(start, min(start + block, n_reps)) for start in range(0, n_reps, block)]


def run_replicas(
    model,
    init,
    t_grid,
    n_reps: int,
    method: str = "direct",
    seed: int = 0,
    threads: int = 1,
    f_dir=None,
    dt: float = DEFAULT_DIFFUSION_DT,
    cap: int = DEFAULT_CAP,
    block_size: Optional[int] = None,
    triplet: Optional[spectral.EigenTriplet] = None,
) -> ReplicaBatch:
    """
    Simulate ``n_reps`` replicas and record total size, ⟨φ, X_t⟩ and
    ⟨f, X_t⟩ on ``t_grid``. Replicas are merged by index.
    """
    if method not in ("direct", "spine"):
        raise DomainError(f"Unknown simulation method '{method}'")
    if n_reps < 1:
        raise DomainError("n_reps must be positive")
    t_obs = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_obs) < 0) or np.any(t_obs < 0):
        raise DomainError("Observation times must be non-negative and increasing")
    threads = max(1, int(threads))

    if isinstance(model, MultiTypeGW):
        trip = triplet or spectral.model_triplet(model, critical=True)
        f = trip.phi if f_dir is None else np.broadcast_to(np.asarray(f_dir, dtype=float), (model.n,))
        if method == "spine":
            x0 = _start_type(model, init)
            counts0, spine0, phi_x0 = np.zeros(model.n, dtype=np.int64), x0, float(trip.phi[x0])
        else:
            counts0, spine0 = _as_counts(model, init), None
            phi_x0 = float(counts0 @ trip.phi)
        block = block_size or max(1, math.ceil(n_reps / (4 * threads)))

        def work(indices):
            return _gw_replicas(model, counts0, spine0, t_obs, seed, indices, cap, trip, f)

        stream_block = 1
    elif isinstance(model, BranchingDiffusion1D):
        x0 = float(init.positions[0]) if isinstance(init, PopulationState) else float(init)
        if not (0.0 < x0 < model.d):
            raise DomainError(f"x0={x0} is not inside (0, {model.d})")
        f = model.eigenfunction if f_dir is None else f_dir
        phi_x0 = float(model.eigenfunction(x0))
        block = block_size or DIFFUSION_BLOCK

        def work(indices):
            rng = substream(seed, indices.start // block)
            return _diffusion_block(model, x0, t_obs, dt, rng, len(indices), cap, f, method == "spine")

        stream_block = block
    else:
        raise DomainError(f"No particle simulation for {model.kind}")

    chunks = _chunks(n_reps, block)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        parts = list(executor.map(work, chunks))
    return ReplicaBatch(
        n_reps=n_reps,
        seed=seed,
        method=method,
        t_grid=t_obs,
        block_size=stream_block,
        results=PathSummary.concatenate(parts),
        phi_x0=phi_x0,
    )


def _start_type(model: MultiTypeGW, init) -> int:
    if isinstance(init, PopulationState):
        if init.total != 1:
            raise DomainError("The spine starts from a single particle")
        return int(np.argmax(init.counts))
    init = np.asarray(init)
    if init.ndim == 0:
        return int(init)
    if init.sum() != 1:
        raise DomainError("The spine starts from a single particle")
    return int(np.argmax(init))


@dataclass(frozen=True)
class SurvivalTable:
    method: str
    t: np.ndarray
    p_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    std_err: np.ndarray
    n_effective: np.ndarray
    n_censored: np.ndarray

    columns = ("t", "p_hat", "ci_lo", "ci_hi", "std_err", "n_effective", "n_censored")

    def rows(self) -> List[list]:
        return [
            [float(self.t[i]), float(self.p_hat[i]), float(self.ci_lo[i]), float(self.ci_hi[i]),
             float(self.std_err[i]), int(self.n_effective[i]), int(self.n_censored[i])]
            for i in range(self.t.size)
        ]

    @property
    def relative_error(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.std_err / self.p_hat


def _wilson(successes: int, trials: int):
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=CONFIDENCE, method="wilson")
    return ci.low, ci.high


def _bootstrap(samples: np.ndarray, seed: int):
    if np.all(samples == samples[0]):
        return float(samples[0]), float(samples[0])
    result = stats.bootstrap(
        (samples,),
        np.mean,
        confidence_level=CONFIDENCE,
        n_resamples=BOOTSTRAP_RESAMPLES,
        method="percentile",
        batch=50,
        rng=substream(seed, 2**62),
    )
    return float(result.confidence_interval.low), float(result.confidence_interval.high)


def survival_from_batch(batch: ReplicaBatch) -> SurvivalTable:
    res = batch.results
    m = batch.t_grid.size
    p_hat, lo, hi, se, n_eff = (np.zeros(m) for _ in range(5))
    for j in range(m):
        censored = res.censored[:, j]
        if batch.method == "direct":
            kept = ~censored
            if not kept.any():
                raise InsufficientReplicas(f"Every replica was censored by t={batch.t_grid[j]:.6g}")
            # censored populations are counted as surviving
            survivors = int(np.sum(res.total[kept, j] > 0)) + int(censored.sum())
            trials = batch.n_reps
            p = survivors / trials
            p_hat[j] = p
            lo[j], hi[j] = _wilson(survivors, trials)
            se[j] = math.sqrt(max(p * (1.0 - p), 0.0) / trials)
            n_eff[j] = int(kept.sum())
        else:
            if censored.all():
                raise InsufficientReplicas(f"Every replica was censored by t={batch.t_grid[j]:.6g}")
            weights = np.where(censored, 0.0, batch.phi_x0 / np.where(censored, 1.0, res.phi_mass[:, j]))
            p_hat[j] = float(weights.mean())
            se[j] = float(weights.std(ddof=1) / math.sqrt(weights.size)) if weights.size > 1 else 0.0
            lo[j], hi[j] = _bootstrap(weights, batch.seed + j)
            n_eff[j] = int((~censored).sum())
    return SurvivalTable(batch.method, batch.t_grid, p_hat, lo, hi, se, n_eff, batch.n_censored)


def estimate_survival(
    model,
    init,
    t_grid,
    n_reps: int,
    method: str = "direct",
    seed: int = 0,
    threads: int = 1,
    **kwargs,
) -> SurvivalTable:
    """P_{init}(ζ > t) on ``t_grid`` from the direct or the spine measure."""
    if n_reps < MIN_REPLICAS:
        raise DomainError(f"n_reps must be at least {MIN_REPLICAS}")
    batch = run_replicas(model, init, t_grid, n_reps, method, seed, threads, **kwargs)
    return survival_from_batch(batch)


@dataclass(frozen=True)
class LaplaceTable:
    method: str
    t: float
    theta: np.ndarray
    lf_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    std_err: np.ndarray
    n_survivors: int

    columns = ("theta", "lf_hat", "ci_lo", "ci_hi", "std_err")

    def rows(self) -> List[list]:
        return [
            [float(self.theta[i]), float(self.lf_hat[i]), float(self.ci_lo[i]), float(self.ci_hi[i]), float(self.std_err[i])]
            for i in range(self.theta.size)
        ]


def _ratio_estimate(numerator: np.ndarray, denominator: np.ndarray):
    """Ratio of means with its delta-method standard error."""
    n = numerator.size
    mean_a, mean_b = numerator.mean(), denominator.mean()
    ratio = mean_a / mean_b
    if n < 2:
        return ratio, 0.0
    cov = np.cov(numerator, denominator, ddof=1)
    variance = (cov[0, 0] - 2.0 * ratio * cov[0, 1] + ratio**2 * cov[1, 1]) / (n * mean_b**2)
    return ratio, math.sqrt(max(variance, 0.0))


def conditional_laplace(
    model,
    init,
    t: float,
    theta_grid,
    f_dir,
    a_t: float,
    n_reps: int,
    seed: int = 0,
    threads: int = 1,
    method: str = "direct",
    **kwargs,
) -> LaplaceTable:
    """E[exp(-θ a_t ⟨f, X_t⟩) | ζ > t] over ``theta_grid``."""
    batch = run_replicas(model, init, [t], n_reps, method, seed, threads, f_dir=f_dir, **kwargs)
    return laplace_from_batch(batch, theta_grid, a_t)


def laplace_from_batch(batch: ReplicaBatch, theta_grid, a_t: float) -> LaplaceTable:
    res = batch.results
    theta = np.atleast_1d(np.asarray(theta_grid, dtype=float))
    kept = ~res.censored[:, -1]
    f_mass = res.f_mass[kept, -1]
    if batch.method == "direct":
        alive = (res.total[kept, -1] > 0).astype(float)
        weights = alive
        survivors = int(alive.sum())
    else:
        weights = batch.phi_x0 / res.phi_mass[kept, -1]
        survivors = int(kept.sum())
    if survivors < MIN_SURVIVORS:
        raise InsufficientReplicas(f"Only {survivors} surviving replicas; need {MIN_SURVIVORS}")

    z = stats.norm.ppf(0.5 + CONFIDENCE / 2.0)
    lf, lo, hi, se = (np.zeros(theta.size) for _ in range(4))
    for i, th in enumerate(theta):
        if th == 0:
            lf[i] = lo[i] = hi[i] = 1.0
            continue
        numerator = weights * np.exp(-th * a_t * f_mass)
        lf[i], se[i] = _ratio_estimate(numerator, weights)
        lo[i], hi[i] = lf[i] - z * se[i], lf[i] + z * se[i]
    return LaplaceTable(batch.method, float(batch.t_grid[-1]), theta, lf, lo, hi, se, survivors)


@dataclass(frozen=True)
class MeanCheck:
    t: np.ndarray
    observed: np.ndarray
    expected: np.ndarray
    std_err: np.ndarray

    @property
    def z_scores(self) -> np.ndarray:
        diff = self.observed - self.expected
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.std_err > 0, diff / self.std_err, np.where(diff == 0, 0.0, np.inf))
        return np.abs(z)

    def passed(self, sigmas: float = 3.0) -> bool:
        return bool(np.all(self.z_scores <= sigmas))


def martingale_check(batch: ReplicaBatch) -> MeanCheck:
    """Mean of ⟨φ, X_t⟩ under P against φ(x0) (censored replicas dropped)."""
    if batch.method != "direct":
        raise DomainError("The φ-martingale is checked on direct replicas")
    res = batch.results
    observed, se = np.zeros(batch.t_grid.size), np.zeros(batch.t_grid.size)
    for j in range(batch.t_grid.size):
        values = res.phi_mass[~res.censored[:, j], j]
        observed[j] = values.mean()
        se[j] = values.std(ddof=1) / math.sqrt(values.size) if values.size > 1 else 0.0
    return MeanCheck(batch.t_grid, observed, np.full(batch.t_grid.size, batch.phi_x0), se)


def change_of_measure_check(direct: ReplicaBatch, spine: ReplicaBatch, max_size: int = 10) -> MeanCheck:
    """
    mean_P[F(X_t)] against φ(x0) mean_{P^φ}[F(X_t) / ⟨φ, X_t⟩] for the
    indicator F = 1{1 <= N_t <= max_size}.
    """
    if direct.method != "direct" or spine.method != "spine":
        raise DomainError("Need one direct and one spine batch")
    if not np.array_equal(direct.t_grid, spine.t_grid):
        raise DomainError("Batches must share the observation grid")
    m = direct.t_grid.size
    observed, expected, se = np.zeros(m), np.zeros(m), np.zeros(m)
    for j in range(m):
        d_total = direct.results.total[~direct.results.censored[:, j], j]
        indicator = ((d_total >= 1) & (d_total <= max_size)).astype(float)
        s_keep = ~spine.results.censored[:, j]
        s_total = spine.results.total[s_keep, j]
        s_values = ((s_total >= 1) & (s_total <= max_size)) * spine.phi_x0 / spine.results.phi_mass[s_keep, j]
        observed[j] = indicator.mean()
        expected[j] = s_values.mean()
        se[j] = math.sqrt(indicator.var(ddof=1) / indicator.size + s_values.var(ddof=1) / s_values.size)
    return MeanCheck(direct.t_grid, observed, expected, se)
