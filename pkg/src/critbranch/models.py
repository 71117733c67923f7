"""
Process definitions and their branching functionals.

Five concrete models are supported:

    gw               single-type continuous-time Galton-Watson (1-type MultiTypeGW)
    multitype-gw     finitely many types, offspring count law x type displacement
    diffusion        Brownian particles on (0, d), killed at the boundary
    stable-csbp      ψ(λ) = c λ² + κ λ^{1+α}
    multitype-csbp   finite-type superprocess with stable Lévy tails and
                     non-local jumps u π_i

Particle models expose G and A, superprocesses expose J. All evaluations are
exact (generating functions, closed forms or adaptive quadrature), never
sampled.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from scipy import integrate, special, stats

from critbranch import spectral
from critbranch.regvar import Limit, SlowlyVarying, TailIndex
from critbranch.utils.exceptions import (
    Diverges,
    DomainError,
    FitError,
    QuadratureError,
)

DEFAULT_K_MAX = 10**6
SUM_TOL = 1e-12
MEAN_TOL = 1e-10
RANGE_TOL = 1e-12


class OffspringLaw(Protocol):
    mean: float

    def pgf(self, s): ...

    def sample(self, rng: np.random.Generator, size=None, size_biased: bool = False): ...

    def factorial_moment_2(self) -> float: ...

    def h5_moment(self, delta: float) -> float: ...


def _power_tail(rng: np.random.Generator, k_max: int, exponent: float, size: int) -> np.ndarray:
    """
    Draws k > k_max with P(k) ∝ k^{-exponent} by rejection from a discrete
    Pareto (Zipf-type) envelope.
    """
    s = exponent - 1.0
    bound = ((k_max + 2.0) / (k_max + 1.0)) ** exponent
    out = np.empty(size, dtype=np.int64)
    filled = 0
    while filled < size:
        need = size - filled
        y = (k_max + 1.0) * rng.random(need) ** (-1.0 / s)
        k = np.floor(np.minimum(y, 2.0**62))
        envelope = -np.expm1(-s * np.log1p(1.0 / k))
        accept = rng.random(need) * bound * envelope <= s / k
        taken = k[accept].astype(np.int64)
        out[filled : filled + taken.size] = taken
        filled += taken.size
    return out


@dataclass(frozen=True)
class SlackOffspring:
    """
    Heavy-tailed offspring law with generating function

        h(s) = 1 - m(1 - s) + c (1 - s)^{1+α}

    ``m = 1`` is the critical law s + c(1-s)^{1+α}. The pmf is tabulated up
    to ``k_max``; the mass and mean beyond it are known exactly from the
    partial sums of the binomial series.
    """

    alpha: float
    c: float
    mean: float = 1.0
    k_max: int = DEFAULT_K_MAX
    pmf: np.ndarray = field(init=False, repr=False, compare=False)
    cdf: np.ndarray = field(init=False, repr=False, compare=False)
    tail_mass: float = field(init=False, repr=False, compare=False)
    tail_mean: float = field(init=False, repr=False, compare=False)
    biased_cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = TailIndex.coerce(self.alpha).alpha
        m, c = float(self.mean), float(self.c)
        if m < 1.0:
            raise DomainError(f"Slack offspring mean must be at least 1, got {m}")
        if c <= 0 or c < m - 1.0 - RANGE_TOL or c > m / (1.0 + alpha) + RANGE_TOL:
            raise DomainError(
                f"Slack coefficient c={c} gives negative probabilities; "
                f"need {max(m - 1.0, 0.0)} <= c <= {m / (1.0 + alpha)}"
            )
        if self.k_max < 2:
            raise DomainError("k_max must be at least 2")

        a = 1.0 + alpha
        pmf = np.zeros(self.k_max + 1)
        pmf[0] = max(1.0 - m + c, 0.0)
        pmf[1] = max(m - c * a, 0.0)
        ks = np.arange(2, self.k_max, dtype=float)
        # (-1)^k binom(a, k) for k >= 2 by the ratio (k - a)/(k + 1)
        coeffs = a * (a - 1.0) / 2.0 * np.concatenate(([1.0], np.cumprod((ks - a) / (ks + 1.0))))
        pmf[2:] = c * np.maximum(coeffs, 0.0)

        tail_mass = c * abs(special.binom(alpha, self.k_max))
        tail_mean = c * a * abs(special.binom(alpha - 1.0, self.k_max - 1))
        if alpha == 1.0:
            tail_mass = tail_mean = 0.0

        total = math.fsum(pmf) + tail_mass
        mean = math.fsum(np.arange(self.k_max + 1) * pmf) + tail_mean
        if abs(total - 1.0) > SUM_TOL:
            raise DomainError(f"Slack pmf does not sum to one (off by {total - 1.0:.3e})")
        if abs(mean - m) > MEAN_TOL * max(1.0, m):
            raise DomainError(f"Slack pmf mean {mean} differs from {m}")

        biased = np.arange(self.k_max + 1) * pmf / m
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "pmf", pmf)
        object.__setattr__(self, "cdf", np.cumsum(pmf))
        object.__setattr__(self, "tail_mass", tail_mass)
        object.__setattr__(self, "tail_mean", tail_mean)
        object.__setattr__(self, "biased_cdf", np.cumsum(biased))

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        return 1.0 - self.mean * (1.0 - s) + self.c * np.clip(1.0 - s, 0.0, None) ** (1.0 + self.alpha)

    @property
    def tail_constant(self) -> float:
        """p_k ~ tail_constant * k^{-(2+α)}."""
        if self.alpha == 1.0:
            return 0.0
        return self.c / abs(special.gamma(-1.0 - self.alpha))

    def sample(self, rng: np.random.Generator, size=None, size_biased: bool = False):
        n = 1 if size is None else int(np.prod(size))
        cdf = self.biased_cdf if size_biased else self.cdf
        table_mass = 1.0 - (self.tail_mean / self.mean if size_biased else self.tail_mass)
        u = rng.random(n)
        k = np.searchsorted(cdf, u, side="right").astype(np.int64)
        in_tail = u >= table_mass
        if np.any(in_tail):
            exponent = 1.0 + self.alpha if size_biased else 2.0 + self.alpha
            k[in_tail] = _power_tail(rng, self.k_max, exponent, int(in_tail.sum()))
        k = np.minimum(k, np.iinfo(np.int64).max)
        if size is None:
            return int(k[0])
        return k.reshape(size)

    def factorial_moment_2(self) -> float:
        if self.alpha < 1.0:
            raise Diverges(f"E[N(N-1)] is infinite for the Slack law with alpha={self.alpha}")
        return 2.0 * self.c

    def h5_moment(self, delta: float) -> float:
        """E[(N - 1)^δ N]; finite iff δ < α (or α = 1)."""
        if self.alpha < 1.0 and delta >= self.alpha:
            raise Diverges(
                f"E[(N-1)^delta N] diverges for delta={delta} >= alpha={self.alpha}"
            )
        ks = np.arange(self.k_max + 1, dtype=float)
        body = math.fsum(np.where(ks >= 1, (ks - 1.0) ** delta, 0.0) * ks * self.pmf)
        if self.alpha == 1.0:
            return body
        start = self.k_max + 0.5
        tail = self.tail_constant * start ** (delta - self.alpha) / (self.alpha - delta)
        return body + tail


@dataclass(frozen=True)
class FiniteOffspring:
    """Offspring law with finite support, given by its pmf (p_0, p_1, ...)."""

    probabilities: tuple

    def __post_init__(self):
        pmf = np.asarray(self.probabilities, dtype=float)
        if pmf.ndim != 1 or pmf.size == 0 or np.any(pmf < 0):
            raise DomainError("Offspring pmf must be a non-empty list of non-negative numbers")
        if abs(math.fsum(pmf) - 1.0) > SUM_TOL:
            raise DomainError(f"Offspring pmf sums to {math.fsum(pmf)}, not 1")
        object.__setattr__(self, "probabilities", tuple(float(p) for p in pmf))

    @classmethod
    def binary(cls) -> "FiniteOffspring":
        return cls((0.5, 0.0, 0.5))

    @classmethod
    def deterministic(cls, k: int) -> "FiniteOffspring":
        return cls(tuple([0.0] * k + [1.0]))

    @property
    def pmf(self) -> np.ndarray:
        return np.asarray(self.probabilities)

    @property
    def mean(self) -> float:
        return float(np.arange(self.pmf.size) @ self.pmf)

    @property
    def alpha(self) -> float:
        return 1.0

    def pgf(self, s):
        return np.polyval(self.pmf[::-1], np.asarray(s, dtype=float))

    def sample(self, rng: np.random.Generator, size=None, size_biased: bool = False):
        weights = self.pmf * np.arange(self.pmf.size) if size_biased else self.pmf
        cdf = np.cumsum(weights / weights.sum())
        n = 1 if size is None else int(np.prod(size))
        k = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), self.pmf.size - 1)
        if size is None:
            return int(k[0])
        return k.astype(np.int64).reshape(size)

    def factorial_moment_2(self) -> float:
        ks = np.arange(self.pmf.size)
        return float((ks * (ks - 1)) @ self.pmf)

    def h5_moment(self, delta: float) -> float:
        ks = np.arange(self.pmf.size, dtype=float)
        return float(np.where(ks >= 1, (ks - 1.0) ** delta, 0.0) * ks @ self.pmf)


def sample_offspring(law: OffspringLaw, rng: np.random.Generator, size=None, size_biased=False):
    return law.sample(rng, size=size, size_biased=size_biased)


def export_pmf_csv(law: OffspringLaw, path: Path, k_limit: Optional[int] = None) -> Path:
    pmf = law.pmf if k_limit is None else law.pmf[: k_limit + 1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "p_k", "k_p_k_over_mean"])
        for k, p in enumerate(pmf):
            writer.writerow([k, repr(float(p)), repr(float(k * p / law.mean))])
        tail = getattr(law, "tail_mass", 0.0)
        f.write(f"# tail_mass_beyond_table={tail!r}\n")
    return path


def _check_unit_range(g, name="g"):
    g = np.asarray(g, dtype=float)
    if np.any(g < -RANGE_TOL) or np.any(g > 1.0 + RANGE_TOL) or np.any(np.isnan(g)):
        raise DomainError(f"{name} must take values in [0, 1]")
    return np.clip(g, 0.0, 1.0)


def _broadcast(values, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        return np.full(n, float(values))
    if values.shape[0] != n:
        raise DomainError(f"Function on types has {values.shape[0]} entries, model has {n}")
    return values


@dataclass(frozen=True)
class MultiTypeGW:
    """
    Continuous-time multi-type Galton-Watson process.

    A type-i particle dies at rate beta[i] and leaves N ~ offspring[i]
    children whose types are drawn independently from row i of
    ``displacement``. Hence E_i[N_j] = E_i[N] displacement[i, j].
    """

    beta: np.ndarray
    offspring: tuple
    displacement: np.ndarray
    kind: str = field(default="multitype-gw", init=False)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        displacement = np.atleast_2d(np.asarray(self.displacement, dtype=float))
        n = beta.size
        if np.any(beta <= 0):
            raise DomainError("Branching rates beta must be positive")
        if len(self.offspring) != n:
            raise DomainError(f"Need one offspring law per type ({n}), got {len(self.offspring)}")
        if displacement.shape != (n, n) or np.any(displacement < 0):
            raise DomainError("Displacement must be a non-negative n x n matrix")
        if np.any(np.abs(displacement.sum(axis=1) - 1.0) > 1e-12):
            raise DomainError("Displacement rows must sum to one")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "displacement", displacement)
        object.__setattr__(self, "offspring", tuple(self.offspring))

    @classmethod
    def single_type(cls, beta: float, law: OffspringLaw) -> "MultiTypeGW":
        return cls(beta=np.array([beta]), offspring=(law,), displacement=np.eye(1))

    @property
    def n(self) -> int:
        return self.beta.size

    @property
    def offspring_means(self) -> np.ndarray:
        return np.array([law.mean for law in self.offspring])

    @property
    def mean_matrix(self) -> np.ndarray:
        return self.offspring_means[:, None] * self.displacement

    def generator(self) -> np.ndarray:
        return self.beta[:, None] * (self.mean_matrix - np.eye(self.n))

    def _pgf_rows(self, s: np.ndarray) -> np.ndarray:
        return np.stack([law.pgf(s[i]) for i, law in enumerate(self.offspring)])

    def G(self, g: np.ndarray) -> np.ndarray:
        mixed = self.displacement @ g
        return _scale_rows(self.beta, self._pgf_rows(mixed) - g)

    def A(self, g: np.ndarray) -> np.ndarray:
        mixed = self.displacement @ g
        body = self._pgf_rows(1.0 - mixed) - 1.0 + _scale_rows(self.offspring_means, mixed)
        return np.maximum(_scale_rows(self.beta, body), 0.0)


def _scale_rows(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    return weights.reshape((-1,) + (1,) * (values.ndim - 1)) * values


@dataclass(frozen=True)
class BranchingDiffusion1D:
    """
    Brownian particles on (0, d) killed on hitting the boundary, branching
    locally at constant rate beta. Criticality β(E[N] - 1) = π²/(2d²) is
    enforced here; leave ``beta`` unset to have it solved for.

    Deterministic solvers work on ``mesh - 1`` interior points. With
    ``grid_critical`` the rate is nudged to the discrete principal eigenvalue
    so that the discretised process is exactly critical.
    """

    d: float
    offspring: OffspringLaw
    beta: Optional[float] = None
    mesh: int = 200
    grid_critical: bool = True
    kind: str = field(default="diffusion", init=False)

    def __post_init__(self):
        if self.d <= 0:
            raise DomainError("Domain length d must be positive")
        if self.mesh < 4:
            raise DomainError("Mesh needs at least 4 intervals")
        excess = self.offspring.mean - 1.0
        if excess <= 0:
            raise DomainError("Branching diffusion needs E[N] > 1 to balance the killing")
        target = spectral.principal_eigenvalue_1d(self.d) / excess
        if self.beta is None:
            object.__setattr__(self, "beta", target)
        elif abs(self.beta - target) > 1e-9 * target:
            raise DomainError(
                f"beta={self.beta} is not critical for d={self.d}: need beta={target:.12g}"
            )

    @property
    def grid(self) -> np.ndarray:
        h = self.d / self.mesh
        return h * np.arange(1, self.mesh)

    @property
    def h(self) -> float:
        return self.d / self.mesh

    @property
    def n(self) -> int:
        return self.mesh - 1

    @property
    def grid_beta(self) -> float:
        if not self.grid_critical:
            return self.beta
        return spectral.principal_eigenvalue_1d(self.d, self.mesh) / (self.offspring.mean - 1.0)

    def eigenfunction(self, x) -> np.ndarray:
        return np.sin(np.pi * np.asarray(x, dtype=float) / self.d)

    def motion_generator(self) -> np.ndarray:
        n = self.n
        lap = (np.diag(np.full(n - 1, 1.0), -1) - 2.0 * np.eye(n) + np.diag(np.full(n - 1, 1.0), 1))
        return lap / (2.0 * self.h**2)

    def generator(self) -> np.ndarray:
        return self.motion_generator() + self.grid_beta * (self.offspring.mean - 1.0) * np.eye(self.n)

    def G(self, g: np.ndarray) -> np.ndarray:
        return self.grid_beta * (self.offspring.pgf(g) - g)

    def A(self, g: np.ndarray) -> np.ndarray:
        body = self.offspring.pgf(1.0 - g) - 1.0 + self.offspring.mean * g
        return np.maximum(self.grid_beta * body, 0.0)


@dataclass(frozen=True)
class StableTail:
    """
    Lévy measure scale * y^{-(2+α)} dy on (cutoff, ∞).

    With cutoff 0 the Laplace exponent is the closed form
    scale * Γ(-1-α) λ^{1+α}; a positive cutoff subtracts the compensated
    integral over (0, cutoff), also in closed form.
    """

    scale: float
    alpha: float
    cutoff: float = 0.0
    quad_tol: float = 1e-10

    def __post_init__(self):
        if self.scale < 0 or self.cutoff < 0:
            raise DomainError("Lévy tail scale and cutoff must be non-negative")
        if not (0.0 < self.alpha < 1.0):
            raise DomainError("Stable Lévy tails need alpha in (0, 1); use c for alpha = 1")

    @classmethod
    def for_kappa(cls, kappa: float, alpha: float) -> "StableTail":
        """Tail whose Laplace exponent is exactly kappa λ^{1+α}."""
        return cls(scale=kappa / special.gamma(-1.0 - alpha), alpha=alpha)

    def laplace_exponent(self, lam):
        """∫ (e^{-λy} - 1 + λy) ν(dy)."""
        lam = np.asarray(lam, dtype=float)
        if self.scale == 0:
            return np.zeros_like(lam)
        full = special.gamma(-1.0 - self.alpha)
        if self.cutoff == 0:
            return self.scale * full * lam ** (1.0 + self.alpha)
        lower = _lower_compensated(lam * self.cutoff, self.alpha)
        return self.scale * lam ** (1.0 + self.alpha) * (full - lower)

    def laplace_exponent_quad(self, lam: float) -> float:
        """Same integral by adaptive quadrature."""
        if lam <= 0 or self.scale == 0:
            return 0.0
        power = -2.0 - self.alpha

        def integrand(v):
            return _compensated_exp(v) * v**power

        lower = lam * self.cutoff
        pieces = [(lower, max(lower, 1.0)), (max(lower, 1.0), np.inf)]
        total, error = 0.0, 0.0
        for lo, hi in pieces:
            if hi <= lo:
                continue
            value, err = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=self.quad_tol, limit=200)
            total += value
            error += err
        if not np.isfinite(total) or error > max(1e-8 * abs(total), 1e-300):
            raise QuadratureError(
                f"Lévy integral failed at lambda={lam} (estimate {total}, error {error})"
            )
        return self.scale * lam ** (1.0 + self.alpha) * total

    def first_moment(self) -> float:
        """∫ y ν(dy); finite only with a positive cutoff."""
        if self.scale == 0:
            return 0.0
        if self.cutoff == 0:
            raise Diverges("∫ y ν(dy) diverges at 0 without a cutoff")
        return self.scale * self.cutoff ** (-self.alpha) / self.alpha

    def upper_moment(self, power: float) -> float:
        """∫_{(1,∞)} y^{power} ν(dy)."""
        if self.scale == 0:
            return 0.0
        exponent = power - 1.0 - self.alpha
        if exponent >= 0:
            raise Diverges(f"∫_1^∞ y^{power} ν(dy) diverges for alpha={self.alpha}")
        start = max(1.0, self.cutoff)
        return self.scale * start**exponent / -exponent

    def ylogy_moment(self) -> float:
        """∫_{(1,∞)} y log y ν(dy)."""
        if self.scale == 0:
            return 0.0
        start = max(1.0, self.cutoff)
        a = self.alpha
        return self.scale * start ** (-a) * (a * math.log(start) + 1.0) / a**2

    def jump_h5_moment(self, delta: float) -> float:
        """∫ (1 ∨ u^δ) u ν(du), the non-local part of the (H5) bound."""
        if self.scale == 0:
            return 0.0
        lower = self.cutoff
        if lower == 0:
            raise Diverges("Jump kernel needs a positive cutoff")
        a = self.alpha
        below = self.scale * (lower ** (-a) - 1.0) / a if lower < 1.0 else 0.0
        return below + self.upper_moment(1.0 + delta)


def _lower_compensated(a, alpha: float):
    """∫_0^a (e^{-v} - 1 + v) v^{-(2+α)} dv, by its power series below 1 and
    through upper incomplete gamma functions above."""
    a = np.asarray(a, dtype=float)
    small = np.minimum(a, 1.0)
    series = np.zeros_like(small)
    factorial = 1.0
    for k in range(2, 30):
        factorial *= k
        series = series + (-1.0) ** k * small ** (k - 1.0 - alpha) / (factorial * (k - 1.0 - alpha))

    big = np.maximum(a, 1.0)
    upper_1 = special.gammaincc(1.0 - alpha, big) * special.gamma(1.0 - alpha)
    upper_0 = (big ** (-alpha) * np.exp(-big) - upper_1) / alpha
    upper_m1 = (big ** (-1.0 - alpha) * np.exp(-big) - upper_0) / (1.0 + alpha)
    upper = upper_m1 - big ** (-1.0 - alpha) / (1.0 + alpha) + big ** (-alpha) / alpha
    return np.where(a < 1.0, series, special.gamma(-1.0 - alpha) - upper)


def _compensated_exp(v):
    """e^{-v} - 1 + v without cancellation for small v."""
    v = np.asarray(v, dtype=float)
    small = v < 1e-3
    series = v * v * (0.5 - v / 6.0 + v * v / 24.0)
    return np.where(small, series, np.expm1(-v) + v)


@dataclass(frozen=True)
class StableCSBP:
    """Critical CSBP with ψ(λ) = c λ² + κ λ^{1+α}; c = 0 gives the stable flow."""

    kappa: float
    alpha: float
    c: float = 0.0
    kind: str = field(default="stable-csbp", init=False)

    def __post_init__(self):
        TailIndex(self.alpha)
        if self.kappa <= 0 or self.c < 0:
            raise DomainError("Stable CSBP needs kappa > 0 and c >= 0")

    @property
    def n(self) -> int:
        return 1

    @property
    def closed_form(self) -> bool:
        return self.c == 0 or self.alpha == 1.0

    @property
    def effective_kappa(self) -> float:
        return self.kappa + self.c if self.alpha == 1.0 else self.kappa

    def psi(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self.c * lam**2 + self.kappa * lam ** (1.0 + self.alpha)

    def generator(self) -> np.ndarray:
        return np.zeros((1, 1))

    def levy_tail(self) -> Optional[StableTail]:
        if self.alpha == 1.0:
            return None
        return StableTail.for_kappa(self.kappa, self.alpha)

    def J(self, h):
        return self.psi(np.maximum(h, 0.0))


@dataclass(frozen=True)
class MultiTypeCSBP:
    """
    Finite-type superprocess. Type i has local mechanism
    -b λ + c λ² + ∫(e^{-λy} - 1 + λy) nu[i](dy) and non-local branching at
    rate beta[i] that sends mass γ̃(i) + u (u ~ jumps[i]) to the types drawn
    from row i of ``pi`` (zero diagonal).
    """

    b: np.ndarray
    c: np.ndarray
    nu: tuple
    beta: np.ndarray
    gamma_tilde: np.ndarray
    jumps: tuple
    pi: np.ndarray
    kind: str = field(default="multitype-csbp", init=False)

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        n = b.size
        c = _broadcast(self.c, n)
        beta = _broadcast(self.beta, n)
        gamma_tilde = _broadcast(self.gamma_tilde, n)
        pi = np.atleast_2d(np.asarray(self.pi, dtype=float))
        nu = tuple(self.nu) if self.nu else (None,) * n
        jumps = tuple(self.jumps) if self.jumps else (None,) * n
        if np.any(c < 0) or np.any(beta < 0) or np.any(gamma_tilde < 0):
            raise DomainError("c, beta and gamma_tilde must be non-negative")
        if len(nu) != n or len(jumps) != n:
            raise DomainError("Need one Lévy tail and one jump kernel entry per type")
        if pi.shape != (n, n) or np.any(pi < 0) or np.any(np.diag(pi) != 0):
            raise DomainError("pi must be a non-negative n x n matrix with zero diagonal")
        for i in range(n):
            if beta[i] > 0 and abs(pi[i].sum() - 1.0) > 1e-12:
                raise DomainError(f"pi[{i}] must be a probability distribution")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma_tilde", gamma_tilde)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "jumps", jumps)
        transferred = self.transferred_mass
        if np.any(transferred > 1.0 + 1e-12):
            worst = int(np.argmax(transferred))
            raise DomainError(
                f"gamma_tilde + ∫ u Γ̃(du) = {transferred[worst]:.6g} > 1 for type {worst}"
            )

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def transferred_mass(self) -> np.ndarray:
        return self.gamma_tilde + np.array(
            [0.0 if kernel is None else kernel.first_moment() for kernel in self.jumps]
        )

    def generator(self) -> np.ndarray:
        return np.diag(self.b - self.beta) + (self.beta * self.transferred_mass)[:, None] * self.pi

    def J(self, h: np.ndarray) -> np.ndarray:
        h = np.maximum(np.asarray(h, dtype=float), 0.0)
        out = _scale_rows(self.c, h**2)
        mixed = self.pi @ h
        for i in range(self.n):
            if self.nu[i] is not None:
                out[i] = out[i] + self.nu[i].laplace_exponent(h[i])
            if self.jumps[i] is not None and self.beta[i] > 0:
                out[i] = out[i] + self.beta[i] * self.jumps[i].laplace_exponent(mixed[i])
        return out


Model = Union[MultiTypeGW, BranchingDiffusion1D, StableCSBP, MultiTypeCSBP]
ParticleModel = Union[MultiTypeGW, BranchingDiffusion1D]
Superprocess = Union[StableCSBP, MultiTypeCSBP]


def is_particle_model(model) -> bool:
    return isinstance(model, (MultiTypeGW, BranchingDiffusion1D))


def eval_G(model: ParticleModel, g) -> np.ndarray:
    if not is_particle_model(model):
        raise DomainError("G is defined for particle models only")
    return model.G(_check_unit_range(_broadcast(g, model.n)))


def eval_A(model: ParticleModel, g) -> np.ndarray:
    if not is_particle_model(model):
        raise DomainError("A is defined for particle models only; use eval_J")
    return model.A(_check_unit_range(_broadcast(g, model.n)))


def eval_J(model: Superprocess, h) -> np.ndarray:
    if not isinstance(model, (StableCSBP, MultiTypeCSBP)):
        raise DomainError("J is defined for superprocesses only; use eval_A")
    h = _broadcast(h, model.n)
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise DomainError("J needs a finite non-negative argument")
    return np.atleast_1d(model.J(h))


def nonlinear_term(model: Model, values: np.ndarray) -> np.ndarray:
    """A for particle models, J for superprocesses; no range checks."""
    return model.A(values) if is_particle_model(model) else np.atleast_1d(model.J(values))


def make_critical(model: Model) -> Model:
    """
    Shift a multi-type CSBP's b (or recompute a diffusion's beta) so that
    the leading eigenvalue of the mean generator is exactly zero.
    """
    if isinstance(model, MultiTypeCSBP):
        lam = spectral.eigen_triplet(model.generator()).eigenvalue
        return replace(model, b=model.b - lam)
    if isinstance(model, BranchingDiffusion1D):
        return replace(model, beta=None)
    return model


def _triplet(model: Model, triplet):
    return triplet if triplet is not None else spectral.eigen_triplet(spectral.generator_L(model))


def audit_H1(model: Model) -> float:
    """sup_i E_i[N] for particle models; superprocesses satisfy (H1) by construction."""
    if isinstance(model, MultiTypeGW):
        return float(np.max(model.offspring_means))
    if isinstance(model, BranchingDiffusion1D):
        return float(model.offspring.mean)
    return float(np.max(np.atleast_1d(getattr(model, "transferred_mass", 0.0))))


@dataclass(frozen=True)
class H4Audit:
    alpha_hat: float
    ell_hat: SlowlyVarying
    slope: float
    nonlinearity: float
    window: tuple


def h4_functional(model: Model, x_grid, triplet=None) -> np.ndarray:
    """⟨A[xφ], φ̃⟩ (or ⟨J[xφ], φ̃⟩) along ``x_grid``."""
    trip = _triplet(model, triplet)
    x_grid = np.asarray(x_grid, dtype=float)
    phi = trip.phi[:, None] * x_grid[None, :]
    if is_particle_model(model):
        values = model.A(_check_unit_range(phi, "x phi"))
    else:
        values = np.atleast_2d(model.J(phi))
    return trip.phi_tilde @ values


def audit_H4(model: Model, x_grid, triplet=None, max_nonlinearity: float = 0.25) -> H4Audit:
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.size < 3 or np.any(x_grid <= 0):
        raise FitError("H4 audit needs at least three positive grid points")
    values = h4_functional(model, x_grid, triplet)
    if np.any(values <= 0):
        raise FitError("⟨A[xφ], φ̃⟩ vanishes on the grid; (H4) cannot hold")
    log_x, log_v = np.log(x_grid), np.log(values)
    fit = stats.linregress(log_x, log_v)
    residual = log_v - (fit.intercept + fit.slope * log_x)
    nonlinearity = float(np.max(np.abs(residual)))
    if nonlinearity > max_nonlinearity:
        raise FitError(
            f"log-log profile is not linear (max residual {nonlinearity:.3g}); (H4) fails"
        )
    alpha_hat = float(fit.slope) - 1.0
    if abs(alpha_hat - 1.0) < 1e-3:
        alpha_hat = min(alpha_hat, 1.0)
    if not (0.0 < alpha_hat <= 1.0):
        raise FitError(f"Fitted tail index {alpha_hat:.4g} lies outside (0, 1]")
    ell_hat = SlowlyVarying.tabulated(x_grid, values / x_grid ** (1.0 + alpha_hat), at=Limit.ZERO)
    return H4Audit(
        alpha_hat=alpha_hat,
        ell_hat=ell_hat,
        slope=float(fit.slope),
        nonlinearity=nonlinearity,
        window=(float(x_grid.min()), float(x_grid.max())),
    )


def audit_H5(model: Model, delta: float, triplet=None, overflow: float = 1e300) -> float:
    if not (0.0 < delta < 1.0):
        raise DomainError("delta must lie in (0, 1)")
    if isinstance(model, MultiTypeGW):
        trip = _triplet(model, triplet)
        moments = np.array([law.h5_moment(delta) for law in model.offspring])
        value = float(np.max(model.beta * (model.displacement @ trip.phi) / trip.phi * moments))
    elif isinstance(model, BranchingDiffusion1D):
        value = model.grid_beta * model.offspring.h5_moment(delta)
    elif isinstance(model, StableCSBP):
        tail = model.levy_tail()
        value = 0.0 if tail is None else tail.upper_moment(1.0 + delta)
    else:
        trip = _triplet(model, triplet)
        rows = []
        for i in range(model.n):
            local = 0.0 if model.nu[i] is None else model.nu[i].upper_moment(1.0 + delta)
            jump = 0.0
            if model.jumps[i] is not None and model.beta[i] > 0:
                weight = model.beta[i] * (model.pi[i] @ trip.phi) / trip.phi[i]
                jump = weight * model.jumps[i].jump_h5_moment(delta)
            rows.append(local + jump)
        value = float(max(rows))
    if not np.isfinite(value) or value > overflow:
        raise Diverges(f"(H5) bound overflows at delta={delta}")
    return value


@dataclass(frozen=True)
class H3Audit:
    criterion: str
    value: float
    passed: bool


def audit_H3(model: Model) -> H3Audit:
    """
    Almost sure extinction. CSBPs: Grey's integral ∫_1^∞ dλ/ψ(λ). Multi-type
    CSBPs: the y log y moments of ν and Γ̃. Particle models report their
    criticality margin instead; the survival proxy lives in verify.
    """
    if isinstance(model, StableCSBP):
        if model.closed_form:
            value = 1.0 / (model.alpha * model.effective_kappa)
        else:
            value, _ = integrate.quad(lambda lam: 1.0 / float(model.psi(lam)), 1.0, np.inf)
        return H3Audit("grey-integral", float(value), bool(np.isfinite(value)))
    if isinstance(model, MultiTypeCSBP):
        total = 0.0
        for tail in (*model.nu, *model.jumps):
            if tail is not None:
                total += tail.ylogy_moment()
        return H3Audit("ylogy-moments", float(total), bool(np.isfinite(total)))
    lam = spectral.eigen_triplet(spectral.generator_L(model)).eigenvalue
    return H3Audit("criticality", float(lam), bool(lam <= spectral.CRITICAL_TOL))


def variance_constant(model: Model, triplet=None) -> float:
    """⟨½V[φ], φ̃⟩, the finite-variance (α = 1) limit of ℓ."""
    trip = _triplet(model, triplet)
    if isinstance(model, MultiTypeGW):
        second = np.array([law.factorial_moment_2() for law in model.offspring])
        values = model.beta * second * (model.displacement @ trip.phi) ** 2
    elif isinstance(model, BranchingDiffusion1D):
        values = model.grid_beta * model.offspring.factorial_moment_2() * trip.phi**2
    elif isinstance(model, StableCSBP):
        if model.alpha < 1.0:
            raise Diverges("ψ''(0+) is infinite for alpha < 1")
        values = np.array([2.0 * model.effective_kappa])
    else:
        raise Diverges("Variance functional needs finite second moments of ν and Γ̃")
    return float(0.5 * trip.phi_tilde @ values)


def default_x_grid(points: int = 9) -> np.ndarray:
    return np.geomspace(1e-2, 1e-6, points)


def describe(model: Model) -> dict:
    """Flat summary used in reports."""
    summary = {"kind": model.kind, "types": model.n}
    if isinstance(model, StableCSBP):
        summary.update(kappa=model.kappa, alpha=model.alpha, c=model.c)
    elif isinstance(model, BranchingDiffusion1D):
        summary.update(d=model.d, beta=model.beta, mesh=model.mesh)
    return summary


def tail_index(model: Model) -> Optional[float]:
    """Nominal α of the model's offspring or Lévy tails (smallest across types)."""
    if isinstance(model, MultiTypeGW):
        return float(min(law.alpha for law in model.offspring))
    if isinstance(model, BranchingDiffusion1D):
        return float(model.offspring.alpha)
    if isinstance(model, StableCSBP):
        return float(model.alpha)
    alphas: Sequence[float] = [
        tail.alpha for tail in (*model.nu, *model.jumps) if tail is not None and tail.scale > 0
    ]
    return float(min(alphas)) if alphas else 1.0
