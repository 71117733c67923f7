"""
Regular variation toolkit.

Slowly varying functions are represented by a small closed family plus a
tabulated form. A function is either slowly varying at 0 (the ``ℓ`` of the
branching functional, evaluated on x -> 0) or at infinity (the ``L`` whose
Bruijn conjugate normalises the survival probability).

    ⟨A[xφ], φ̃⟩ = x^{1+α} ℓ(x)          as x -> 0
    L(s)       = (α ℓ(1/s))^{-1/α}       slowly varying at infinity
    L(t L*(t)) L*(t) -> 1                 Bruijn conjugate
    a_t ~ t^{-1/α} / L*(t^{1/α})
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from critbranch.utils.exceptions import DomainError, NonConvergence

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


class SlowlyVaryingKind(str, Enum):
    CONSTANT = "constant"
    LOG_POWER = "log-power"
    ITER_LOG = "iter-log"
    TABULATED = "tabulated"


class Limit(str, Enum):
    ZERO = "zero"
    INFINITY = "infinity"


@dataclass(frozen=True)
class TailIndex:
    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise DomainError(
                f"Tail index must lie in (0, 1], got {self.alpha} "
                "(alpha = 0 needs a different normalisation)"
            )

    @classmethod
    def coerce(cls, value: "TailIndex | float") -> "TailIndex":
        return value if isinstance(value, TailIndex) else cls(float(value))


@dataclass(frozen=True)
class SlowlyVarying:
    """
    Positive function slowly varying at 0 or at infinity.

    ``LOG_POWER`` is ``c * log(1/x)^p`` at zero and ``c * log(x)^p`` at
    infinity; ``ITER_LOG`` is ``c * log(log(1/x))`` (resp. ``c * log(log x))``).
    ``TABULATED`` interpolates log-log between grid points and extends flat
    beyond the grid.
    """

    kind: SlowlyVaryingKind = SlowlyVaryingKind.CONSTANT
    c: float = 1.0
    p: float = 0.0
    at: Limit = Limit.ZERO
    x_max: float = np.inf
    grid: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    values: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.c <= 0:
            raise DomainError(f"Slowly varying coefficient must be positive, got {self.c}")
        if self.kind is SlowlyVaryingKind.TABULATED:
            if self.grid is None or self.values is None:
                raise DomainError("Tabulated slowly varying function needs grid and values")
            grid = np.asarray(self.grid, dtype=float)
            values = np.asarray(self.values, dtype=float)
            if grid.shape != values.shape or grid.size < 2:
                raise DomainError("Tabulated grid and values must match and hold 2+ points")
            if np.any(grid <= 0) or np.any(values <= 0):
                raise DomainError("Tabulated slowly varying function must be positive")
            order = np.argsort(grid)
            object.__setattr__(self, "grid", grid[order])
            object.__setattr__(self, "values", values[order])

    @classmethod
    def constant(cls, c: float, at: Limit = Limit.ZERO) -> "SlowlyVarying":
        return cls(SlowlyVaryingKind.CONSTANT, c=c, at=at)

    @classmethod
    def log_power(cls, p: float, c: float = 1.0, at: Limit = Limit.ZERO) -> "SlowlyVarying":
        return cls(SlowlyVaryingKind.LOG_POWER, c=c, p=p, at=at)

    @classmethod
    def iter_log(cls, c: float = 1.0, at: Limit = Limit.ZERO) -> "SlowlyVarying":
        return cls(SlowlyVaryingKind.ITER_LOG, c=c, at=at)

    @classmethod
    def tabulated(cls, grid, values, at: Limit = Limit.ZERO) -> "SlowlyVarying":
        return cls(
            SlowlyVaryingKind.TABULATED,
            at=at,
            grid=np.asarray(grid, dtype=float),
            values=np.asarray(values, dtype=float),
        )

    @property
    def asymptotic_only(self) -> bool:
        return self.kind is SlowlyVaryingKind.TABULATED

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0) or np.any(x > self.x_max):
            raise DomainError(f"Slowly varying function evaluated outside (0, {self.x_max}]")
        if self.kind is SlowlyVaryingKind.CONSTANT:
            out = np.full_like(x, self.c)
        elif self.kind is SlowlyVaryingKind.LOG_POWER:
            out = self.c * self._log(x) ** self.p
        elif self.kind is SlowlyVaryingKind.ITER_LOG:
            out = self.c * np.log(self._log(x))
        else:
            out = np.exp(np.interp(np.log(x), np.log(self.grid), np.log(self.values)))
        if np.any(~(out > 0)):
            raise DomainError(f"{self.kind.value} slowly varying function is not positive here")
        return out

    def _log(self, x):
        return np.log(1.0 / x) if self.at is Limit.ZERO else np.log(x)

    def variation_ratio(self, scale: float, x) -> np.ndarray:
        """|ℓ(cx)/ℓ(x) - 1| along ``x``; tends to 0 for a slowly varying ℓ."""
        x = np.asarray(x, dtype=float)
        return np.abs(self(scale * x) / self(x) - 1.0)


@dataclass(frozen=True)
class ConjugatePair:
    L: Callable
    Lstar: SlowlyVarying
    t_grid: np.ndarray
    residuals: np.ndarray
    iterations: int

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))


def conjugand(alpha: "TailIndex | float", ell: SlowlyVarying) -> Callable:
    """The function s -> (α ℓ(1/s))^{-1/α}, slowly varying at infinity."""
    a = TailIndex.coerce(alpha).alpha

    def L(s):
        return (a * ell(1.0 / np.asarray(s, dtype=float))) ** (-1.0 / a)

    return L


def bruijn_conjugate(
    L: Callable,
    t_grid,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ConjugatePair:
    """
    Pointwise fixed point L*_{n+1}(t) = 1 / L(t L*_n(t)) from L*_0 = 1, stopped
    once |L(t L*(t)) L*(t) - 1| < tol at every grid point.
    """
    if tol <= 0:
        raise DomainError("Tolerance must be positive")
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t <= 0):
        raise DomainError("Conjugate grid must be positive")

    x = np.ones_like(t)
    iterations = 0
    while True:
        Lval = np.asarray(L(t * x), dtype=float)
        if np.any(~(Lval > 0)):
            raise DomainError("L evaluated non-positive on the induced grid")
        residuals = np.abs(Lval * x - 1.0)
        if np.all(residuals < tol):
            break
        if iterations >= max_iter:
            worst = int(np.argmax(residuals))
            raise NonConvergence(
                f"Bruijn conjugate did not converge at t={t[worst]:.6g} "
                f"(residual {residuals[worst]:.3e} after {max_iter} iterations)"
            )
        x = 1.0 / Lval
        iterations += 1

    Lstar = SlowlyVarying.tabulated(t, x, at=Limit.INFINITY) if t.size > 1 else (
        SlowlyVarying.constant(float(x[0]), at=Limit.INFINITY)
    )
    return ConjugatePair(L=L, Lstar=Lstar, t_grid=t, residuals=residuals, iterations=iterations)


def conjugate_values(alpha, ell: SlowlyVarying, s, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """L*(s) of the conjugand of (α, ℓ) at the points ``s`` (no tabulation)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    x = np.ones_like(s)
    L = conjugand(alpha, ell)
    for _ in range(max_iter + 1):
        Lval = L(s * x)
        if np.any(~(Lval > 0)):
            raise DomainError("L evaluated non-positive on the induced grid")
        if np.all(np.abs(Lval * x - 1.0) < tol):
            return x
        x = 1.0 / Lval
    raise NonConvergence(f"Bruijn conjugate did not converge within {max_iter} iterations")


def survival_asymptote(
    alpha: "TailIndex | float",
    ell: SlowlyVarying,
    t,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """t^{-1/α} ℓ̃(t) with ℓ̃(t) = 1 / L*(t^{1/α})."""
    a = TailIndex.coerce(alpha).alpha
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise DomainError("Survival asymptote needs t > 0")
    s = np.atleast_1d(t_arr) ** (1.0 / a)
    ell_tilde = 1.0 / conjugate_values(a, ell, s, tol=tol, max_iter=max_iter)
    out = np.atleast_1d(t_arr) ** (-1.0 / a) * ell_tilde
    return float(out[0]) if t_arr.ndim == 0 else out.reshape(t_arr.shape)


def invert_at(
    alpha: "TailIndex | float",
    ell: SlowlyVarying,
    a,
    a0: float = 1.0,
    exact: bool = False,
):
    """
    Time R(a) at which the φ̃-averaged survival functional reaches ``a``.

    The default is the asymptotic form 1/(α a^α ℓ(a)); ``exact=True``
    integrates R(a) = ∫_a^{a0} u^{-(1+α)} / ℓ(u) du.
    """
    alpha_value = TailIndex.coerce(alpha).alpha
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr <= 0) or np.any(a_arr >= a0):
        raise DomainError(f"invert_at needs a in (0, {a0})")

    if not exact:
        out = 1.0 / (alpha_value * a_arr**alpha_value * ell(a_arr))
        return float(out) if a_arr.ndim == 0 else out

    def integrand(u):
        return u ** (-1.0 - alpha_value) / float(ell(u))

    def one(r):
        # split at decades: the integrand spans many orders of magnitude
        edges = np.geomspace(r, a0, max(2, int(np.ceil(np.log10(a0 / r))) + 1))
        return sum(
            integrate.quad(integrand, lo, hi, limit=200)[0]
            for lo, hi in zip(edges[:-1], edges[1:])
        )

    out = np.vectorize(one)(a_arr)
    return float(out) if a_arr.ndim == 0 else out
