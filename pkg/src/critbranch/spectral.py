"""
Mean semigroup T_t = exp(tL) of a finite (or discretised) type space.

eigen_triplet finds (λ, φ, φ̃) with Lφ = λφ, φ̃ᵀL = λφ̃ᵀ, normalised so that
max φ = 1 and ⟨φ, φ̃⟩ = 1. delta_profile evaluates the ergodicity gap Δ_t
exactly: for finite types the supremum over non-negative f is attained at
the unit vectors, so Δ_t = max_ij |M_ij(t) / (φ_i φ̃_j) - 1|.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.sparse import csgraph, csr_matrix

from critbranch.utils.exceptions import DomainError, NonConvergence, NotCritical, NotIrreducible

CRITICAL_TOL = 1e-9
EIGEN_TOL = 1e-12
MAX_ITER = 10_000
SQUARE_EVERY = 50


@dataclass(frozen=True)
class EigenTriplet:
    eigenvalue: float
    phi: np.ndarray
    phi_tilde: np.ndarray

    @property
    def total_mass(self) -> float:
        """⟨1, φ̃⟩."""
        return float(self.phi_tilde.sum())

    def is_critical(self, tol: float = CRITICAL_TOL) -> bool:
        return abs(self.eigenvalue) <= tol

    def require_critical(self, tol: float = CRITICAL_TOL) -> "EigenTriplet":
        if not self.is_critical(tol):
            raise NotCritical(
                f"Leading eigenvalue {self.eigenvalue:.3e} is not zero (tolerance {tol:g})",
                eigenvalue=self.eigenvalue,
            )
        return self

    def pair(self, f) -> float:
        """⟨f, φ̃⟩."""
        return float(self.phi_tilde @ np.asarray(f, dtype=float))


@dataclass(frozen=True)
class DeltaProfile:
    t_grid: np.ndarray
    delta_values: np.ndarray

    @property
    def delta_sup(self) -> float:
        return float(np.max(self.delta_values))

    def decays_after(self, burn_in: float, slack: float = 1e-12) -> bool:
        """Δ_t non-increasing on t >= burn_in."""
        tail = self.delta_values[self.t_grid >= burn_in]
        return bool(np.all(np.diff(tail) <= slack))


def principal_eigenvalue_1d(d: float, mesh: Optional[int] = None) -> float:
    """
    λ_1 of -½Δ on (0, d) with Dirichlet data; on a uniform mesh of ``mesh``
    intervals the discrete value (2/h²) sin²(πh/(2d)).
    """
    if mesh is None:
        return math.pi**2 / (2.0 * d**2)
    return discrete_principal_eigenvalue(d, mesh)


def discrete_principal_eigenvalue(d: float, mesh: int) -> float:
    h = d / mesh
    return 2.0 / h**2 * math.sin(math.pi * h / (2.0 * d)) ** 2


def generator_L(model) -> np.ndarray:
    L = np.atleast_2d(np.asarray(model.generator(), dtype=float))
    if L.shape[0] != L.shape[1]:
        raise DomainError("Mean generator must be square")
    return L


def motion_generator(model) -> np.ndarray:
    """The killed Brownian part ½Δ_h of a branching diffusion."""
    if not hasattr(model, "motion_generator"):
        raise DomainError(f"{model.kind} has no spatial motion")
    return model.motion_generator()


def is_irreducible(L) -> bool:
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n = L.shape[0]
    if n == 1:
        return True
    access = (L > 0) & ~np.eye(n, dtype=bool)
    count, _ = csgraph.connected_components(csr_matrix(access), directed=True, connection="strong")
    return count == 1


def _upper_bound(L: np.ndarray) -> float:
    off = np.abs(L - np.diag(np.diag(L))).sum(axis=1)
    return float(np.max(np.diag(L) + off))


def _power_iterate(E: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    v = np.ones(E.shape[0])
    for iteration in range(1, max_iter + 1):
        w = E @ v
        w = w / np.max(np.abs(w))
        if np.max(np.abs(w - v)) < tol:
            return w
        v = w
        if iteration % SQUARE_EVERY == 0:
            E = E @ E
            E = E / np.max(np.abs(E))
    raise NonConvergence(f"Power iteration did not converge in {max_iter} iterations")


def eigen_triplet(L, tau: float = 1.0, tol: float = EIGEN_TOL, max_iter: int = MAX_ITER) -> EigenTriplet:
    """
    Leading eigen-triplet of an irreducible generator by power iteration on
    exp(τ(L - sI)); the shift s bounds the spectrum from above. Symmetric
    generators go through ``linalg.eigh`` directly.
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if not is_irreducible(L):
        raise NotIrreducible("Off-diagonal access graph of L is not strongly connected")
    n = L.shape[0]
    if n == 1:
        return EigenTriplet(float(L[0, 0]), np.ones(1), np.ones(1))

    if np.array_equal(L, L.T):
        values, vectors = linalg.eigh(L)
        phi = np.abs(vectors[:, -1])
        phi_tilde = phi.copy()
    else:
        E = linalg.expm(tau * (L - _upper_bound(L) * np.eye(n)))
        phi = _power_iterate(E, tol, max_iter)
        phi_tilde = _power_iterate(E.T.copy(), tol, max_iter)

    if np.any(phi <= 0) or np.any(phi_tilde <= 0):
        raise NotIrreducible("Leading eigenvectors are not strictly positive")
    phi = phi / np.max(phi)
    phi_tilde = phi_tilde / (phi_tilde @ phi)
    eigenvalue = float(phi_tilde @ L @ phi / (phi_tilde @ phi))
    return EigenTriplet(eigenvalue=eigenvalue, phi=phi, phi_tilde=phi_tilde)


def model_triplet(model, critical: bool = False) -> EigenTriplet:
    triplet = eigen_triplet(generator_L(model))
    return triplet.require_critical() if critical else triplet


def delta_profile(L, triplet: EigenTriplet, t_grid) -> DeltaProfile:
    triplet.require_critical()
    L = np.atleast_2d(np.asarray(L, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    scale = np.outer(triplet.phi, triplet.phi_tilde)
    values = np.array([np.max(np.abs(linalg.expm(t * L) / scale - 1.0)) for t in t_grid])
    return DeltaProfile(t_grid=t_grid, delta_values=values)


def semigroup_residual(L, triplet: EigenTriplet, t_grid) -> float:
    """max_t max(‖exp(tL)φ - e^{λt}φ‖, ‖φ̃ᵀexp(tL) - e^{λt}φ̃ᵀ‖)."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    worst = 0.0
    for t in np.asarray(t_grid, dtype=float):
        M = linalg.expm(t * L)
        growth = math.exp(triplet.eigenvalue * t)
        worst = max(
            worst,
            float(np.max(np.abs(M @ triplet.phi - growth * triplet.phi))),
            float(np.max(np.abs(triplet.phi_tilde @ M - growth * triplet.phi_tilde))),
        )
    return worst


def spectral_gap(L) -> float:
    """λ_1 - Re λ_2 of the generator."""
    values = np.sort(np.real(linalg.eigvals(np.atleast_2d(L))))[::-1]
    if values.size < 2:
        raise DomainError("Spectral gap needs at least two types")
    return float(values[0] - values[1])


def export_triplet_csv(triplet: EigenTriplet, path: Path, grid=None) -> Path:
    points = np.arange(triplet.phi.size) if grid is None else np.asarray(grid)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x" if grid is not None else "type", "phi", "phi_tilde"])
        for x, p, q in zip(points, triplet.phi, triplet.phi_tilde):
            writer.writerow([x, repr(float(p)), repr(float(q))])
        f.write(f"# eigenvalue={triplet.eigenvalue!r}\n")
    return path
