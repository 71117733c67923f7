import numpy as np
import pytest

from critbranch import spectral
from critbranch.models import BranchingDiffusion1D, FiniteOffspring, StableCSBP
from critbranch.utils.exceptions import DomainError, NotCritical, NotIrreducible

SYMMETRIC = np.array([[-1.0, 1.0], [1.0, -1.0]])


class TestEigenTriplet:
    def test_symmetric_two_type(self):
        """L = [[-1, 1], [1, -1]] has λ = 0, φ = (1, 1), φ̃ = (½, ½)."""
        triplet = spectral.eigen_triplet(SYMMETRIC)
        assert triplet.eigenvalue == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(triplet.phi, [1.0, 1.0])
        np.testing.assert_allclose(triplet.phi_tilde, [0.5, 0.5])
        assert triplet.is_critical()

    def test_non_symmetric(self):
        """Power iteration finds the Perron pair of a non-symmetric generator."""
        L = np.array([[-2.0, 2.0, 0.0], [0.0, -1.0, 1.0], [3.0, 0.0, -3.0]])
        triplet = spectral.eigen_triplet(L)
        np.testing.assert_allclose(L @ triplet.phi, triplet.eigenvalue * triplet.phi, atol=1e-9)
        np.testing.assert_allclose(triplet.phi_tilde @ L, triplet.eigenvalue * triplet.phi_tilde, atol=1e-9)
        assert triplet.phi.max() == pytest.approx(1.0)
        assert triplet.phi_tilde @ triplet.phi == pytest.approx(1.0)
        assert np.all(triplet.phi > 0) and np.all(triplet.phi_tilde > 0)

    def test_agrees_with_dense_eigenvalues(self):
        """The leading eigenvalue matches the largest real part from eigvals."""
        L = np.array([[-1.5, 0.5, 0.7], [0.2, -0.4, 0.1], [0.9, 0.3, -2.0]])
        triplet = spectral.eigen_triplet(L)
        assert triplet.eigenvalue == pytest.approx(np.max(np.linalg.eigvals(L).real), abs=1e-10)

    def test_reducible(self):
        """A block-triangular generator is refused."""
        with pytest.raises(NotIrreducible):
            spectral.eigen_triplet(np.array([[-1.0, 1.0], [0.0, -1.0]]))

    def test_single_type(self):
        """One type: φ = φ̃ = 1."""
        triplet = spectral.eigen_triplet(np.zeros((1, 1)))
        assert triplet.eigenvalue == 0.0
        assert triplet.total_mass == 1.0

    def test_require_critical(self):
        """A non-zero eigenvalue fails require_critical."""
        with pytest.raises(NotCritical):
            spectral.eigen_triplet(SYMMETRIC + 0.1 * np.eye(2)).require_critical()

    def test_pair(self):
        """pair(f) = ⟨f, φ̃⟩."""
        triplet = spectral.eigen_triplet(SYMMETRIC)
        assert triplet.pair([2.0, 4.0]) == pytest.approx(3.0)

    def test_model_triplet(self):
        """model_triplet works from the model's own generator."""
        triplet = spectral.model_triplet(StableCSBP(kappa=1.0, alpha=0.5), critical=True)
        assert triplet.eigenvalue == 0.0


class TestDeltaProfile:
    def test_symmetric_decay(self):
        """Δ_t = e^{-2t} for the symmetric two-type generator."""
        t = np.array([0.1, 0.5, 1.0, 3.0])
        profile = spectral.delta_profile(SYMMETRIC, spectral.eigen_triplet(SYMMETRIC), t)
        np.testing.assert_allclose(profile.delta_values, np.exp(-2.0 * t), atol=1e-10)
        assert profile.delta_sup == pytest.approx(np.exp(-0.2), abs=1e-10)
        assert profile.decays_after(0.0)

    def test_needs_critical(self):
        """The gap is only defined at criticality."""
        L = SYMMETRIC + 0.1 * np.eye(2)
        with pytest.raises(NotCritical):
            spectral.delta_profile(L, spectral.eigen_triplet(L), [1.0])

    def test_semigroup_residual(self):
        """exp(tL) fixes φ and φ̃ up to round-off."""
        triplet = spectral.eigen_triplet(SYMMETRIC)
        assert spectral.semigroup_residual(SYMMETRIC, triplet, [0.5, 2.0, 10.0]) < 1e-10

    def test_spectral_gap(self):
        """The symmetric generator has eigenvalues 0 and -2."""
        assert spectral.spectral_gap(SYMMETRIC) == pytest.approx(2.0)
        with pytest.raises(DomainError):
            spectral.spectral_gap(np.zeros((1, 1)))


class TestDiffusionSpectrum:
    def test_discrete_eigenvalue_converges(self):
        """Halving the mesh cuts the eigenvalue error about fourfold."""
        exact = spectral.principal_eigenvalue_1d(1.0)
        errors = [abs(spectral.principal_eigenvalue_1d(1.0, mesh) - exact) for mesh in (50, 100, 200)]
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.01)
        assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.01)

    def test_eigenfunction_on_mesh(self):
        """The discrete principal eigenvector is sin(πx/d) at the nodes."""
        model = BranchingDiffusion1D(d=1.0, offspring=FiniteOffspring.deterministic(2), mesh=64)
        triplet = spectral.eigen_triplet(spectral.generator_L(model))
        np.testing.assert_allclose(triplet.phi, np.sin(np.pi * model.grid), atol=1e-8)

    def test_motion_generator_for_superprocess(self):
        """Superprocesses have no spatial motion."""
        with pytest.raises(DomainError):
            spectral.motion_generator(StableCSBP(kappa=1.0, alpha=0.5))

    def test_export_triplet_csv(self, tmp_path):
        """Rows carry the type index and the eigenvalue is appended."""
        path = spectral.export_triplet_csv(spectral.eigen_triplet(SYMMETRIC), tmp_path / "triplet.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "type,phi,phi_tilde"
        assert len(lines) == 4
        assert lines[-1].startswith("# eigenvalue=")
