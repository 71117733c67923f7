import numpy as np
import pytest

from critbranch import evolution, montecarlo, spectral
from critbranch.models import BranchingDiffusion1D, FiniteOffspring, MultiTypeGW, SlackOffspring, StableCSBP
from critbranch.utils.exceptions import DomainError, InsufficientReplicas, PopulationExplosion


@pytest.fixture
def binary():
    return MultiTypeGW.single_type(1.0, FiniteOffspring.binary())


@pytest.fixture
def two_type():
    law = FiniteOffspring.binary()
    return MultiTypeGW(beta=[1.0, 2.0], offspring=(law, law), displacement=[[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture
def diffusion():
    return BranchingDiffusion1D(d=1.0, offspring=FiniteOffspring.deterministic(2), mesh=50)


def binary_survival(t):
    """P(ζ > t) = 1/(1 + t/2) for binary splitting at rate one."""
    return 1.0 / (1.0 + 0.5 * np.asarray(t, dtype=float))


class TestSubstreams:
    def test_reproducible(self):
        """Equal (seed, index) pairs give equal draws."""
        a = montecarlo.substream(42, 7).random(5)
        b = montecarlo.substream(42, 7).random(5)
        np.testing.assert_array_equal(a, b)

    def test_independent_indices(self):
        """Neighbouring indices and seeds give different streams."""
        base = montecarlo.substream(42, 7).random(5)
        assert not np.array_equal(base, montecarlo.substream(42, 8).random(5))
        assert not np.array_equal(base, montecarlo.substream(43, 7).random(5))


class TestPopulationState:
    def test_counts_or_positions(self):
        """Exactly one representation must be given."""
        with pytest.raises(DomainError):
            montecarlo.PopulationState()
        with pytest.raises(DomainError):
            montecarlo.PopulationState(counts=[1], positions=[0.5])

    def test_single(self):
        """single(n, x) puts one particle on type x."""
        state = montecarlo.PopulationState.single(3, 1)
        np.testing.assert_array_equal(state.counts, [0, 1, 0])
        assert state.total == 1
        assert state.phi_weight(np.array([1.0, 0.5, 2.0])) == 0.5

    def test_negative_counts(self):
        """Counts may not be negative."""
        with pytest.raises(DomainError):
            montecarlo.PopulationState(counts=[-1, 2])

    def test_spine_state_needs_mass(self):
        """A spine state carries positive φ-mass."""
        side = montecarlo.PopulationState(counts=[0])
        with pytest.raises(DomainError):
            montecarlo.SpineState(0, side, 0.0)


class TestSinglePaths:
    def test_simulate_bmp(self, binary):
        """A single path ends extinct or alive, never negative."""
        state = montecarlo.simulate_bmp(binary, 0, 3.0, np.random.default_rng(3))
        assert state.total >= 0
        assert state.time == 3.0
        if state.is_extinct:
            assert 0.0 < state.extinction_time <= 3.0

    def test_empty_start(self, binary):
        """An empty population is extinct at time zero."""
        state = montecarlo.simulate_bmp(binary, [0], 1.0, np.random.default_rng(0))
        assert state.extinction_time == 0.0

    def test_population_cap(self):
        """Passing the cap raises PopulationExplosion."""
        model = MultiTypeGW.single_type(1.0, FiniteOffspring.deterministic(2))
        with pytest.raises(PopulationExplosion):
            montecarlo.simulate_bmp(model, 0, 50.0, np.random.default_rng(0), cap=100)

    def test_simulate_spine(self, two_type):
        """The spine never dies and its φ-mass is at least φ(spine)."""
        state = montecarlo.simulate_spine(two_type, 0, 2.0, np.random.default_rng(5))
        assert state.spine_position in (0, 1)
        assert state.phi_weight >= 1.0

    def test_branching_diffusion_stays_inside(self, diffusion):
        """Surviving particles lie in (0, d)."""
        state = montecarlo.simulate_branching_diffusion(diffusion, 0.5, 0.1, 1e-3, np.random.default_rng(1))
        assert np.all((state.positions > 0.0) & (state.positions < 1.0))

    def test_spine_diffusion_stays_inside(self, diffusion):
        """The reflected spine motion never leaves (0, d)."""
        state = montecarlo.simulate_spine_diffusion(diffusion, 0.3, 0.1, 1e-3, np.random.default_rng(2))
        assert 0.0 < state.spine_position < 1.0
        assert state.phi_weight > 0

    def test_diffusion_start_outside(self, diffusion):
        """x0 must lie inside the domain."""
        with pytest.raises(DomainError):
            montecarlo.simulate_branching_diffusion(diffusion, 1.5, 0.1, 1e-3, np.random.default_rng(0))


class TestRunReplicas:
    def test_thread_count_does_not_matter(self, two_type):
        """GW replicas are keyed by index, not by worker."""
        kwargs = dict(n_reps=200, seed=11)
        one = montecarlo.run_replicas(two_type, 0, [0.5, 2.0], threads=1, **kwargs)
        four = montecarlo.run_replicas(two_type, 0, [0.5, 2.0], threads=4, **kwargs)
        np.testing.assert_array_equal(one.results.total, four.results.total)
        np.testing.assert_array_equal(one.results.phi_mass, four.results.phi_mass)

    def test_diffusion_blocks_are_thread_independent(self, diffusion):
        """Diffusion blocks draw from per-block streams."""
        kwargs = dict(n_reps=120, seed=3, dt=1e-3, block_size=40)
        one = montecarlo.run_replicas(diffusion, 0.5, [0.05, 0.1], threads=1, **kwargs)
        three = montecarlo.run_replicas(diffusion, 0.5, [0.05, 0.1], threads=3, **kwargs)
        np.testing.assert_array_equal(one.results.phi_mass, three.results.phi_mass)
        np.testing.assert_array_equal(one.stream_offsets, [0, 40, 80])

    def test_seed_changes_results(self, two_type):
        """Different seeds give different replicas."""
        a = montecarlo.run_replicas(two_type, 0, [2.0], n_reps=200, seed=1)
        b = montecarlo.run_replicas(two_type, 0, [2.0], n_reps=200, seed=2)
        assert not np.array_equal(a.results.total, b.results.total)

    def test_observation_time_off_grid(self, diffusion):
        """Diffusion observation times must sit on the dt grid."""
        with pytest.raises(DomainError):
            montecarlo.run_replicas(diffusion, 0.5, [0.0015], n_reps=10, dt=1e-3)

    @pytest.mark.parametrize(
        "kwargs",
        [{"method": "importance"}, {"n_reps": 0}, {"t_grid": [2.0, 1.0]}],
    )
    def test_rejects_bad_arguments(self, binary, kwargs):
        """Unknown methods, empty runs and decreasing grids are refused."""
        args = {"t_grid": [1.0], "n_reps": 10, "method": "direct"}
        args.update(kwargs)
        with pytest.raises(DomainError):
            montecarlo.run_replicas(binary, 0, **args)

    def test_rejects_superprocess(self):
        """Superprocesses are not simulated."""
        with pytest.raises(DomainError):
            montecarlo.run_replicas(StableCSBP(kappa=1.0, alpha=0.5), 1.0, [1.0], n_reps=10)

    def test_spine_needs_single_particle(self, two_type):
        """The spine measure starts from one particle."""
        with pytest.raises(DomainError):
            montecarlo.run_replicas(two_type, [1, 1], [1.0], n_reps=10, method="spine")

    def test_censoring(self):
        """Replicas passing the cap are marked censored with zero mass."""
        model = MultiTypeGW.single_type(1.0, FiniteOffspring.deterministic(2))
        triplet = spectral.eigen_triplet(model.generator())
        batch = montecarlo.run_replicas(model, 0, [20.0], n_reps=20, cap=50, triplet=triplet)
        assert np.all(batch.results.censored[:, 0])
        assert np.all(batch.results.total[:, 0] == 0)
        assert batch.n_censored[0] == 20


class TestSurvivalEstimates:
    def test_direct_binary(self, binary):
        """The direct estimate covers 1/(1 + t/2)."""
        t = [1.0, 4.0]
        table = montecarlo.estimate_survival(binary, 0, t, n_reps=2000, seed=1)
        exact = binary_survival(t)
        assert np.all(np.abs(table.p_hat - exact) < 4.0 * table.std_err)
        assert np.all(table.ci_lo <= table.p_hat) and np.all(table.p_hat <= table.ci_hi)
        assert table.n_censored.tolist() == [0, 0]

    def test_spine_binary(self, binary):
        """The spine estimate averages φ(x)/⟨φ, X_t⟩ and covers the same value."""
        t = [1.0, 4.0]
        table = montecarlo.estimate_survival(binary, 0, t, n_reps=2000, seed=2, method="spine")
        exact = binary_survival(t)
        assert np.all(np.abs(table.p_hat - exact) < 4.0 * table.std_err + 1e-3)
        assert table.method == "spine"
        assert np.all(table.n_effective == 2000)

    def test_spine_has_smaller_relative_error(self, binary):
        """At a long horizon the spine estimator beats the direct one."""
        direct = montecarlo.estimate_survival(binary, 0, [20.0], n_reps=1000, seed=4)
        spine = montecarlo.estimate_survival(binary, 0, [20.0], n_reps=1000, seed=4, method="spine")
        assert spine.relative_error[0] < direct.relative_error[0]

    def test_rows(self, binary):
        """Rows are plain floats and ints in column order."""
        table = montecarlo.estimate_survival(binary, 0, [1.0], n_reps=100, seed=0)
        row = table.rows()[0]
        assert len(row) == len(table.columns)
        assert isinstance(row[0], float) and isinstance(row[-1], int)

    def test_minimum_replicas(self, binary):
        """Fewer than 100 replicas is refused."""
        with pytest.raises(DomainError):
            montecarlo.estimate_survival(binary, 0, [1.0], n_reps=50)

    @pytest.mark.slow
    def test_slack_against_oracle(self):
        """Direct survival of the Slack process matches (1 + t/4)^{-2} within three binomial σ."""
        model = MultiTypeGW.single_type(1.0, SlackOffspring(alpha=0.5, c=0.5))
        t = np.array([4.0, 8.0, 12.0, 16.0])
        table = montecarlo.estimate_survival(model, 0, t, n_reps=100_000, seed=9, threads=4)
        exact = evolution.survival_oracle(0.5, 1.0, 0.5, t)
        assert exact[2] == pytest.approx(0.0625)
        assert np.all(table.n_censored == 0)
        assert np.all(np.abs(table.p_hat - exact) < 3.0 * table.std_err)

    @pytest.mark.slow
    def test_slack_spine_against_oracle(self):
        """The spine estimate covers (1 + t/4)^{-2}; capped replicas can only bias it down by censored/cap."""
        model = MultiTypeGW.single_type(1.0, SlackOffspring(alpha=0.5, c=0.5))
        t = np.array([4.0, 8.0, 12.0, 16.0])
        n_reps, cap = 5_000, 1000
        table = montecarlo.estimate_survival(model, 0, t, n_reps=n_reps, seed=10, method="spine", cap=cap)
        exact = evolution.survival_oracle(0.5, 1.0, 0.5, t)
        censoring_bias = table.n_censored / n_reps / cap
        assert np.all(exact > table.p_hat - 3.0 * table.std_err)
        assert np.all(exact < table.p_hat + 3.0 * table.std_err + censoring_bias)

    @pytest.mark.slow
    def test_two_type_slack_spine_against_solver(self):
        """φ(x)·mean(1/Y_t) agrees with u_t(x) from the solver at t = 10, 50, 100."""
        law = SlackOffspring(alpha=0.5, c=0.5, k_max=10**4)
        model = MultiTypeGW(beta=[1.0, 2.0], offspring=(law, law), displacement=[[0.0, 1.0], [1.0, 0.0]])
        t = [10.0, 50.0, 100.0]
        n_reps, cap = 500, 1000
        u = evolution.solve_u(model, 0.0, 100.0, dt=0.04, times=t)
        exact = np.array([u.at(s)[0] for s in t])
        table = montecarlo.estimate_survival(model, 0, t, n_reps=n_reps, seed=21, method="spine", cap=cap)
        # φ is constant here, so a censored weight is below 1/cap
        censoring_bias = table.n_censored / n_reps / cap
        assert np.all(exact > table.p_hat - 3.0 * table.std_err)
        assert np.all(exact < table.p_hat + 3.0 * table.std_err + censoring_bias)

    @pytest.mark.slow
    def test_diffusion_survival_profile(self):
        """P_x(ζ > t) over starting points correlates with sin(πx/d)."""
        law = SlackOffspring(alpha=0.5, c=1.2, mean=2.0, k_max=10**4)
        model = BranchingDiffusion1D(d=2.0, offspring=law, mesh=20)
        starts = np.linspace(0.25, 1.75, 7)
        p_hat = np.array(
            [
                montecarlo.estimate_survival(model, x, [1.0], n_reps=10_000, seed=30 + i, dt=1e-3, cap=10**5).p_hat[0]
                for i, x in enumerate(starts)
            ]
        )
        assert np.all(p_hat > 0)
        assert np.corrcoef(p_hat, model.eigenfunction(starts))[0, 1] > 0.99


class TestConditionalLaplace:
    def test_binary_geometric_law(self, binary):
        """Conditioned on survival N_t is geometric with mean 1 + t/2."""
        t, a_t = 4.0, 1.0 / 3.0
        theta = np.array([0.0, 0.5, 1.0, 2.0])
        table = montecarlo.conditional_laplace(binary, 0, t, theta, 1.0, a_t, n_reps=2000, seed=6)
        s = np.exp(-theta * a_t)
        exact = a_t * s / (1.0 - (1.0 - a_t) * s)
        assert table.lf_hat[0] == 1.0
        assert np.all(np.abs(table.lf_hat - exact) <= 4.0 * table.std_err + 1e-12)
        assert table.n_survivors > 500

    def test_spine_weighting(self, binary):
        """The spine estimate of the same functional agrees."""
        t, a_t = 4.0, 1.0 / 3.0
        theta = np.array([1.0])
        table = montecarlo.conditional_laplace(binary, 0, t, theta, 1.0, a_t, n_reps=2000, seed=7, method="spine")
        s = np.exp(-a_t)
        exact = a_t * s / (1.0 - (1.0 - a_t) * s)
        assert abs(table.lf_hat[0] - exact) <= 4.0 * table.std_err[0] + 1e-3

    def test_too_few_survivors(self, binary):
        """Long horizons with few replicas leave too few survivors."""
        with pytest.raises(InsufficientReplicas):
            montecarlo.conditional_laplace(binary, 0, 50.0, [1.0], 1.0, 0.04, n_reps=100, seed=0)


class TestMeanChecks:
    def test_phi_martingale(self, two_type):
        """E⟨φ, X_t⟩ stays at φ(x0) under the critical law."""
        batch = montecarlo.run_replicas(two_type, 0, [1.0, 3.0], n_reps=2000, seed=12)
        check = montecarlo.martingale_check(batch)
        np.testing.assert_allclose(check.expected, 1.0)
        assert check.passed(sigmas=4.0)

    def test_martingale_needs_direct(self, two_type):
        """Spine batches are not martingale-checked."""
        batch = montecarlo.run_replicas(two_type, 0, [1.0], n_reps=10, method="spine")
        with pytest.raises(DomainError):
            montecarlo.martingale_check(batch)

    def test_change_of_measure(self, binary):
        """P(1 <= N_t <= 10) agrees under both measures."""
        direct = montecarlo.run_replicas(binary, 0, [2.0], n_reps=2000, seed=13)
        spine = montecarlo.run_replicas(binary, 0, [2.0], n_reps=2000, seed=14, method="spine")
        assert montecarlo.change_of_measure_check(direct, spine).passed(sigmas=4.0)

    def test_z_scores(self):
        """Zero standard error counts as a pass only on exact agreement."""
        check = montecarlo.MeanCheck(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([1.0, 1.0]), np.zeros(2))
        assert check.z_scores.tolist() == [0.0, np.inf]
        assert not check.passed()
