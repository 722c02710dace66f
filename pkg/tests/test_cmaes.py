from __future__ import annotations

import numpy as np
import pytest

from pace import cmaes
from pace.cmaes import RankedCandidate


def run_minimizer(f, d, population, tau0, m0, max_evals, target, seed):
    state = cmaes.init(d, m0=m0, tau0=tau0, population_size=population)
    rng = np.random.default_rng(seed)
    best = np.inf
    evals = 0
    while evals < max_evals and best >= target:
        pop = cmaes.sample_population(state, rng)
        ranked = [RankedCandidate(v, float(f(v))) for v in pop]
        evals += population
        best = min(best, min(r.fitness for r in ranked))
        state, _ = cmaes.update(state, ranked)
    return best, evals


def sphere(v):
    return np.sum(v**2)


def rosenbrock(v):
    return np.sum(100.0 * (v[1:] - v[:-1] ** 2) ** 2 + (1 - v[:-1]) ** 2)


class TestInit:
    def test_specified_initialization(self):
        state = cmaes.init(3, m0=np.zeros(3), tau0=0.1, population_size=6)
        np.testing.assert_array_equal(state.mean, [0, 0, 0])
        np.testing.assert_array_equal(state.covariance, np.eye(3))
        np.testing.assert_array_equal(state.path_sigma, np.zeros(3))
        np.testing.assert_array_equal(state.path_c, np.zeros(3))
        assert state.iteration == 0
        assert state.step_size == 0.1

    def test_warm_start_mean_is_exact(self):
        archived = np.array([0.3, -1.2, 4.0, 0.0])
        state = cmaes.init(4, m0=archived, tau0=0.5, population_size=4)
        np.testing.assert_array_equal(state.mean, archived)

    def test_default_mean_is_origin(self):
        state = cmaes.init(5, tau0=0.01, population_size=4)
        np.testing.assert_array_equal(state.mean, np.zeros(5))

    def test_population_default_matches_deployment_preset(self):
        state = cmaes.init(2304, tau0=0.01, population_size=28)
        assert state.population_size == 28

    def test_rejects_tiny_population(self):
        with pytest.raises(ValueError, match="population_size"):
            cmaes.init(3, tau0=0.1, population_size=1)

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            cmaes.init(3, tau0=0.0, population_size=4)

    def test_weights_non_increasing_and_normalized(self):
        state = cmaes.init(10, tau0=1.0, population_size=12)
        w = state.recomb_weights
        assert np.all(np.diff(w) <= 0)
        assert w.sum() == pytest.approx(1.0)
        assert np.all(w > 0)


class TestSamplePopulation:
    def test_degenerate_step_size_collapses_to_mean(self):
        m0 = np.array([1.0, -2.0, 0.5])
        state = cmaes.init(3, m0=m0, tau0=1e-300, population_size=8)
        pop = cmaes.sample_population(state, np.random.default_rng(0))
        assert pop.shape == (8, 3)
        np.testing.assert_allclose(pop, np.broadcast_to(m0, (8, 3)), atol=1e-12)

    def test_normality_sanity(self):
        state = cmaes.init(4, tau0=1.0, population_size=100)
        rng = np.random.default_rng(0)
        draws = np.concatenate([cmaes.sample_population(state, rng) for _ in range(1000)])
        var = draws.var(axis=0)
        assert np.all(np.abs(var - 1.0) < 0.1)
        assert np.all(np.abs(draws.mean(axis=0)) < 0.02)

    def test_reproducible_for_fixed_stream(self):
        state = cmaes.init(5, tau0=0.3, population_size=6)
        a = cmaes.sample_population(state, np.random.default_rng(7))
        b = cmaes.sample_population(state, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_repair_path_restores_sampling(self):
        state = cmaes.init(3, tau0=0.1, population_size=4)
        broken = state.covariance.copy()
        broken[0, 0] = -1.0  # not positive definite
        repaired = cmaes._with_factorization(
            mean=state.mean,
            step_size=state.step_size,
            covariance=broken,
            path_sigma=state.path_sigma,
            path_c=state.path_c,
            iteration=state.iteration,
            population_size=state.population_size,
            hyper=state.hyper,
        )
        assert np.linalg.eigvalsh(repaired.covariance).min() > 0
        pop = cmaes.sample_population(repaired, np.random.default_rng(0))
        assert np.all(np.isfinite(pop))


class TestUpdate:
    def _ranked(self, state, rng):
        pop = cmaes.sample_population(state, rng)
        return [RankedCandidate(v, float(sphere(v))) for v in pop]

    def test_rank_invariance_bitwise(self):
        state = cmaes.init(6, m0=np.ones(6), tau0=0.4, population_size=10)
        ranked = self._ranked(state, np.random.default_rng(3))
        base, base_rel = cmaes.update(state, ranked)
        for transform in (lambda f: 2 * f + 3, np.exp, lambda f: f**3 + f):
            mapped = [RankedCandidate(r.vector, float(transform(r.fitness))) for r in ranked]
            out, rel = cmaes.update(state, mapped)
            np.testing.assert_array_equal(out.mean, base.mean)
            np.testing.assert_array_equal(out.covariance, base.covariance)
            assert out.step_size == base.step_size
            assert rel == base_rel

    def test_mean_is_weighted_recombination(self):
        # direct formula oracle: hand-coded weighted sum over the best half
        state = cmaes.init(4, m0=np.zeros(4), tau0=0.5, population_size=8)
        rng = np.random.default_rng(1)
        ranked = self._ranked(state, rng)
        order = np.argsort([r.fitness for r in ranked], kind="stable")
        mu = state.hyper.mu
        expected = np.zeros(4)
        for w, idx in zip(state.recomb_weights, order[:mu]):
            expected += w * ranked[idx].vector
        new_state, _ = cmaes.update(state, ranked)
        np.testing.assert_allclose(new_state.mean, expected, atol=1e-12)

    def test_rel_mean_change_definition(self):
        state = cmaes.init(3, m0=np.array([1.0, 0.0, 0.0]), tau0=0.2, population_size=6)
        ranked = self._ranked(state, np.random.default_rng(0))
        new_state, rel = cmaes.update(state, ranked)
        expected = np.linalg.norm(new_state.mean - state.mean) / np.linalg.norm(state.mean)
        assert rel == pytest.approx(expected)
        assert rel >= 0 and np.isfinite(rel)

    def test_rel_mean_change_infinite_from_origin(self):
        state = cmaes.init(3, tau0=0.2, population_size=6)
        _, rel = cmaes.update(state, self._ranked(state, np.random.default_rng(0)))
        assert rel == np.inf

    def test_non_finite_fitness_ranked_worst(self):
        state = cmaes.init(4, m0=np.ones(4), tau0=0.3, population_size=6)
        ranked = self._ranked(state, np.random.default_rng(2))
        poisoned = [RankedCandidate(r.vector, np.nan if i == 0 else r.fitness)
                    for i, r in enumerate(ranked)]
        reference = [RankedCandidate(r.vector, np.inf if i == 0 else r.fitness)
                     for i, r in enumerate(ranked)]
        out_a, _ = cmaes.update(state, poisoned)
        out_b, _ = cmaes.update(state, reference)
        np.testing.assert_array_equal(out_a.mean, out_b.mean)

    def test_all_non_finite_rejected(self):
        state = cmaes.init(3, tau0=0.2, population_size=4)
        ranked = [RankedCandidate(np.zeros(3), np.nan) for _ in range(4)]
        with pytest.raises(ValueError, match="non-finite"):
            cmaes.update(state, ranked)

    def test_wrong_population_size_rejected(self):
        state = cmaes.init(3, tau0=0.2, population_size=4)
        with pytest.raises(ValueError, match="ranked candidates"):
            cmaes.update(state, [RankedCandidate(np.zeros(3), 1.0)])

    def test_covariance_stays_symmetric_positive(self):
        state = cmaes.init(8, m0=np.ones(8), tau0=0.5, population_size=10)
        rng = np.random.default_rng(5)
        for _ in range(50):
            state, _ = cmaes.update(state, self._ranked(state, rng))
            asym = np.max(np.abs(state.covariance - state.covariance.T))
            assert asym < 1e-12
            assert np.linalg.eigvalsh(state.covariance).min() > 0

    def test_iteration_counter_advances(self):
        state = cmaes.init(3, tau0=0.2, population_size=4)
        new_state, _ = cmaes.update(state, self._ranked(state, np.random.default_rng(0)))
        assert new_state.iteration == 1


class TestConvergence:
    def test_sphere_quick(self):
        best, evals = run_minimizer(
            sphere, 5, population=8, tau0=0.5, m0=np.ones(5), max_evals=2000,
            target=1e-9, seed=0,
        )
        assert best < 1e-9

    def test_rosenbrock_quick(self):
        best, _ = run_minimizer(
            rosenbrock, 4, population=10, tau0=0.3, m0=np.zeros(4), max_evals=12000,
            target=1e-6, seed=1,
        )
        assert best < 1e-6


class TestBestCandidate:
    def test_returns_minimum(self):
        ranked = [RankedCandidate(np.array([float(i)]), f) for i, f in enumerate([3.0, 1.0, 2.0])]
        assert cmaes.best_candidate(ranked) is ranked[1]

    def test_tie_breaks_to_lowest_index(self):
        ranked = [RankedCandidate(np.array([float(i)]), 1.0) for i in range(4)]
        assert cmaes.best_candidate(ranked) is ranked[0]

    def test_nan_ranked_last(self):
        ranked = [
            RankedCandidate(np.array([0.0]), np.nan),
            RankedCandidate(np.array([1.0]), 5.0),
            RankedCandidate(np.array([2.0]), 7.0),
        ]
        assert cmaes.best_candidate(ranked) is ranked[1]

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            cmaes.best_candidate([])


class TestSerialization:
    def test_round_trip(self, tmp_path):
        state = cmaes.init(6, m0=np.arange(6.0), tau0=0.3, population_size=8)
        rng = np.random.default_rng(0)
        for _ in range(5):
            pop = cmaes.sample_population(state, rng)
            state, _ = cmaes.update(state, [RankedCandidate(v, float(sphere(v))) for v in pop])
        path = tmp_path / "state.npz"
        cmaes.save_state(path, state)
        loaded = cmaes.load_state(path)
        np.testing.assert_array_equal(loaded.mean, state.mean)
        np.testing.assert_allclose(loaded.covariance, state.covariance, atol=1e-15)
        np.testing.assert_array_equal(loaded.path_sigma, state.path_sigma)
        np.testing.assert_array_equal(loaded.path_c, state.path_c)
        assert loaded.step_size == state.step_size
        assert loaded.iteration == state.iteration
        assert loaded.population_size == state.population_size
        # resumed sampling matches
        a = cmaes.sample_population(state, np.random.default_rng(1))
        b = cmaes.sample_population(loaded, np.random.default_rng(1))
        np.testing.assert_allclose(a, b, atol=1e-12)
