"""Variational position selector: KL, objective, sampling, hill climb."""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnisynth.geometry import DepthBounds, reprojection_grid
from omnisynth.selection import (
    FactorizedQ,
    PositionPrior,
    SelectionState,
    elbo,
    expected_elbo,
    kl_q_p,
    sample_positions,
    selection_step,
)


def chain_prior(n: int, spacing: float = 1.0) -> PositionPrior:
    positions = np.zeros((n, 3))
    positions[:, 0] = np.arange(n) * spacing
    neighbors = [[j for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)]
    return PositionPrior(positions, neighbors)


def interior_q(prior: PositionPrior, bases, epsilon=0.25) -> FactorizedQ:
    return FactorizedQ(list(bases), epsilon)


class TestKl:
    def test_delta_q_closed_form(self):
        prior = chain_prior(50)
        q = FactorizedQ([10, 20, 30, 40], epsilon=0.0)
        assert kl_q_p(q, prior) == pytest.approx(4 * math.log(50), abs=1e-9)

    def test_interior_factor_closed_form(self):
        prior = chain_prior(50)
        q = FactorizedQ([25], epsilon=0.25)  # L = 2
        expected = 0.5 * math.log(0.5 * 50) + 2 * 0.25 * math.log(0.25 * 50)
        assert kl_q_p(q, prior) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(2.872, abs=5e-4)

    def test_factor_probabilities_sum_to_one(self):
        prior = chain_prior(10)
        for base in (0, 1, 5, 9):
            q = FactorizedQ([base], epsilon=0.25)
            _, probs = q.factor_support(prior, 0)
            assert sum(probs) == 1.0  # 0.25 is exact in binary
            frac = sum(Fraction(1, 4) for _ in probs[1:]) + (1 - Fraction(1, 4) * len(probs[1:]))
            assert frac == 1

    def test_brute_force_oracle_small_grids(self):
        for n in (3, 5, 10):
            prior = chain_prior(n)
            for eps in (0.0, 0.1, 0.25, 0.5):
                for base in range(n):
                    q = FactorizedQ([base], epsilon=eps)
                    support, probs = q.factor_support(prior, 0)
                    brute = sum(p * math.log(p / (1.0 / n)) for p in probs if p > 0)
                    assert kl_q_p(q, prior) == pytest.approx(brute, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.floats(0.0, 0.5), st.integers(0, 39))
    def test_kl_nonnegative(self, n, eps, base):
        prior = chain_prior(n)
        q = FactorizedQ([min(base, n - 1)], epsilon=eps)
        assert kl_q_p(q, prior) >= -1e-12

    def test_epsilon_bounds(self):
        with pytest.raises(ValueError):
            FactorizedQ([0], epsilon=0.6)
        with pytest.raises(ValueError):
            FactorizedQ([0], epsilon=-0.1)


class TestElbo:
    def test_all_scores_one(self):
        prior = chain_prior(50)
        q = FactorizedQ([10, 20, 30, 40], epsilon=0.25)
        value = elbo([1.0] * 4, [1.0] * 4, q, prior)
        assert value == pytest.approx(-kl_q_p(q, prior), abs=1e-12)
        assert value == pytest.approx(-11.489, abs=5e-4)

    def test_exp_minus_one_scores(self):
        prior = chain_prior(50)
        q = FactorizedQ([10, 20, 30, 40], epsilon=0.25)
        s = math.exp(-1.0)
        value = elbo([s] * 4, [s] * 4, q, prior)
        assert value == pytest.approx(-kl_q_p(q, prior) - 1.0 - 4.0, abs=1e-9)
        assert value == pytest.approx(-16.489, abs=5e-4)

    def test_monotone_in_scores(self):
        prior = chain_prior(20)
        q = FactorizedQ([5, 10], epsilon=0.25)
        base = elbo([0.5] * 4, [0.5, 0.5], q, prior)
        assert elbo([0.6, 0.5, 0.5, 0.5], [0.5, 0.5], q, prior) > base
        assert elbo([0.5] * 4, [0.7, 0.5], q, prior) > base

    def test_score_clamping(self):
        prior = chain_prior(10)
        q = FactorizedQ([5], epsilon=0.0)
        v = elbo([0.0], [0.0], q, prior)
        assert np.isfinite(v)

    def test_factor_count_enforced(self):
        prior = chain_prior(10)
        q = FactorizedQ([1, 2], epsilon=0.25)
        with pytest.raises(ValueError):
            elbo([1.0], [1.0], q, prior)

    def test_exact_expectation_matches_product_space_enumeration(self):
        """Full enumeration over all factor combinations on tiny grids."""
        rng = np.random.default_rng(0)
        for n in (3, 4, 5):
            prior = chain_prior(n)
            scores = rng.uniform(0.05, 1.0, size=n)
            eval_scores = rng.uniform(0.1, 1.0, size=4)
            q = FactorizedQ([1, n - 2], epsilon=0.2)

            got = expected_elbo(eval_scores, lambda i: scores[i], q, prior)

            supports = [q.factor_support(prior, i) for i in range(q.num_factors)]
            ev = float(np.mean(np.log(eval_scores)))
            total = 0.0
            for combo in itertools.product(*[range(len(s[0])) for s in supports]):
                prob = 1.0
                comp = 0.0
                for i, pick in enumerate(combo):
                    cands, probs = supports[i]
                    prob *= probs[pick]
                    comp += math.log(max(scores[cands[pick]], 1e-6))
                total += prob * comp
            brute = -kl_q_p(q, prior) + ev + total
            assert got == pytest.approx(brute, abs=1e-9)


class TestSampling:
    def test_zero_epsilon_stays(self):
        prior = chain_prior(10)
        q = FactorizedQ([3, 7], epsilon=0.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert sample_positions(q, prior, rng) == [3, 7]

    def test_stay_frequency(self):
        prior = chain_prior(11)
        q = FactorizedQ([5], epsilon=0.25)  # L = 2, stay prob 0.5
        rng = np.random.default_rng(1)
        stays = sum(sample_positions(q, prior, rng)[0] == 5 for _ in range(10_000))
        assert abs(stays / 10_000 - 0.5) <= 0.02

    def test_support_respected(self):
        prior = chain_prior(9)
        q = FactorizedQ([0, 4, 8], epsilon=0.3)
        rng = np.random.default_rng(2)
        for _ in range(200):
            s = sample_positions(q, prior, rng)
            assert s[0] in (0, 1)
            assert s[1] in (3, 4, 5)
            assert s[2] in (7, 8)


class TestSelectionStep:
    def test_first_call_always_accepts(self):
        prior = chain_prior(10)
        state = SelectionState(q=FactorizedQ([4], 0.25), current=[4], prior=prior)
        event = selection_step(state, lambda cur: ([0.3], [0.2]), np.random.default_rng(0))
        assert event.accepted
        assert state.best == event.elbo
        assert event.base == [4]

    def test_best_trace_monotone(self):
        prior = chain_prior(15)
        rng = np.random.default_rng(3)
        state = SelectionState(q=FactorizedQ([7, 2], 0.25), current=[7, 2], prior=prior)
        scores = np.random.default_rng(4).uniform(0.05, 1.0, size=15)
        for _ in range(100):
            selection_step(state, lambda cur: ([0.5] * 4, [scores[i] for i in cur]), rng)
        bests = [e.best_elbo for e in state.events]
        assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))

    def test_initialize_validates(self):
        prior = chain_prior(6)
        with pytest.raises(ValueError):
            SelectionState.initialize(prior, 7, 0.25, np.random.default_rng(0))

    def test_planted_scorer_hill_climb(self):
        """With scores peaked at a hidden target, most seeded runs move all
        base positions within 2 grid steps of it in 200 steps."""
        n, m, steps = 12, 4, 200
        prior = chain_prior(n, spacing=1.0)
        successes = 0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            target = int(rng.integers(2, n - 2))
            state = SelectionState.initialize(prior, m, 0.25, rng, update_period=1)

            def provider(current):
                comp = [math.exp(-abs(prior.positions[i, 0] - target)) for i in current]
                return [1.0] * 4, comp

            for _ in range(steps):
                selection_step(state, provider, rng)
            if all(abs(b - target) <= 2 for b in state.q.base):
                successes += 1
        assert successes >= 18, f"only {successes}/20 runs converged"


class TestPriorFromGrid:
    def test_grid_adjacency_carries_over(self):
        grid = reprojection_grid(DepthBounds(-2, 2, -2, 2), 6)
        prior = PositionPrior.from_grid(grid)
        assert len(prior) == 12
        assert prior.neighbors[0] == [1]
        assert prior.neighbors[6] == [7]

    def test_asymmetric_adjacency_rejected(self):
        with pytest.raises(ValueError):
            PositionPrior(np.zeros((3, 3)), [[1], [], [1]])

    def test_too_many_neighbors_rejected(self):
        with pytest.raises(ValueError):
            PositionPrior(np.zeros((4, 3)), [[1, 2, 3], [0], [0], [0]])
