"""Completion-position selection.

Candidate camera positions form a discrete prior (uniform over the
reprojection grid). The variational posterior factorizes per selected
position: each factor sits at a base candidate with probability
1 - eps * L and hops to each of its L grid neighbors with probability eps.
The selector keeps the best scoring configuration seen so far (scores are
log discriminator outputs combined with the KL toward the uniform prior)
and resamples around it, so training and position selection proceed
together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import CandidateGrid

__all__ = [
    "PositionPrior",
    "FactorizedQ",
    "SelectionState",
    "SelectionEvent",
    "kl_q_p",
    "elbo",
    "expected_elbo",
    "sample_positions",
    "selection_step",
]

SCORE_FLOOR = 1e-6


@dataclass
class PositionPrior:
    """Uniform prior over grid candidates with symmetric chain adjacency."""

    positions: np.ndarray
    neighbors: list[list[int]]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.neighbors) != len(self.positions):
            raise ValueError("adjacency size mismatch")
        for i, nbs in enumerate(self.neighbors):
            if len(nbs) > 2:
                raise ValueError(f"candidate {i} has more than 2 neighbors")
            for j in nbs:
                if i not in self.neighbors[j]:
                    raise ValueError("adjacency must be symmetric")

    @classmethod
    def from_grid(cls, grid: CandidateGrid) -> "PositionPrior":
        return cls(grid.positions(), [list(nb) for nb in grid.neighbors])

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class FactorizedQ:
    """Independent per-factor distributions around base candidates."""

    base: list[int]
    epsilon: float

    def __post_init__(self):
        self.base = [int(b) for b in self.base]
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError("epsilon must lie in [0, 1/L_max] with L_max = 2")

    @property
    def num_factors(self) -> int:
        return len(self.base)

    def factor_support(self, prior: PositionPrior, i: int) -> tuple[list[int], list[float]]:
        """Support candidates and probabilities of factor i."""
        mu = self.base[i]
        nbs = prior.neighbors[mu]
        stay = 1.0 - self.epsilon * len(nbs)
        if stay < -1e-12:
            raise ValueError(f"epsilon {self.epsilon} too large for {len(nbs)} neighbors")
        return [mu] + list(nbs), [stay] + [self.epsilon] * len(nbs)


def kl_q_p(q: FactorizedQ, prior: PositionPrior) -> float:
    """KL divergence from q to the uniform prior over the candidate set.

    Sum over factors of sum_pos q * log(q * N); zero-probability support
    points contribute nothing.
    """
    n = len(prior)
    total = 0.0
    for i in range(q.num_factors):
        _, probs = q.factor_support(prior, i)
        for p in probs:
            if p > 0.0:
                total += p * math.log(p * n)
    return total


def _log_clamped(score: float) -> float:
    return math.log(max(float(score), SCORE_FLOOR))


def elbo(eval_scores: Sequence[float], comp_scores: Sequence[float],
         q: FactorizedQ, prior: PositionPrior) -> float:
    """Variational objective at the current sample.

    -KL(q || prior) + mean over evaluation views of log d + sum over the
    selected completions of log d. Scores are clamped at 1e-6 before the
    log. The expectation over q is approximated at the sampled positions,
    which is what the scores correspond to.
    """
    if len(comp_scores) != q.num_factors:
        raise ValueError("need one completion score per factor")
    if len(eval_scores) == 0:
        raise ValueError("need at least one evaluation-view score")
    ev = sum(_log_clamped(s) for s in eval_scores) / len(eval_scores)
    comp = sum(_log_clamped(s) for s in comp_scores)
    return -kl_q_p(q, prior) + ev + comp


def expected_elbo(eval_scores: Sequence[float], comp_score_of: Callable[[int], float],
                  q: FactorizedQ, prior: PositionPrior) -> float:
    """Same objective with the expectation over q taken exactly.

    ``comp_score_of(candidate_index)`` supplies the completion score at any
    support candidate; linearity of expectation reduces the product-space
    sum to per-factor sums.
    """
    ev = sum(_log_clamped(s) for s in eval_scores) / len(eval_scores)
    comp = 0.0
    for i in range(q.num_factors):
        support, probs = q.factor_support(prior, i)
        comp += sum(p * _log_clamped(comp_score_of(c)) for c, p in zip(support, probs) if p > 0.0)
    return -kl_q_p(q, prior) + ev + comp


def sample_positions(q: FactorizedQ, prior: PositionPrior, rng: np.random.Generator) -> list[int]:
    """Draw one candidate per factor: stay at the base w.p. 1 - eps * L,
    otherwise hop to a uniformly chosen neighbor."""
    out = []
    for i in range(q.num_factors):
        mu = q.base[i]
        nbs = prior.neighbors[mu]
        u = rng.random()
        if not nbs or u < 1.0 - q.epsilon * len(nbs):
            out.append(mu)
        else:
            k = int((u - (1.0 - q.epsilon * len(nbs))) / q.epsilon)
            out.append(nbs[min(k, len(nbs) - 1)])
    return out


@dataclass
class SelectionEvent:
    iteration: int
    elbo: float
    best_elbo: float
    base: list[int]
    sample: list[int]
    accepted: bool


@dataclass
class SelectionState:
    """Mutable selector state carried across training."""

    q: FactorizedQ
    current: list[int]
    prior: PositionPrior
    best: float = -math.inf
    update_period: int = 500
    events: list[SelectionEvent] = field(default_factory=list)

    @classmethod
    def initialize(cls, prior: PositionPrior, num_selected: int, epsilon: float,
                   rng: np.random.Generator, update_period: int = 500) -> "SelectionState":
        """Draw initial base positions uniformly from the candidate set and
        start the sample there."""
        if num_selected < 1 or num_selected > len(prior):
            raise ValueError("number of selected positions must be in [1, grid size]")
        base = [int(i) for i in rng.integers(0, len(prior), size=num_selected)]
        q = FactorizedQ(base, epsilon)
        return cls(q=q, current=list(base), prior=prior, update_period=update_period)


def selection_step(state: SelectionState, score_provider: Callable[[list[int]], tuple[Sequence[float], Sequence[float]]],
                   rng: np.random.Generator, iteration: int = 0) -> SelectionEvent:
    """One accept/resample step of the selector.

    ``score_provider(current)`` returns (eval_scores, comp_scores) for the
    currently sampled positions. When the objective beats the best seen so
    far the base moves to the sample; a fresh sample is then drawn from q.
    """
    eval_scores, comp_scores = score_provider(state.current)
    value = elbo(eval_scores, comp_scores, state.q, state.prior)
    accepted = value > state.best
    if accepted:
        state.best = value
        state.q = FactorizedQ(list(state.current), state.q.epsilon)
    state.current = sample_positions(state.q, state.prior, rng)
    event = SelectionEvent(iteration, value, state.best, list(state.q.base), list(state.current), accepted)
    state.events.append(event)
    return event
