"""Allocation policies.

Two-arm designs use a biased-coin function g mapping the potential-imbalance
gap to the probability of treatment 1. Every shipped family satisfies:
0 < g(x) < 1, g(-x) = 1 - g(x), g(x) <= 1/2 for x >= 0, and g stays below
1/2 - 1e-6 far from balance. Multi-arm designs rank treatments by their
weighted imbalance and hand out a fixed ordered probability vector.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .covariates import CovariateSpec, StratumDistribution
from .imbalance import MultiArmState, TwoArmState, WeightConfig

# Gaps within this of zero are exact ties: float weights leave ~1e-16 dust
# where rational cancellation gives 0, and the step coin must not see it.
ZERO_TOL = 1e-9

# Decimal places for snapping weighted imbalances before rank comparisons.
RANK_DECIMALS = 9


def _as_probability(out, x):
    return out if np.ndim(x) else float(out)


@dataclass(frozen=True)
class EfronCoin:
    """Step-function coin: the lagging arm is favored with fixed probability p."""

    p: float = 0.75

    def __post_init__(self):
        if not 0.5 + 1e-6 <= self.p < 1.0:
            raise ValueError(f"p must be in [0.5+1e-6, 1), got {self.p}")

    def __call__(self, x):
        a = np.asarray(x, dtype=float)
        out = np.where(a > ZERO_TOL, 1.0 - self.p, np.where(a < -ZERO_TOL, self.p, 0.5))
        return _as_probability(out, x)


@dataclass(frozen=True)
class LogisticCoin:
    """Smooth coin 1 / (1 + exp(beta * x)), strictly decreasing in the gap.

    Probabilities are kept 1e-12 away from 0 and 1 so the coin stays strictly
    randomized even where the exact value would underflow.
    """

    beta: float = 1.0

    def __post_init__(self):
        if not self.beta >= 1e-6:
            raise ValueError(f"beta must be >= 1e-6, got {self.beta}")

    def __call__(self, x):
        a = np.asarray(x, dtype=float)
        s = np.exp(-self.beta * np.abs(a))
        g_pos = np.maximum(s / (1.0 + s), 1e-12)
        out = np.where(a >= 0.0, g_pos, 1.0 - g_pos)
        return _as_probability(out, x)


@dataclass(frozen=True)
class HeavyTailCoin:
    """Coin drifting from 1/2 toward a floor q_min like |x|^a / (1 + |x|^a).

    One concrete member of the admissible family; any antisymmetric probability
    function that is at most 1/2 on x >= 0 and bounded away from 1/2 at
    infinity would do. Smaller `a` reacts more gently near balance, which
    trades correction strength against predictability of the next assignment.
    """

    a: float = 2.0
    q_min: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.a <= 1e3:
            raise ValueError(f"a must be in (0, 1e3], got {self.a}")
        if not 0.0 < self.q_min <= 0.499:
            raise ValueError(f"q_min must be in (0, 0.499], got {self.q_min}")

    def __call__(self, x):
        a = np.asarray(x, dtype=float)
        mag = np.abs(a)
        with np.errstate(divide="ignore", over="ignore"):
            t = np.where(mag > 0.0, 1.0 / (1.0 + mag ** (-self.a)), 0.0)
        g_pos = 0.5 - (0.5 - self.q_min) * t
        out = np.where(a >= 0.0, g_pos, 1.0 - g_pos)
        return _as_probability(out, x)


BiasedCoin = Union[EfronCoin, LogisticCoin, HeavyTailCoin]


@dataclass(frozen=True)
class MultiArmProbs:
    """Fixed allocation probabilities handed out by imbalance rank.

    probs[0] goes to the treatment whose assignment would cause the least
    weighted imbalance. Must be nonincreasing, sum to 1, with
    probs[0] > probs[-1] > 0.
    """

    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(v) for v in self.probs))
        if len(self.probs) < 2:
            raise ValueError("need at least 2 treatments")
        if any(v < 0.0 for v in self.probs):
            raise ValueError("probabilities must be nonnegative")
        if any(a < b for a, b in zip(self.probs, self.probs[1:])):
            raise ValueError(f"probabilities must be nonincreasing, got {self.probs}")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {self.probs}")
        if not self.probs[0] > self.probs[-1] > 0.0:
            raise ValueError("need probs[0] > probs[-1] > 0")

    @property
    def arms(self) -> int:
        return len(self.probs)

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs)


Policy = Union[EfronCoin, LogisticCoin, HeavyTailCoin, MultiArmProbs]


@dataclass(frozen=True)
class DesignConfig:
    """One complete design: covariates, stratum distribution, weights, policy."""

    spec: CovariateSpec
    dist: StratumDistribution
    weights: WeightConfig
    policy: Policy

    def __post_init__(self):
        if len(self.dist) != self.spec.stratum_count:
            raise ValueError(
                f"distribution has {len(self.dist)} cells, spec has "
                f"{self.spec.stratum_count} strata"
            )
        if len(self.weights.margins) != self.spec.covariate_count:
            raise ValueError(
                f"{len(self.weights.margins)} margin weights for "
                f"{self.spec.covariate_count} covariates"
            )

    @property
    def is_multiarm(self) -> bool:
        return isinstance(self.policy, MultiArmProbs)

    @property
    def arms(self) -> int:
        return self.policy.arms if self.is_multiarm else 2

    def new_state(self):
        if self.is_multiarm:
            return MultiArmState(self.spec, self.arms)
        return TwoArmState(self.spec)

    def digest(self) -> str:
        """Short stable hash of the design, stamped into CSV outputs."""
        payload = repr(
            (
                self.spec.levels,
                self.dist.probs.tobytes(),
                (self.weights.overall, self.weights.margins, self.weights.stratum),
                self.policy,
            )
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def potential_imbalance(
    state: TwoArmState, weights: WeightConfig, stratum: int, arm: int
) -> float:
    """Weighted squared imbalance that assigning `arm` in `stratum` would cause."""
    step = 1 if arm == 1 else -1
    if arm not in (1, 2):
        raise ValueError(f"arm must be 1 or 2, got {arm}")
    x = weights.overall * (state.overall_diff + step) ** 2
    for i, table in enumerate(state.spec.margin_level_tables()):
        x += weights.margins[i] * (state.margin_diffs[i][table[stratum]] + step) ** 2
    x += weights.stratum * (state.stratum_diffs[stratum] + step) ** 2
    return float(x)


def imbalance_gap(state: TwoArmState, weights: WeightConfig, stratum: int) -> float:
    """potential_imbalance(arm 1) minus potential_imbalance(arm 2).

    Computed from the squares directly; algebraically it equals 4x the
    weighted imbalance, and tests hold the two routes together to 1e-9.
    """
    return potential_imbalance(state, weights, stratum, 1) - potential_imbalance(
        state, weights, stratum, 2
    )


def treatment_one_prob(
    state: TwoArmState, weights: WeightConfig, coin: BiasedCoin, stratum: int
) -> float:
    """Allocation probability of treatment 1 facing the current imbalances."""
    return float(coin(4.0 * state.weighted_imbalance(weights, stratum)))


def multiarm_potential_imbalance(
    state: MultiArmState, weights: WeightConfig, stratum: int, treatment: int
) -> float:
    """Weighted squared imbalance, summed over arms, if `treatment` got the patient.

    Every arm's difference shifts by -1/T and the chosen arm gains +1; the sum
    runs over all T arms at each scope.
    """
    state._validate_treatment(treatment)
    T = state.arms
    shift = T * np.eye(T, dtype=np.int64)[treatment - 1] - 1  # numerator change

    def scope_total(numerators: np.ndarray) -> float:
        v = (numerators + shift) / T
        return float(np.sum(v * v))

    x = weights.overall * scope_total(state.overall_diff_numerators())
    margin_nums = state.margin_diff_numerators()
    tables = state.spec.margin_level_tables()
    for i, table in enumerate(tables):
        x += weights.margins[i] * scope_total(margin_nums[i][:, table[stratum]])
    x += weights.stratum * scope_total(state.stratum_diff_numerators()[:, stratum])
    return x


def rank_treatment_probs(
    lam: np.ndarray, probs: MultiArmProbs, tie_keys: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Rank treatments by weighted imbalance (ascending), ties by key order.

    Returns (order, per_treatment) where order[s] is the 0-based treatment at
    rank s and per_treatment[t] its allocation probability. With i.i.d.
    uniform tie_keys, each tied block receives a uniformly random internal
    order.
    """
    lam = np.round(np.asarray(lam, dtype=float), RANK_DECIMALS)
    by_key = np.argsort(tie_keys, kind="stable")
    order = by_key[np.argsort(lam[by_key], kind="stable")]
    per_treatment = np.empty(len(order))
    per_treatment[order] = probs.probs
    return order, per_treatment


def multiarm_treatment_probs(
    state: MultiArmState,
    weights: WeightConfig,
    probs: MultiArmProbs,
    stratum: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-treatment allocation probabilities with a random tie order from rng."""
    lam = state.weighted_imbalance(weights, stratum)
    _, per_treatment = rank_treatment_probs(lam, probs, rng.random(state.arms))
    return per_treatment


def expected_rank_probs(lam: np.ndarray, probs: MultiArmProbs) -> np.ndarray:
    """Tie-averaged rank probabilities for one weighted-imbalance vector.

    Each block of tied treatments shares the mean of the rank probabilities it
    spans; this is the exact expectation over the random tie order, which the
    exact-propagation oracle needs.
    """
    lam = np.round(np.asarray(lam, dtype=float), RANK_DECIMALS)
    arms = len(lam)
    order = np.argsort(lam, kind="stable")
    p = np.asarray(probs.probs)
    out = np.empty(arms)
    start = 0
    while start < arms:
        stop = start + 1
        while stop < arms and lam[order[stop]] == lam[order[start]]:
            stop += 1
        out[order[start:stop]] = p[start:stop].mean()
        start = stop
    return out


def multiarm_expected_treatment_probs(
    state: MultiArmState, weights: WeightConfig, probs: MultiArmProbs, stratum: int
) -> np.ndarray:
    """Tie-averaged allocation probabilities (deterministic variant)."""
    return expected_rank_probs(state.weighted_imbalance(weights, stratum), probs)
