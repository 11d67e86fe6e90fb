import numpy as np
import pytest

from carand.covariates import CovariateSpec, StratumDistribution
from carand.imbalance import MultiArmState, TwoArmState, WeightConfig
from carand.policies import DesignConfig, EfronCoin, MultiArmProbs


def make_design(
    levels=(2, 2),
    weights=(0.1, (0.3, 0.3), 0.3),
    policy=None,
    probs="uniform",
) -> DesignConfig:
    spec = CovariateSpec(levels)
    dist = (
        StratumDistribution.uniform(spec.stratum_count)
        if probs == "uniform"
        else StratumDistribution(probs)
    )
    w = WeightConfig(weights[0], weights[1], weights[2])
    return DesignConfig(spec, dist, w, policy or EfronCoin(0.75))


def make_multiarm_design(levels=(2, 2), probs=(0.6, 0.3, 0.1), weights=None):
    spec = CovariateSpec(levels)
    ncov = spec.covariate_count
    w = weights or WeightConfig(0.0, (1.0 / ncov,) * ncov, 0.0)
    return DesignConfig(
        spec, StratumDistribution.uniform(spec.stratum_count), w, MultiArmProbs(probs)
    )


def random_two_arm_state(rng, spec, max_steps=60) -> TwoArmState:
    state = TwoArmState(spec)
    for _ in range(int(rng.integers(1, max_steps))):
        state.apply_assignment(
            int(rng.integers(0, spec.stratum_count)), int(rng.integers(1, 3))
        )
    return state


def random_multiarm_state(rng, spec, arms, max_steps=60) -> MultiArmState:
    state = MultiArmState(spec, arms)
    for _ in range(int(rng.integers(1, max_steps))):
        state.apply_assignment(
            int(rng.integers(0, spec.stratum_count)), int(rng.integers(1, arms + 1))
        )
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
