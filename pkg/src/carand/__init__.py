"""Covariate-adaptive randomization: policies, simulation, and verification.

Sequential treatment allocation that biases each assignment toward balance
over covariate strata, margins, and the whole trial. The package provides the
general weighted family of such procedures (two-arm biased-coin and multi-arm
rank-probability forms), an engine for simulating trials reproducibly, an
exact small-instance oracle, and Monte Carlo diagnostics that test whether
each imbalance scope stays bounded or grows like sqrt(n).
"""

from .covariates import CovariateSpec, Margin, StratumDistribution
from .engine import (
    InvariantError,
    Trajectory,
    run_trial,
    write_trajectories_csv,
)
from .imbalance import MultiArmState, TwoArmState, WeightConfig
from .montecarlo import (
    BOUNDED,
    SQRT_N,
    DriftDiagnostic,
    Prediction,
    RegimePrediction,
    Sigma2Estimate,
    Tolerances,
    VerificationReport,
    build_report,
    classify_regimes,
    derive_stream,
    drift_diagnostic,
    estimate_sigma2,
    expected_next_potential,
    ks_normality,
    simulate_many,
    weighted_squared_imbalance,
)
from .oracle import (
    StateDistribution,
    StateSpaceError,
    Statistic,
    exact_moment,
    moment_for_cell,
    parse_statistic,
    propagate,
)
from .policies import (
    DesignConfig,
    EfronCoin,
    HeavyTailCoin,
    LogisticCoin,
    MultiArmProbs,
    expected_rank_probs,
    imbalance_gap,
    multiarm_expected_treatment_probs,
    multiarm_potential_imbalance,
    multiarm_treatment_probs,
    potential_imbalance,
    rank_treatment_probs,
    treatment_one_prob,
)
from .config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    preset,
    save_config,
)
from .summary import SimulationSummary, write_summary_csv

__version__ = "0.1.0"
