"""Bayesian differential privacy accounting for federated learning."""

from bdpfl.accountant import (
    CostOverflowError,
    EpsDelta,
    GridMismatchError,
    LambdaGrid,
    MechanismParams,
    PrivacyLedger,
    RoundCostEstimate,
    attack_advantage,
    combine_estimates,
    cost_sample,
    delta_for_epsilon,
    epsilon_for_delta,
    estimate_round_cost,
    ledger_add,
    renyi_gaussian,
)
from bdpfl.config import ConfigError, ExperimentConfig, load_config, parse_config
from bdpfl.dp_baseline import DpLedger, dp_epsilon, dp_log_moment
from bdpfl.mechanism import RngStream, clip, gaussian_perturb, sample_subset

__version__ = "0.1.0"
