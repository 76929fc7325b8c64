"""Sequential off-policy learning with logarithmic smoothing and PAC-Bayes objectives."""
from .env import (
    DriftSchedule,
    Environment,
    LoggedInteraction,
    drift_context_sampler,
    expected_cost,
    load_feature_label_env,
    make_synthetic_env,
    sample_cost,
    true_risk,
)
from .estimators import LogDataset, RegularizerSpec, c_hat_term, empirical_risk, h_value
from .learner import LambdaRule, LearnerConfig, RunTrace, lambda_schedule, run
from .objectives import ObjectiveSpec, adj_objective, bound_value, ls_objective, objective_grad
from .optimizer import OptimizerConfig, adam_step, minimize
from .policy import GaussianPolicyParams, PropensityConfig, propensities, propensity

__version__ = "0.1.0"

__all__ = [
    "DriftSchedule", "Environment", "LoggedInteraction", "drift_context_sampler",
    "expected_cost", "load_feature_label_env", "make_synthetic_env", "sample_cost",
    "true_risk", "LogDataset", "RegularizerSpec", "c_hat_term", "empirical_risk", "h_value",
    "LambdaRule", "LearnerConfig", "RunTrace", "lambda_schedule", "run", "ObjectiveSpec",
    "adj_objective", "bound_value", "ls_objective", "objective_grad", "OptimizerConfig",
    "adam_step", "minimize", "GaussianPolicyParams", "PropensityConfig", "propensities",
    "propensity",
]
