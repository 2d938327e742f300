"""Bias of adaptively collected sample means, and estimators that remove it.

The package simulates multi-armed bandit data collection (greedy,
epsilon-greedy, lil'UCB, Thompson sampling, each optionally Gumbel-
randomized), measures the negative bias this induces in per-arm sample
means, and implements three corrections: held-out splitting, inverse
propensity weighting, and conditional maximum likelihood fit by
contrastive divergence.
"""
from .core import (
    ARM_DRAW,
    BERNOULLI,
    GAUSSIAN,
    GUMBEL_NOISE,
    HELD_OUT,
    MCMC,
    POLICY_NOISE,
    TRACE_SCHEMA_VERSION,
    ArmModel,
    BanditBiasError,
    Trace,
    TraceSchemaError,
    UndefinedMean,
    draw_sample,
    sample_mean,
    substream,
)
from .policies import (
    EPS_GREEDY,
    EULER_GAMMA,
    GREEDY,
    LIL_UCB,
    THOMPSON,
    CheckReport,
    NonpositiveLogArgument,
    PolicyConfig,
    check_exploit,
    check_iio,
    decision_stats,
    exploration_bonus,
    gumbel_noise,
    posterior_params,
    select,
    select_from_stats,
    selection_probabilities,
    selection_probability,
    softmax,
)
from .simulate import (
    EstimatorComparison,
    ExperimentReport,
    MethodStats,
    StateSpaceTooLarge,
    bernoulli_bias_grid,
    bernoulli_bias_t3_closed_form,
    compare_estimators,
    enumerate_bernoulli_exact,
    future_samples_scatter,
    run_campaign,
    run_trial,
)
from .estimators import (
    EstimateVector,
    SplitMissing,
    ZeroPropensity,
    heldout_estimate,
    naive_estimate,
    propensity_estimate,
)
from .cmle import (
    CmleConfig,
    CmleResult,
    Divergence,
    HardMaxTrace,
    MissingPosteriorDraws,
    cd_fit,
    conditional_loglik_unnormalized,
    data_term_gradient,
    mh_accept_log_ratio,
    mh_step,
    thompson_conditional_loglik,
)

__version__ = "0.1.0"

__all__ = [
    "ARM_DRAW",
    "BERNOULLI",
    "GAUSSIAN",
    "GUMBEL_NOISE",
    "HELD_OUT",
    "MCMC",
    "POLICY_NOISE",
    "TRACE_SCHEMA_VERSION",
    "ArmModel",
    "BanditBiasError",
    "Trace",
    "TraceSchemaError",
    "UndefinedMean",
    "draw_sample",
    "sample_mean",
    "substream",
    "EPS_GREEDY",
    "EULER_GAMMA",
    "GREEDY",
    "LIL_UCB",
    "THOMPSON",
    "CheckReport",
    "NonpositiveLogArgument",
    "PolicyConfig",
    "check_exploit",
    "check_iio",
    "decision_stats",
    "exploration_bonus",
    "gumbel_noise",
    "posterior_params",
    "select",
    "select_from_stats",
    "selection_probabilities",
    "selection_probability",
    "softmax",
    "EstimatorComparison",
    "ExperimentReport",
    "MethodStats",
    "StateSpaceTooLarge",
    "bernoulli_bias_grid",
    "bernoulli_bias_t3_closed_form",
    "compare_estimators",
    "enumerate_bernoulli_exact",
    "future_samples_scatter",
    "run_campaign",
    "run_trial",
    "EstimateVector",
    "SplitMissing",
    "ZeroPropensity",
    "heldout_estimate",
    "naive_estimate",
    "propensity_estimate",
    "CmleConfig",
    "CmleResult",
    "Divergence",
    "HardMaxTrace",
    "MissingPosteriorDraws",
    "cd_fit",
    "conditional_loglik_unnormalized",
    "data_term_gradient",
    "mh_accept_log_ratio",
    "mh_step",
    "thompson_conditional_loglik",
]
