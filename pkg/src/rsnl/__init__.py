"""Robust sequential neural likelihood toolkit."""

from .core import (
    AdjustmentPrior,
    AdjustmentSettings,
    RunArtifacts,
    StandardizationStats,
    TrainingSet,
    joint_log_density,
    run_rsnl,
    run_snl,
    standardize,
    update_adjustment_prior,
)
from .diagnostics import (
    CoverageReport,
    MisspecReport,
    c2st,
    empirical_coverage,
    hdr_contains,
    kde_log_density,
    mmd,
    posterior_predictive,
    prior_posterior_distance,
)
from .flow import (
    FlowParams,
    RqsParams,
    TrainConfig,
    flow_log_prob,
    flow_log_prob_grad,
    flow_sample,
    init_flow,
    load_flow,
    rqs_forward,
    rqs_inverse,
    save_flow,
    train_flow,
)
from .mcmc import (
    ChainSet,
    McmcConfig,
    SupportTransform,
    TargetDensity,
    effective_sample_size,
    nuts_run,
    rank_normalized_rhat,
    transform_forward,
    transform_inverse,
)
from .nn import AdamState, MlpParams, adam_step, init_mlp, mlp_backward, mlp_forward
from .priors import ConditionalIntervalPrior, IndependentPrior
from .simulators import SimulatorSpec, get_simulator, simulator_names

__version__ = "0.1.0"
