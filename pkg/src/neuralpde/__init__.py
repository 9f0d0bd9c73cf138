"""Neural-network Monte-Carlo solvers for semilinear and fully nonlinear parabolic PDEs and discrete-time control."""

from .control import CONTROL_SCHEMES, Policy, PolicyValuePair, evaluate_policy, train_hybrid_now, train_nncontpi
from .experiment import ExperimentConfig, RunRecord, aggregate, emit_outputs, run_experiment
from .fully_nonlinear import (
    FULLY_NONLINEAR_SCHEMES,
    HessianEstimate,
    train_2emdbdp,
    train_2m2dbdp,
    train_2mdbdp,
    train_gamma_v2,
    train_gamma_v3,
)
from .nn import AdamState, DimensionError, DivergenceError, FeedforwardNet, adam_step, net_eval, net_input_gradient, net_param_gradient
from .problems import ControlProblem, PdeProblem, make_problem, problem_ids
from .semilinear import (
    SEMILINEAR_SCHEMES,
    train_dbdp1,
    train_dbdp2,
    train_deep_bsde,
    train_deep_splitting,
    train_mdbdp,
    train_regression_scheme,
)
from .sim import ConfigurationError, PathBatch, SimulationError, TimeGrid, simulate_paths
from .training import SchemeResult, TrainConfig

__all__ = [
    "AdamState",
    "CONTROL_SCHEMES",
    "ConfigurationError",
    "ControlProblem",
    "DimensionError",
    "DivergenceError",
    "ExperimentConfig",
    "FULLY_NONLINEAR_SCHEMES",
    "FeedforwardNet",
    "HessianEstimate",
    "PathBatch",
    "PdeProblem",
    "Policy",
    "PolicyValuePair",
    "RunRecord",
    "SEMILINEAR_SCHEMES",
    "SchemeResult",
    "SimulationError",
    "TimeGrid",
    "TrainConfig",
    "adam_step",
    "aggregate",
    "emit_outputs",
    "evaluate_policy",
    "make_problem",
    "net_eval",
    "net_input_gradient",
    "net_param_gradient",
    "problem_ids",
    "run_experiment",
    "simulate_paths",
    "train_2emdbdp",
    "train_2m2dbdp",
    "train_2mdbdp",
    "train_dbdp1",
    "train_dbdp2",
    "train_deep_bsde",
    "train_deep_splitting",
    "train_gamma_v2",
    "train_gamma_v3",
    "train_hybrid_now",
    "train_mdbdp",
    "train_nncontpi",
    "train_regression_scheme",
]
