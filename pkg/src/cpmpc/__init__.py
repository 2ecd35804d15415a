"""Shrinking-horizon MPC with conformal prediction regions for moving agents."""

from .conformal import (RegionTable, calibrate_benchmark, calibrate_joint, compute_normalization,
                        compute_scores, quantile_index)
from .constraints import CollisionConstraint, ConstraintSet, build_constraint_set, signed_clearance
from .dynamics import BicycleParams, MissionSpec, bicycle_step, rollout
from .errors import (CalibrationInfeasibleError, ConfigurationError, CpmpcError,
                     MpcInfeasibleError, NotCertifiableError, PredictionError)
from .mpc import (BenchmarkController, MpcProblem, ProposedController, SolverConfig, certify,
                  run_closed_loop, solve_step)
from .predictor import OneStepModel, fit_linear_one_step, predict_from
from .sim import ExperimentConfig, export_report, run_experiment
from .trajectory import Dataset, Trajectory, split_dataset, validate_dataset

__version__ = "0.1.0"

__all__ = [
    "BenchmarkController", "BicycleParams", "CalibrationInfeasibleError", "CollisionConstraint",
    "ConfigurationError", "ConstraintSet", "CpmpcError", "Dataset", "ExperimentConfig",
    "MissionSpec", "MpcInfeasibleError", "MpcProblem", "NotCertifiableError", "OneStepModel",
    "PredictionError", "ProposedController", "RegionTable", "SolverConfig", "Trajectory",
    "bicycle_step", "build_constraint_set", "calibrate_benchmark", "calibrate_joint", "certify",
    "compute_normalization", "compute_scores", "export_report", "fit_linear_one_step",
    "predict_from", "quantile_index", "rollout", "run_closed_loop", "run_experiment",
    "signed_clearance", "solve_step", "split_dataset", "validate_dataset",
]
