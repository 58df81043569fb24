"""Learned external-wrench prediction for a quadrotor carrying a suspended
payload, and model predictive control that uses the prediction."""
from __future__ import annotations

from .certificate import BoundCertificate, build_certificate, estimate_alphas, verify_global_bound
from .config import Config, load_config, parse_config_text
from .embedding import (MlpParams, SpectralNormalizer, apply_spectral_normalization, embed,
                        init_mlp, lipschitz_certificate)
from .errors import (ConfigError, InsufficientHistory, NumericalError, SchemaError,
                     SingularDynamicsError)
from .kernels import available_backends, backend_name, use_backend
from .labeling import LabeledSet, OnlineLabeler, ingest_flight_log, label_log, label_wrench
from .lls import (IllConditionedWarning, LiftedModel, NormStats, OnlinePredictor, WindowBuffer,
                  fit_AB, predict_wrench_horizon, rollout_backward, rollout_forward,
                  window_refit)
from .metrics import RmseReport, rmse_wrench, tracking_rmse
from .mpc import MpcConfig, MpcController, OcpSolution, QuadDynamics, run_closed_loop, solve_ocp
from .sim import (LoopEvent, Plant, PlantParams, RefParams, Reference, Wrench, collect_dataset,
                  simulate_closed_loop)
from .trainer import TrainConfig, TrainedModel, evaluate, train
from .trajlog import TrajectoryLog, write_log_csv

__version__ = "0.1.0"

__all__ = [
    "BoundCertificate", "build_certificate", "estimate_alphas", "verify_global_bound",
    "Config", "load_config", "parse_config_text",
    "MlpParams", "SpectralNormalizer", "apply_spectral_normalization", "embed", "init_mlp",
    "lipschitz_certificate",
    "ConfigError", "InsufficientHistory", "NumericalError", "SchemaError",
    "SingularDynamicsError",
    "available_backends", "backend_name", "use_backend",
    "LabeledSet", "OnlineLabeler", "ingest_flight_log", "label_log", "label_wrench",
    "IllConditionedWarning", "LiftedModel", "NormStats", "OnlinePredictor", "WindowBuffer",
    "fit_AB", "predict_wrench_horizon", "rollout_backward", "rollout_forward", "window_refit",
    "RmseReport", "rmse_wrench", "tracking_rmse",
    "MpcConfig", "MpcController", "OcpSolution", "QuadDynamics", "run_closed_loop", "solve_ocp",
    "LoopEvent", "Plant", "PlantParams", "RefParams", "Reference", "Wrench", "collect_dataset",
    "simulate_closed_loop",
    "TrainConfig", "TrainedModel", "evaluate", "train",
    "TrajectoryLog", "write_log_csv",
]
