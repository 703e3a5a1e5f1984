"""Hierarchical latent-variable models for individualized prediction of
disease-activity trajectories."""
from ._backend import NAME as BACKEND
from .basis import BasisConfig, design_matrix, evaluate_basis
from .baselines import BSplineFeatures, BSplineGP, NoPersonalization, ProposedModel
from .evaluation import EvalProtocol, EvalReport, decline_detection, evaluate
from .exceptions import (DomainError, DynatrajError, InputError, LearningError, NumericalError,
                         ParameterError)
from .kernels import NoiseParams, OUParams, composite_covariance
from .learning import EMConfig, EMTrace, fit_em, select_num_subtypes
from .model import Dataset, Hyperparams, IndividualRecord, ModelParams, observed_data_loglik
from .prediction import TrajectoryPrediction, infer_posterior, predict_trajectory
from .simulate import SimConfig, sample_dataset, scenario_presets

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BasisConfig", "design_matrix", "evaluate_basis",
    "BSplineFeatures", "BSplineGP", "NoPersonalization", "ProposedModel",
    "EvalProtocol", "EvalReport", "decline_detection", "evaluate",
    "DomainError", "DynatrajError", "InputError", "LearningError", "NumericalError", "ParameterError",
    "NoiseParams", "OUParams", "composite_covariance",
    "EMConfig", "EMTrace", "fit_em", "select_num_subtypes",
    "Dataset", "Hyperparams", "IndividualRecord", "ModelParams", "observed_data_loglik",
    "TrajectoryPrediction", "infer_posterior", "predict_trajectory",
    "SimConfig", "sample_dataset", "scenario_presets",
]
