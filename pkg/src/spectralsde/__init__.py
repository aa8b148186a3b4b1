"""Piecewise-linear latent SDE forecasting with spectral closed-form
propagation, Gaussian observation filtering and hypernetwork-adapted
interval dynamics."""

from .data import Trajectory, load_dataset, save_dataset, split_dataset
from .estimator import SpectralSdeRegressor, check_trajectories
from .filtering import Observation, condition, kalman_update
from .model import (
    ModelConfig,
    PiecewiseSdeModel,
    SequencePrediction,
    TrainConfig,
    train,
)
from .solver import (
    ControlSignal,
    GaussianBelief,
    control_integral_analytic,
    control_integral_numeric,
    noise_integral,
    predictive_observation,
    propagate,
)
from .spectral import (
    ComplexPair,
    EigenBasis,
    RealEig,
    SpectralDynamics,
    Spectrum,
    assemble_operator,
    decompose_operator,
    eigenfunction,
    eigenfunction_inverse,
)

__all__ = [
    "ComplexPair",
    "ControlSignal",
    "EigenBasis",
    "GaussianBelief",
    "ModelConfig",
    "Observation",
    "PiecewiseSdeModel",
    "RealEig",
    "SequencePrediction",
    "SpectralDynamics",
    "SpectralSdeRegressor",
    "Spectrum",
    "check_trajectories",
    "TrainConfig",
    "Trajectory",
    "assemble_operator",
    "condition",
    "control_integral_analytic",
    "control_integral_numeric",
    "decompose_operator",
    "eigenfunction",
    "eigenfunction_inverse",
    "kalman_update",
    "load_dataset",
    "noise_integral",
    "predictive_observation",
    "propagate",
    "save_dataset",
    "split_dataset",
    "train",
]

__version__ = "0.1.0"
