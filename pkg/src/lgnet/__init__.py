"""Legendre-Galerkin spectral datasets and LGNet, a convolutional network that predicts spectral coefficients."""

__version__ = "0.1.0"

from .data import Dataset, NormStats, generate_dataset, load_dataset, save_dataset
from .estimator import GalerkinSolver, LGNetRegressor
from .nn import Network, NetworkConfig, build_network
from .optim import OptimizerConfig
from .solvers import ProblemSpec, SpectralSolution, solve
from .spectral import ModalBasis, QuadratureRule, gauss_lobatto, modal_basis
from .training import TrainingTrace, WeakFormConfig, compute_loss, evaluate, train

__all__ = [
    "Dataset", "NormStats", "generate_dataset", "load_dataset", "save_dataset",
    "GalerkinSolver", "LGNetRegressor",
    "Network", "NetworkConfig", "build_network",
    "OptimizerConfig",
    "ProblemSpec", "SpectralSolution", "solve",
    "ModalBasis", "QuadratureRule", "gauss_lobatto", "modal_basis",
    "TrainingTrace", "WeakFormConfig", "compute_loss", "evaluate", "train",
]
