"""Variational Bayesian sparse PCA for process monitoring.

Two latent models (Gaussian/ARD and hierarchical-Laplace loadings), an
l1-regularized VAR on the latent scores, KDE-limited T^2/SPE detection,
reconstruction-based fault diagnosis and a synthetic electrolyzer simulator.
"""
from .core_data import DataError, DataMatrix, Scaler, apply_scaler, fit_scaler, load_csv, write_csv
from .gaussian import GaussianHyper, GaussianModel, fit_gaussian, project_gaussian
from .laplace import LaplaceHyper, LaplaceModel, fit_laplace, project_laplace
from .linalg_utils import NumericalError

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "DataMatrix",
    "Scaler",
    "apply_scaler",
    "fit_scaler",
    "load_csv",
    "write_csv",
    "GaussianHyper",
    "GaussianModel",
    "fit_gaussian",
    "project_gaussian",
    "LaplaceHyper",
    "LaplaceModel",
    "fit_laplace",
    "project_laplace",
    "NumericalError",
]
