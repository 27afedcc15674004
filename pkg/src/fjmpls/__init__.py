"""Functional joint models of a longitudinal marker and a survival time with an image predictor."""

from .funcdata import (FjmDataset, FunctionalGrid, FunctionOnGrid, ImageMatrix, SubjectData,
                       functional_matvec, inner_product, load_dataset, write_dataset)
from .fpca import FpcaDecomposition, fpca_fjm_init, fpca_svd
from .fplsdriver import FitResult, FplsConfig, bic, fit_fpca, fit_fpls, select_p
from .jointmodel import (CumHaz, EmConfig, FjmParams, JmParams, ReducedDesign, em_fit,
                         observed_data_loglik)
from .plscore import BasisSet, apls_basis, rapls_basis, rapls_fit

__all__ = [
    "BasisSet", "CumHaz", "EmConfig", "FitResult", "FjmDataset", "FjmParams", "FpcaDecomposition",
    "FplsConfig", "FunctionOnGrid", "FunctionalGrid", "ImageMatrix", "JmParams", "ReducedDesign",
    "SubjectData", "apls_basis", "bic", "em_fit", "fit_fpca", "fit_fpls", "fpca_fjm_init",
    "fpca_svd", "functional_matvec", "inner_product", "load_dataset", "observed_data_loglik",
    "rapls_basis", "rapls_fit", "select_p", "write_dataset",
]
