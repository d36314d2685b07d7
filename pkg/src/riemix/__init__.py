"""Gaussian mixture fitting by Riemannian Newton trust-region optimization."""

from .em import EmConfig, KppConfig, fit_em, kmeanspp_init
from .model import (
    Dataset,
    GmmParams,
    PenaltyConfig,
    Responsibilities,
    augment,
    backward_transform,
    build_penalty_config,
    forward_transform,
    objective,
    penalized_objective,
    responsibilities,
    zero_penalty,
)
from .rtr import FitReport, IterRecord, TcgConfig, TrConfig, fit_rntr
from .spd import SpdMatrix, SymMatrix, TangentVector, ThetaPoint

__all__ = [
    "Dataset",
    "EmConfig",
    "FitReport",
    "GmmParams",
    "IterRecord",
    "KppConfig",
    "PenaltyConfig",
    "Responsibilities",
    "SpdMatrix",
    "SymMatrix",
    "TangentVector",
    "TcgConfig",
    "ThetaPoint",
    "TrConfig",
    "augment",
    "backward_transform",
    "build_penalty_config",
    "fit_em",
    "fit_rntr",
    "forward_transform",
    "kmeanspp_init",
    "objective",
    "penalized_objective",
    "responsibilities",
    "zero_penalty",
]

__version__ = "0.1.0"
