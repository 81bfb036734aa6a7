"""Stochastic time-fractional diffusion-wave equations: forward solver and
source recovery from boundary flux moments."""

from stfde.errors import (
    AccuracyError,
    ConvergenceError,
    DomainError,
    GridMismatchError,
    RegimeError,
    StageError,
    STFDEError,
)
from stfde.fracops import GridFunction, TimeGrid
from stfde.mlf import ml, ml_signed
from stfde.spectral import EigenSystem, SpatialField, elliptic_1d, laplace_1d
from stfde.forward import Scenario, simulate, stream_statistics
from stfde.inverse import InverseSetup, MomentData, recover_sources, simulate_moments

__version__ = "0.1.0"

__all__ = [
    "AccuracyError",
    "ConvergenceError",
    "DomainError",
    "EigenSystem",
    "GridFunction",
    "GridMismatchError",
    "InverseSetup",
    "MomentData",
    "RegimeError",
    "STFDEError",
    "Scenario",
    "SpatialField",
    "StageError",
    "TimeGrid",
    "elliptic_1d",
    "laplace_1d",
    "ml",
    "ml_signed",
    "recover_sources",
    "simulate",
    "simulate_moments",
    "stream_statistics",
]
