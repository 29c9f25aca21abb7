"""Spectral renormalization and orthogonalized updates for low-rank factorized training."""

from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    FitError,
    NonFiniteError,
    RankDeficientError,
    ShapeError,
    SpectronError,
)
from .matrix import Rng, svd_oracle
from .optim import FactorizedWeight, OptimizerVariant, SpectronState, init_state, spectron_step, variant_step
from .spectral import exact_spectral_norm, ortho_newton_schulz, power_iter

__version__ = "0.1.0"
