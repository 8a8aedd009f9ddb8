"""Monte Carlo simulator for iterative continuous-variable entanglement distillation."""

__version__ = "0.1.0"

from .exceptions import ConfigError, NumericalFailure, PhysicalityError, UnreachableYieldError
from .gaussian import GaussianEnsemble, GaussianState, SymplecticOp
from .measures import MeasureReport, log_negativity, purity, total_variance
from .protocol import ITERATIVE, SINGLE_STAGE, Distillate, ProtocolConfig, run_batch, run_trial
from .source import NoiseSpec, SqueezerSpec, make_pair, make_squeezed
from .tomography import FockDM, PatternTomography, TomographyPlan, fock_rho

__all__ = [
    "ConfigError",
    "Distillate",
    "FockDM",
    "GaussianEnsemble",
    "GaussianState",
    "ITERATIVE",
    "MeasureReport",
    "NoiseSpec",
    "NumericalFailure",
    "PatternTomography",
    "PhysicalityError",
    "ProtocolConfig",
    "SINGLE_STAGE",
    "SqueezerSpec",
    "SymplecticOp",
    "TomographyPlan",
    "UnreachableYieldError",
    "fock_rho",
    "log_negativity",
    "make_pair",
    "make_squeezed",
    "purity",
    "run_batch",
    "run_trial",
    "total_variance",
]
