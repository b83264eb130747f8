"""Extended stochastic Liouville equation simulator for the driven spin-boson model."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DomainError, EnsembleError, ESLEError,
                     FactorizationError, InsufficientDataError, QuadratureError,
                     TrajectoryDiverged)
from .kernels import (BathSpec, KernelTable, TimeGrids, bath_correlation, build_kernel_table,
                      k_eta_eta, k_eta_mu, k_eta_nu, k_mu_mu, ohmic_spectral_density)
from .filters import FilterSet, build_filters
from .noise import NoiseRealization, WhiteDraw, draw_whites, synthesize, verify_covariances
from .dynamics import (DriveProtocol, EvolutionMode, evolve_imaginary, evolve_real,
                       initial_condition, lz_survival_probability, renormalized_tunneling,
                       unitary_oracle)
from .config import RunConfig, load_preset, parse_config
from .ensemble import (EnsembleStats, ObservableSeries, extrapolate_asymptote, merge_stats,
                       run_ensemble, run_paired_difference)

__all__ = [
    "__version__",
    "ESLEError", "DomainError", "QuadratureError", "FactorizationError", "ConfigError",
    "InsufficientDataError", "TrajectoryDiverged", "EnsembleError", "CheckpointError",
    "BathSpec", "TimeGrids", "KernelTable", "ohmic_spectral_density", "bath_correlation",
    "k_eta_eta", "k_eta_nu", "k_mu_mu", "k_eta_mu", "build_kernel_table",
    "FilterSet", "build_filters",
    "WhiteDraw", "NoiseRealization", "draw_whites", "synthesize", "verify_covariances",
    "DriveProtocol", "EvolutionMode", "evolve_imaginary", "evolve_real", "initial_condition",
    "lz_survival_probability", "renormalized_tunneling", "unitary_oracle",
    "RunConfig", "parse_config", "load_preset",
    "EnsembleStats", "ObservableSeries", "run_ensemble", "run_paired_difference",
    "merge_stats", "extrapolate_asymptote",
]
