"""Ensemble Kalman-Bucy filters with multilevel and unbiased estimators."""
from .errors import (ConfigInvalid, DimensionMismatch, EnkbfLabError, EstimatorFailure,
                     InsufficientReplicates, InvalidAlpha, InvalidDimension, LevelAboveFine,
                     NumericalBlowUp, PathTooDeep, TooFewParticles, ValidationError)
from .rng import RngStream, derive_stream
from .model import Model, ModelGenSpec, make_ou_model, validate_model, load_model, save_model
from .paths import (ObservationRecord, TimeGrid, aggregate_increments,
                    simulate_truth_and_observations)
from .kbf import KbfState, kbf_step, riccati_drift, run_kbf
from .enkbf import (Ensemble, EnsembleStats, Variant, check_deterministic_recursions,
                    enkbf_step, ensemble_stats, init_ensemble, run_enkbf)
from .mlmc import (CoupledEnsemble, MlConfig, MlResult, allocate_particles, coupled_step,
                   init_coupled, ml_estimate, run_coupled)
from .unbiased import (Pmf, UnbiasedConfig, UnbiasedResult, UnbiasedSample, coupled_sum_sample,
                       make_pmf, sample_pmf, single_term_sample, unbiased_estimate, xi_increment)
from .stats import SlopeFit, fit_line, fit_log2
from .kernels import backend_name

__version__ = "0.1.0"
