"""cbrw-lab: Monte Carlo laboratory for critical branching random walks on Z^d."""

__version__ = "0.1.0"

# Shared models and errors
from .errors import (
    CbrwLabError,
    ConfigError,
    ContractError,
    ExitStatus,
    InsufficientSamplesError,
    RegimeError,
    SolverError,
    StarvationError,
    UnsupportedDimensionError,
)
from .models import Estimate, LatticePoint, Mode, Prediction, ReferenceLaw, Regime

# Walks, offspring and trees
from .lattice_walk import (
    JumpLaw,
    capacity,
    green_exact,
    hitting_prob_rw,
    jnorm,
    make_jump_law,
    simple_random_walk,
)
from .offspring import OffspringLaw, make_law, sample_tree_stream
from .cbrw_sim import CbrwConfig, CbrwOutcome, mrca_extract, run_conditioned, simulate

# Spine estimators and predictions
from .spine import SpineParams, estimate_bcap, estimate_nu, estimate_sigma_inf
from .limit_laws import (
    predict_hit_prob,
    predict_lowd,
    predict_moments4d,
    predict_mrca4d,
    predict_yaglom4d,
)

# Statistics
from .stats import EmpiricalDistribution, chi_square_discrete, ks_one_sample

# Experiments
from .config import ExperimentConfig, load_config
from .experiments import REGISTRY, ExperimentRegistry

__all__ = [
    # version
    "__version__",
    # errors
    "CbrwLabError",
    "ConfigError",
    "ContractError",
    "ExitStatus",
    "InsufficientSamplesError",
    "RegimeError",
    "SolverError",
    "StarvationError",
    "UnsupportedDimensionError",
    # models
    "Estimate",
    "LatticePoint",
    "Mode",
    "Prediction",
    "ReferenceLaw",
    "Regime",
    # walks and trees
    "CbrwConfig",
    "CbrwOutcome",
    "JumpLaw",
    "OffspringLaw",
    "capacity",
    "green_exact",
    "hitting_prob_rw",
    "jnorm",
    "make_jump_law",
    "make_law",
    "mrca_extract",
    "run_conditioned",
    "sample_tree_stream",
    "simple_random_walk",
    "simulate",
    # spine and predictions
    "SpineParams",
    "estimate_bcap",
    "estimate_nu",
    "estimate_sigma_inf",
    "predict_hit_prob",
    "predict_lowd",
    "predict_moments4d",
    "predict_mrca4d",
    "predict_yaglom4d",
    # statistics
    "EmpiricalDistribution",
    "chi_square_discrete",
    "ks_one_sample",
    # experiments
    "REGISTRY",
    "ExperimentConfig",
    "ExperimentRegistry",
    "load_config",
]
