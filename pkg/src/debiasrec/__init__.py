"""Debiased matrix factorization with a learned reweight-and-impute risk."""

from .data import DatasetBundle, Interaction, Interactions, ObservationIndicator, load_bundle, load_explicit, save_bundle
from .errors import (
    BoundsError,
    ConfigError,
    DebiasError,
    DomainError,
    EstimationError,
    InvariantError,
    ParseError,
    TrainingError,
    UnsupportedLossError,
)
from .framework import DebiasConfig, PropensityTable, debiased_risk, fit_debiased
from .meta import MetaModel, TrainerConfig, hypergradient, train_autodebias
from .metrics import MetricsReport, auc, evaluate, ndcg_at_k, nll, popularity_slices
from .mf import FactorModel, sgd_fit
from .simulation import SimulationSpec, generate_simulation
from .world import WorldDistribution, expected_debiased_risk, optimal_config, true_risk

__version__ = "0.1.0"
