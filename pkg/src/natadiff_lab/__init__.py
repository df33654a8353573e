"""Guided diffusion sampling of natural adversarial examples on an analytic Gaussian-mixture world."""

from .attack import AttackConfig, SampleRecord, natadiff_run, natadiff_similarity_run, purify, run_attacks
from .guidance import Decoder, GuidanceParams, TransformSet, adv_gradient, boundary_epsilon, cfg_epsilon
from .schedule import ScheduleTable, alpha_beta, bridge_params
from .victims import BayesVictim, MLPVictim, ShortcutVictim
from .world import ConditioningSet, MixtureWorld, OracleNoisePredictor, UNCONDITIONAL

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "SampleRecord",
    "natadiff_run",
    "natadiff_similarity_run",
    "purify",
    "run_attacks",
    "Decoder",
    "GuidanceParams",
    "TransformSet",
    "adv_gradient",
    "boundary_epsilon",
    "cfg_epsilon",
    "ScheduleTable",
    "alpha_beta",
    "bridge_params",
    "BayesVictim",
    "MLPVictim",
    "ShortcutVictim",
    "ConditioningSet",
    "MixtureWorld",
    "OracleNoisePredictor",
    "UNCONDITIONAL",
    "__version__",
]
