"""Risk-averse cross-entropy-method planning with probabilistic ensembles."""
from .ensemble import EnsembleModel, GaussianParams, ModelConfig, ParticleBundle, TrainConfig, TransitionDataset, fit
from .errors import InvalidInputError, NumericError, PlannerFailure
from .planner import CEMPlanner, PlannerConfig, colored_noise, evaluate_sequence, evaluate_sequences
from .safety import BoxConstraint, SafetyConfig, moment_match, safety_cost, violation_probability
from .uncertainty import (
    CostWeights,
    UncertaintyReport,
    aleatoric_entropy,
    aleatoric_variance,
    epistemic_disagreement,
    uncertainty_costs,
    uncertainty_report,
)

__version__ = "0.1.0"
