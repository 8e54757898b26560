"""Analytic control environments and a ground-truth model adapter."""
from .bridge_maze import BridgeMazeDynamics, BridgeMazeEnv, WindConfig, coverage
from .ground_truth import AdditiveGaussianDynamics, GroundTruthEnsemble, MomentMatchedDynamics
from .integrator import ActionNoiseConfig, IntegratorDynamics, NoisyIntegratorEnv, ceiling_box

__all__ = [
    "ActionNoiseConfig",
    "AdditiveGaussianDynamics",
    "BridgeMazeDynamics",
    "BridgeMazeEnv",
    "GroundTruthEnsemble",
    "IntegratorDynamics",
    "MomentMatchedDynamics",
    "NoisyIntegratorEnv",
    "WindConfig",
    "ceiling_box",
    "coverage",
]
