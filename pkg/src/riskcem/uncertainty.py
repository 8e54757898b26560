"""Aleatoric / epistemic uncertainty of a propagated particle bundle."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ensemble import ParticleBundle
from .errors import InvalidInputError

VAR_FLOOR = 1e-12
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass
class CostWeights:
    aleatoric: float = 0.0
    epistemic: float = 0.0
    safety: float = 0.0

    def validate(self) -> None:
        if self.aleatoric < 0 or self.epistemic < 0 or self.safety < 0:
            raise InvalidInputError("cost weights must be nonnegative")


@dataclass
class UncertaintyReport:
    aleatoric_var: np.ndarray  # (..., H, d)
    aleatoric_entropy: np.ndarray  # (..., H)
    epistemic_var: np.ndarray  # (..., H, d)


def aleatoric_variance(bundle: ParticleBundle) -> np.ndarray:
    """Mean over particles of the variance predicted for each particle step."""
    return np.exp(bundle.particle_params.log_var).mean(axis=-2)


def aleatoric_entropy(bundle: ParticleBundle) -> np.ndarray:
    """Mean over particles of the differential entropy of each predicted Gaussian."""
    log_var = np.maximum(bundle.particle_params.log_var, math.log(VAR_FLOOR))
    return (_HALF_LOG_2PIE + 0.5 * log_var).sum(axis=-1).mean(axis=-1)


def epistemic_disagreement(bundle: ParticleBundle) -> np.ndarray:
    """Spread across members of the Gaussian outputs along their own mean paths.

    Population variance of the predicted means plus population variance of
    the predicted variances. A single-member ensemble has no disagreement
    and yields zeros.
    """
    params = bundle.mean_params
    if params.mean_delta.shape[-2] == 1:
        return np.zeros(params.mean_delta.shape[:-2] + params.mean_delta.shape[-1:])
    predicted = bundle.mean_paths[..., :-1, :, :] + params.mean_delta
    return predicted.var(axis=-2) + np.exp(params.log_var).var(axis=-2)


def uncertainty_report(bundle: ParticleBundle) -> UncertaintyReport:
    return UncertaintyReport(
        aleatoric_var=aleatoric_variance(bundle),
        aleatoric_entropy=aleatoric_entropy(bundle),
        epistemic_var=epistemic_disagreement(bundle),
    )


def uncertainty_costs(report: UncertaintyReport, weights: CostWeights, aleatoric_measure: str = "variance"):
    """Aleatoric penalty (>= 0) and epistemic bonus (<= 0), summed over time.

    With the variance measure each term sums per-dimension standard
    deviations; the entropy measure sums the per-step expected entropy.
    Works on batched reports; leading axes are preserved.
    """
    weights.validate()
    if report.aleatoric_var.shape[-2] < 1:
        raise InvalidInputError("report horizon must be >= 1")
    if aleatoric_measure == "variance":
        aleatoric = np.sqrt(report.aleatoric_var).sum(axis=(-2, -1))
    elif aleatoric_measure == "entropy":
        aleatoric = report.aleatoric_entropy.sum(axis=-1)
    else:
        raise InvalidInputError(f"unknown aleatoric measure {aleatoric_measure!r}")
    penalty = weights.aleatoric * aleatoric
    bonus = -weights.epistemic * np.sqrt(report.epistemic_var).sum(axis=(-2, -1))
    return penalty, bonus


def bundle_costs(bundle: ParticleBundle, weights: CostWeights, aleatoric_measure: str = "variance"):
    """Equivalent to ``uncertainty_costs(uncertainty_report(bundle), ...)``; zero-weight terms are skipped."""
    weights.validate()
    if aleatoric_measure not in ("variance", "entropy"):
        raise InvalidInputError(f"unknown aleatoric measure {aleatoric_measure!r}")
    batch = bundle.particles.shape[:-3]
    penalty = np.zeros(batch)
    bonus = np.zeros(batch)
    if weights.aleatoric:
        if aleatoric_measure == "entropy":
            penalty = weights.aleatoric * aleatoric_entropy(bundle).sum(axis=-1)
        else:
            penalty = weights.aleatoric * np.sqrt(aleatoric_variance(bundle)).sum(axis=(-2, -1))
    if weights.epistemic:
        bonus = -weights.epistemic * np.sqrt(epistemic_disagreement(bundle)).sum(axis=(-2, -1))
    return penalty, bonus
