"""Chance constraints on box-shaped violation sets.

Each predicted time slice is moment-matched by a diagonal Gaussian; the
probability of lying inside the box then factorizes over dimensions into
differences of standard-normal CDFs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import erfc

from .ensemble import ParticleBundle
from .errors import InvalidInputError

SIGMA_FLOOR = 1e-6
_TINY_MASS = 1e-300


@dataclass
class BoxConstraint:
    """Violation set given as per-dimension intervals; ``None`` leaves a dim unconstrained.

    Bounds may be infinite, e.g. ``(0.3, inf)`` for a ceiling.
    """

    intervals: Sequence[Optional[tuple]]

    def __post_init__(self):
        self.intervals = [None if iv is None else (float(iv[0]), float(iv[1])) for iv in self.intervals]
        active = [iv for iv in self.intervals if iv is not None]
        if not active:
            raise InvalidInputError("box constraint needs at least one constrained dimension")
        for lo, hi in active:
            if not lo < hi:
                raise InvalidInputError(f"invalid interval [{lo}, {hi}]")
        self.dims = np.array([i for i, iv in enumerate(self.intervals) if iv is not None])
        self.lower = np.array([iv[0] for iv in active])
        self.upper = np.array([iv[1] for iv in active])

    @classmethod
    def from_config(cls, intervals) -> "BoxConstraint":
        return cls([None if iv is None else (_as_bound(iv[0]), _as_bound(iv[1])) for iv in intervals])

    def to_config(self) -> list:
        return [None if iv is None else [_bound_repr(iv[0]), _bound_repr(iv[1])] for iv in self.intervals]


def _as_bound(value) -> float:
    return float(value)  # accepts "inf" / "-inf" strings


def _bound_repr(value: float):
    return value if math.isfinite(value) else ("inf" if value > 0 else "-inf")


@dataclass
class SafetyConfig:
    delta: float = 0.0
    c_max: float = 1e4
    enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidInputError("delta must lie in [0, 1]")
        if self.c_max <= 0:
            raise InvalidInputError("c_max must be positive")

    @property
    def weight(self) -> float:
        return self.c_max if self.enabled else 0.0


@dataclass
class SliceGaussian:
    mu: np.ndarray
    sigma: np.ndarray


def _moments(particles: np.ndarray):
    if particles.shape[-2] < 2:
        raise InvalidInputError("moment matching needs at least two particles")
    slices = particles[..., 1:, :, :]
    mu = slices.mean(axis=-2)
    sigma = np.maximum(slices.std(axis=-2, ddof=1), SIGMA_FLOOR)
    return mu, sigma


def moment_match(bundle: ParticleBundle) -> list[SliceGaussian]:
    """Per-step diagonal Gaussian fitted to the particles (Bessel-corrected std)."""
    mu, sigma = _moments(bundle.particles)
    return [SliceGaussian(mu[..., t, :], sigma[..., t, :]) for t in range(mu.shape[-2])]


def _norm_cdf(z):
    return 0.5 * erfc(-z / math.sqrt(2.0))


def _interval_mass(lo, hi):
    """P(lo < Z < hi) for standard normal Z, accurate in both tails."""
    upper_tail = lo > 0
    direct = _norm_cdf(hi) - _norm_cdf(lo)
    mirrored = _norm_cdf(-lo) - _norm_cdf(-hi)
    return np.clip(np.where(upper_tail, mirrored, direct), 0.0, 1.0)


def _violation_probability(mu, sigma, box: BoxConstraint):
    mu = mu[..., box.dims]
    sigma = np.maximum(sigma[..., box.dims], SIGMA_FLOOR)
    with np.errstate(invalid="ignore"):
        mass = _interval_mass((box.lower - mu) / sigma, (box.upper - mu) / sigma)
    if np.any(mass < _TINY_MASS):
        with np.errstate(divide="ignore"):
            return np.exp(np.log(mass).sum(axis=-1))
    return mass.prod(axis=-1)


def violation_probability(g: SliceGaussian, box: BoxConstraint):
    """Probability that a diagonal Gaussian slice falls inside the box."""
    return _violation_probability(np.asarray(g.mu, dtype=float), np.asarray(g.sigma, dtype=float), box)


def slice_probabilities(bundle: ParticleBundle, box: BoxConstraint) -> np.ndarray:
    """Violation probability of every time slice, shape (..., H)."""
    mu, sigma = _moments(bundle.particles)
    return _violation_probability(mu, sigma, box)


def safety_cost(bundle: ParticleBundle, box: BoxConstraint, cfg: SafetyConfig):
    """``c_max`` times the number of slices whose violation probability exceeds delta."""
    if not cfg.enabled:
        return np.zeros(bundle.particles.shape[:-3])
    probs = slice_probabilities(bundle, box)
    return cfg.weight * (probs > cfg.delta).sum(axis=-1)
