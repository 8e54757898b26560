"""Cross-entropy-method MPC with colored-noise sampling and uncertainty-aware costs.

Candidates are scored as

    total = task + aleatoric_penalty + epistemic_bonus + safety_cost

where ``task`` is the particle-mean cost summed over the horizon. Elites
are refit with momentum, a fraction of them is carried into the next round
and (time-shifted) into the next control step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError, NumericError, PlannerFailure
from .safety import BoxConstraint, SafetyConfig, safety_cost
from .uncertainty import CostWeights, bundle_costs

log = logging.getLogger(__name__)

# cost_fn(states, actions, next_states) -> per-transition cost with the broadcast batch shape
CostFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def colored_noise(
    beta: float, horizon: int, action_dim: int, rng: np.random.Generator, size=(), keep_dc: bool = False
) -> np.ndarray:
    """Sample sequences with power spectral density proportional to ``f**-beta``.

    Returns an array of shape ``size + (horizon, action_dim)``. By default the
    zero-frequency coefficient is dropped and every sequence is standardized
    along time to zero mean and unit variance. With ``keep_dc`` the zero
    frequency gets the amplitude of the lowest nonzero one and the output is
    scaled by its theoretical standard deviation instead, so a sequence can
    carry a nonzero offset. A length-1 sequence has no spectrum and is drawn
    i.i.d. standard normal (only allowed for ``beta == 0``).
    """
    if beta < 0:
        raise InvalidInputError("noise exponent beta must be >= 0")
    size = (size,) if isinstance(size, int) else tuple(size)
    if horizon < 1:
        raise InvalidInputError("horizon must be >= 1")
    if horizon == 1:
        if beta > 0:
            raise InvalidInputError("colored noise with beta > 0 needs horizon >= 2")
        return rng.standard_normal(size + (1, action_dim))
    freqs = np.fft.rfftfreq(horizon)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-beta / 2.0)
    shape = size + (action_dim, len(freqs))
    if not keep_dc:
        coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * scale
        x = np.fft.irfft(coeffs, n=horizon, axis=-1)
        x = (x - x.mean(axis=-1, keepdims=True)) / x.std(axis=-1, keepdims=True)
        return np.swapaxes(x, -1, -2)
    scale[0] = scale[1]
    real = rng.standard_normal(shape) * scale
    imag = rng.standard_normal(shape) * scale
    # the DC (and, for even lengths, Nyquist) coefficients of a real signal are real
    imag[..., 0] = 0.0
    real[..., 0] *= np.sqrt(2.0)
    weights = scale.copy()
    if horizon % 2 == 0:
        imag[..., -1] = 0.0
        real[..., -1] *= np.sqrt(2.0)
        weights[-1] /= np.sqrt(2.0)
    sigma = 2.0 * np.sqrt(np.sum(weights[1:] ** 2) + (weights[0] ** 2) / 2.0) / horizon
    x = np.fft.irfft(real + 1j * imag, n=horizon, axis=-1) / sigma
    return np.swapaxes(x, -1, -2)


@dataclass
class PlannerConfig:
    horizon: int = 30
    num_samples: int = 128
    num_particles: int = 20
    elite_size: int = 10
    opt_iterations: int = 3
    noise_beta: float = 2.0
    noise_keep_dc: bool = True
    alpha: float = 0.1
    init_std: float = 0.5
    fraction_elites_reused: float = 0.3
    keep_previous_elites: bool = True
    shift_elites_over_time: bool = True
    execute_best_elite: bool = True
    use_mean_actions: bool = True
    relative_init: bool = True
    aleatoric_measure: str = "variance"
    cost_weights: CostWeights = field(default_factory=CostWeights)
    action_low: float = -1.0
    action_high: float = 1.0

    def validate(self) -> None:
        if self.horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if not 1 <= self.elite_size <= self.num_samples:
            raise InvalidInputError("elite_size must lie in [1, num_samples]")
        if self.opt_iterations < 1:
            raise InvalidInputError("opt_iterations must be >= 1")
        if not 0.0 <= self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in [0, 1)")
        if not 0.0 <= self.fraction_elites_reused < 1.0:
            raise InvalidInputError("fraction_elites_reused must lie in [0, 1)")
        if self.init_std <= 0:
            raise InvalidInputError("init_std must be positive")
        if not self.action_low < self.action_high:
            raise InvalidInputError("action_low must be below action_high")
        self.cost_weights.validate()


@dataclass
class CostBreakdown:
    task: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    safety: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.task + self.aleatoric + self.epistemic + self.safety

    def row(self, i) -> "CostBreakdown":
        return CostBreakdown(*(float(np.asarray(v)[i]) for v in (self.task, self.aleatoric, self.epistemic, self.safety)))


def evaluate_sequences(
    model,
    initial,
    seqs,
    cost_fn: CostFn,
    weights: CostWeights,
    num_particles: int,
    rng: np.random.Generator,
    box: Optional[BoxConstraint] = None,
    safety_cfg: Optional[SafetyConfig] = None,
    aleatoric_measure: str = "variance",
):
    """Score action sequences of shape (N, H, m); returns ``(total, breakdown)`` with (N,) arrays."""
    seqs = np.asarray(seqs, dtype=float)
    bundle = model.propagate_batch(initial, seqs, num_particles, rng)
    x = bundle.particles
    n, h, m = seqs.shape
    u = np.broadcast_to(seqs[:, :, None, :], (n, h, x.shape[-2], m))
    step_cost = cost_fn(x[:, :-1], u, x[:, 1:])
    task = step_cost.mean(axis=-1).sum(axis=-1)
    penalty, bonus = bundle_costs(bundle, weights, aleatoric_measure)
    if box is not None and safety_cfg is not None and safety_cfg.enabled:
        safe = safety_cost(bundle, box, safety_cfg)
    else:
        safe = np.zeros(len(seqs))
    breakdown = CostBreakdown(task, penalty, bonus, safe)
    return breakdown.total, breakdown


def evaluate_sequence(model, initial, seq, cost_fn: CostFn, weights: CostWeights, num_particles: int, rng, box=None, safety_cfg=None, aleatoric_measure="variance"):
    """Single-sequence form of :func:`evaluate_sequences`; returns ``(total, breakdown)`` scalars."""
    total, breakdown = evaluate_sequences(
        model, initial, np.asarray(seq, dtype=float)[None], cost_fn, weights, num_particles, rng, box, safety_cfg, aleatoric_measure
    )
    return float(total[0]), breakdown.row(0)


def shift_sequences(seqs: np.ndarray) -> np.ndarray:
    """Advance sequences one step along time, repeating the last action."""
    return np.concatenate([seqs[..., 1:, :], seqs[..., -1:, :]], axis=-2)


@dataclass
class RoundStats:
    best: float
    mean: float
    num_candidates: int


@dataclass
class PlanDiagnostics:
    rounds: list
    winner: CostBreakdown
    action: np.ndarray


class CEMPlanner:
    """Receding-horizon CEM planner. Holds the warm-start state between calls."""

    def __init__(
        self,
        config: PlannerConfig,
        action_dim: int,
        cost_fn: CostFn,
        box: Optional[BoxConstraint] = None,
        safety: Optional[SafetyConfig] = None,
    ):
        config.validate()
        self.config = config
        self.action_dim = action_dim
        self.cost_fn = cost_fn
        self.box = box
        self.safety = safety
        if safety is not None and safety.enabled and box is None:
            raise InvalidInputError("safety is enabled but no box constraint was given")
        self.mean: Optional[np.ndarray] = None
        self.elites: Optional[np.ndarray] = None

    def reset(self) -> None:
        self.mean = None
        self.elites = None

    @property
    def _weights(self) -> CostWeights:
        cw = self.config.cost_weights
        safety_w = self.safety.weight if self.safety is not None else 0.0
        return CostWeights(cw.aleatoric, cw.epistemic, safety_w)

    def plan_step(self, state, model, rng: np.random.Generator):
        """Optimize the action sequence from ``state`` and return ``(action, diagnostics)``."""
        cfg = self.config
        h, m = cfg.horizon, self.action_dim
        lo, hi = cfg.action_low, cfg.action_high
        center, half_range = 0.5 * (hi + lo), 0.5 * (hi - lo)
        if self.mean is None or not cfg.relative_init:
            mean = np.full((h, m), center)
        else:
            mean = self.mean.copy()
        std = np.full((h, m), cfg.init_std * half_range)
        std_floor = 1e-3 * cfg.init_std * half_range
        beta = cfg.noise_beta if h > 1 else 0.0
        n_reuse = int(np.floor(cfg.fraction_elites_reused * cfg.elite_size))
        eval_seed = int(rng.integers(2**63))

        rounds = []
        elites = breakdown = order = None
        for it in range(cfg.opt_iterations):
            noise = colored_noise(beta, h, m, rng, size=cfg.num_samples, keep_dc=cfg.noise_keep_dc)
            candidates = [np.clip(mean + std * noise, lo, hi)]
            if cfg.keep_previous_elites and n_reuse:
                if it == 0 and self.elites is not None:
                    candidates.append(self.elites[:n_reuse])
                elif it > 0:
                    candidates.append(elites[:n_reuse])
            if cfg.use_mean_actions and it == cfg.opt_iterations - 1:
                candidates.append(np.clip(mean, lo, hi)[None])
            candidates = np.concatenate(candidates)
            try:
                total, breakdown = evaluate_sequences(
                    model, state, candidates, self.cost_fn, self._weights, cfg.num_particles,
                    np.random.default_rng(eval_seed), self.box, self.safety, cfg.aleatoric_measure,
                )
            except NumericError as exc:
                raise NumericError(f"propagation failed in round {it}: {exc}") from exc
            finite = np.isfinite(total)
            if not finite.any():
                raise PlannerFailure(f"all {len(total)} candidate costs are non-finite in round {it}")
            total = np.where(finite, total, np.inf)
            order = np.argsort(total, kind="stable")[: cfg.elite_size]
            elites = candidates[order]
            mean = (1.0 - cfg.alpha) * elites.mean(axis=0) + cfg.alpha * mean
            std = np.maximum((1.0 - cfg.alpha) * elites.std(axis=0) + cfg.alpha * std, std_floor)
            rounds.append(RoundStats(float(total[order[0]]), float(total[finite].mean()), len(candidates)))

        best = elites[0]
        action = best[0].copy() if cfg.execute_best_elite else np.clip(mean[0], lo, hi)
        self.mean = shift_sequences(mean)
        self.elites = shift_sequences(elites) if cfg.shift_elites_over_time else elites
        return action, PlanDiagnostics(rounds=rounds, winner=breakdown.row(order[0]), action=action)
