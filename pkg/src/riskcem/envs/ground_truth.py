"""Simulator-backed stand-in for a learned ensemble.

``GroundTruthEnsemble`` exposes the same ``propagate_batch`` surface as
:class:`riskcem.ensemble.EnsembleModel`, so the planner can run on the true
dynamics. Its members are copies of one simulator that differ only in their
noise draws; the mean paths are the noise-free rollouts and therefore agree
exactly.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..ensemble import GaussianParams, ParticleBundle
from ..errors import InvalidInputError, NumericError

VAR_FLOOR = 1e-12


class AdditiveGaussianDynamics:
    """``x' = f(x, u) + sigma(x) * eps`` with a known deterministic part ``f``.

    ``noise_std`` is either a constant or a function of the state returning
    a per-dimension standard deviation.
    """

    def __init__(self, step_fn: Callable, state_dim: int, action_dim: int, noise_std=0.0):
        self.step_fn = step_fn
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.noise_std = noise_std

    def _std(self, states):
        std = self.noise_std(states) if callable(self.noise_std) else self.noise_std
        return np.broadcast_to(np.asarray(std, dtype=float), np.shape(states))

    def init_noise(self, num, rng):
        return None

    def sample_step(self, states, actions, noise, rng):
        draws = rng.standard_normal(np.shape(states)[-2:-1] + (self.state_dim,))
        return self.mean_step(states, actions) + self._std(states) * draws, noise

    def mean_step(self, states, actions):
        return np.asarray(self.step_fn(np.asarray(states, dtype=float), np.asarray(actions, dtype=float)), dtype=float)

    def step_variance(self, states, actions):
        return self._std(states) ** 2


class MomentMatchedDynamics:
    """Markov Gaussian surrogate of a simulator: exact one-step mean and variance, i.i.d. noise.

    This is the model a perfectly fit probabilistic ensemble converges to
    when the simulator carries hidden noise state (e.g. a persistent gust)
    that the observed state does not reveal.
    """

    def __init__(self, dynamics):
        self.base = dynamics
        self.state_dim = dynamics.state_dim
        self.action_dim = dynamics.action_dim

    def init_noise(self, num, rng):
        return None

    def sample_step(self, states, actions, noise, rng):
        draws = rng.standard_normal(np.shape(states)[-2:-1] + (self.state_dim,))
        std = np.sqrt(self.base.step_variance(states, actions))
        return self.base.mean_step(states, actions) + std * draws, noise

    def mean_step(self, states, actions):
        return self.base.mean_step(states, actions)

    def step_variance(self, states, actions):
        return self.base.step_variance(states, actions)


class GroundTruthEnsemble:
    def __init__(self, dynamics, num_members: int = 5):
        if num_members < 1:
            raise InvalidInputError("num_members must be >= 1")
        self.dynamics = dynamics
        self.num_members = num_members
        self.state_dim = dynamics.state_dim
        self.action_dim = dynamics.action_dim

    def _params(self, states, actions, next_mean):
        var = np.maximum(self.dynamics.step_variance(states, actions), VAR_FLOOR)
        return next_mean - states, np.log(var)

    def propagate_batch(self, initial, seqs, num_particles: int, rng: np.random.Generator, mode: str = "sample") -> ParticleBundle:
        initial = np.asarray(initial, dtype=float)
        seqs = np.asarray(seqs, dtype=float)
        if seqs.ndim != 3 or seqs.shape[2] != self.action_dim:
            raise InvalidInputError("seqs must have shape (N, H, action_dim)")
        if initial.shape != (self.state_dim,):
            raise InvalidInputError(f"initial state must have shape ({self.state_dim},)")
        n, horizon, _ = seqs.shape
        k, b, d = self.num_members, num_particles, self.state_dim
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if b < k or b % k:
            raise InvalidInputError(f"num_particles ({b}) must be a positive multiple of the ensemble size ({k})")

        particles = np.empty((n, horizon + 1, b, d))
        mean_paths = np.empty((n, horizon + 1, k, d))
        p_mean, p_logvar = np.empty((n, horizon, b, d)), np.empty((n, horizon, b, d))
        m_mean, m_logvar = np.empty((n, horizon, k, d)), np.empty((n, horizon, k, d))
        members = np.empty((horizon, b), dtype=np.int64)
        particles[:, 0] = initial
        mean_paths[:, 0] = initial
        noise = self.dynamics.init_noise(b, rng)

        for t in range(horizon):
            members[t] = rng.permutation(b) % k
            u = seqs[:, t][:, None, :]
            x = particles[:, t]
            mean_next = self.dynamics.mean_step(x, u)
            p_mean[:, t], p_logvar[:, t] = self._params(x, u, mean_next)
            if mode == "sample":
                particles[:, t + 1], noise = self.dynamics.sample_step(x, u, noise, rng)
            else:
                particles[:, t + 1] = mean_next
            # members are identical copies, so one noise-free rollout serves all K
            xm = mean_paths[:, t, :1]
            mean_next = self.dynamics.mean_step(xm, u)
            m_mean[:, t], m_logvar[:, t] = self._params(xm, u, mean_next)
            mean_paths[:, t + 1] = mean_next
            if not np.all(np.isfinite(particles[:, t + 1])):
                raise NumericError(f"non-finite propagated state at step {t}")

        return ParticleBundle(
            particles=particles,
            mean_paths=mean_paths,
            particle_params=GaussianParams(p_mean, p_logvar),
            mean_params=GaussianParams(m_mean, m_logvar),
            members=members,
        )

    def propagate(self, initial, seq, num_particles: int, rng, mode: str = "sample") -> ParticleBundle:
        bundle = self.propagate_batch(initial, np.asarray(seq, dtype=float)[None], num_particles, rng, mode)
        return ParticleBundle(
            bundle.particles[0],
            bundle.mean_paths[0],
            GaussianParams(bundle.particle_params.mean_delta[0], bundle.particle_params.log_var[0]),
            GaussianParams(bundle.mean_params.mean_delta[0], bundle.mean_params.log_var[0]),
            bundle.members,
        )
