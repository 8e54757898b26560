"""Noisy 1-D cart with a body height and a low ceiling.

State is ``(position, velocity, height)``; the two actions drive forward
thrust and vertical thrust. Above the velocity gate both actions receive
additive Gaussian noise, and running fast lifts the body, so speed has to
be traded against the risk of touching the ceiling. Violations are counted
but never end the episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..safety import BoxConstraint

DT = 0.1
THRUST = 2.0
DRAG = 2.0
LIFT_GAIN = 1.0
SPRING = 2.0
SPEED_LIFT = 0.2
REST_HEIGHT = 0.15
VELOCITY_GATE = 0.6
NOISE_VAR = 0.2
CEILING = 0.3
START = np.array([0.0, 0.0, REST_HEIGHT])


@dataclass
class ActionNoiseConfig:
    gate: float = VELOCITY_GATE
    mean: list = field(default_factory=lambda: [0.0, 0.0])
    var: list = field(default_factory=lambda: [NOISE_VAR, NOISE_VAR])


def deterministic_step(states, actions) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    p, v, h = states[..., 0], states[..., 1], states[..., 2]
    new_p = p + v * DT
    new_v = v + (THRUST * actions[..., 0] - DRAG * v) * DT
    new_h = h + (LIFT_GAIN * actions[..., 1] + SPEED_LIFT * v - SPRING * (h - REST_HEIGHT)) * DT
    return np.stack(np.broadcast_arrays(new_p, new_v, new_h), axis=-1)


def gated(states, gate: float = VELOCITY_GATE) -> np.ndarray:
    return np.asarray(states)[..., 1] > gate


def violation(states, ceiling: float = CEILING) -> np.ndarray:
    return np.asarray(states)[..., 2] > ceiling


def reward(states) -> np.ndarray:
    """Forward velocity, i.e. the distance covered per unit time during the step."""
    return np.asarray(states)[..., 1]


def make_cost(violation_penalty: float = 0.0, ceiling: float = CEILING):
    """Planning cost ``-reward``, optionally plus a penalty per particle above the ceiling."""

    def cost(states, actions, next_states):
        c = -reward(states)
        if violation_penalty:
            c = c + violation_penalty * violation(next_states, ceiling)
        return c

    return cost


class IntegratorDynamics:
    state_dim = 3
    action_dim = 2

    def __init__(self, noise: ActionNoiseConfig | None = None):
        self.noise = noise or ActionNoiseConfig()
        self._mean = np.asarray(self.noise.mean, dtype=float)
        self._std = np.sqrt(np.asarray(self.noise.var, dtype=float))

    def _noisy(self, states, actions, draws):
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        return actions + gated(states, self.noise.gate)[..., None] * (self._mean + self._std * draws)

    def init_noise(self, num: int, rng):
        return None

    def sample_step(self, states, actions, noise, rng):
        # one draw per particle, shared across leading candidate axes
        draws = rng.standard_normal(np.shape(states)[-2:-1] + (2,))
        return deterministic_step(states, self._noisy(states, actions, draws)), noise

    def mean_step(self, states, actions):
        return deterministic_step(states, self._noisy(states, actions, 0.0))

    def step_variance(self, states, actions):
        states = np.asarray(states, dtype=float)
        shape = np.broadcast_shapes(states.shape, np.asarray(actions).shape[:-1] + (3,))
        on = gated(states, self.noise.gate)
        var = np.zeros(shape)
        var[..., 1] = on * (THRUST * DT) ** 2 * self.noise.var[0]
        var[..., 2] = on * (LIFT_GAIN * DT) ** 2 * self.noise.var[1]
        return var


class NoisyIntegratorEnv:
    state_dim = 3
    action_dim = 2

    def __init__(self, noise: ActionNoiseConfig | None = None, rng: np.random.Generator | None = None, ceiling: float = CEILING):
        self.dynamics = IntegratorDynamics(noise)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ceiling = ceiling
        self.state = START.copy()

    def reset(self) -> np.ndarray:
        self.state = START.copy()
        return self.state.copy()

    def step(self, action):
        nxt, _ = self.dynamics.sample_step(self.state, action, None, self.rng)
        r = float(reward(self.state))
        hit = bool(violation(nxt, self.ceiling))
        self.state = nxt
        return nxt.copy(), r, False, {"success": False, "fell": False, "violation": hit}


def ceiling_box(ceiling: float = CEILING) -> BoxConstraint:
    return BoxConstraint([None, None, (ceiling, float("inf"))])
