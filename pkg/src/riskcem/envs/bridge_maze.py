"""Planar bridge maze: three bridges over lava, gusty wind on the middle one.

The agent is a damped point mass with state ``(x0, x1, v0, v1)`` steered by
a 2-D force. It starts on the left platform and must reach ``x0 >= 12``.
All geometry lives in the constants below.

    x1
    10 ┌──────┐                     ┌───────┐
     9 │      ├═════ upper (walled) ═┤       │
     6 │      ├══════════════════════┤       │
     3 │      ├──────────────────────┤       │
     0 │ start│   middle (wind ±3.6) │  goal │
    -3 │      ├──────────────────────┤       │
    -6 │      ├────── lower ─────────┤       │
    -9 │      ├──────────────────────┤       │
   -10 └──────┘                      └───────┘
      -14    -8                      8      20   x0
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.1
DAMPING = 2.0
MAX_FORCE = 10.0
GOAL_X0 = 12.0
START = np.array([-10.0, 0.0, 0.0, 0.0])

# (x0_low, x0_high, x1_low, x1_high)
START_PLATFORM = (-14.0, -8.0, -10.0, 10.0)
GOAL_PLATFORM = (8.0, 20.0, -10.0, 10.0)
UPPER_BRIDGE = (-8.0, 8.0, 6.0, 9.0)
MIDDLE_BRIDGE = (-8.0, 8.0, -3.0, 3.0)
LOWER_BRIDGE = (-8.0, 8.0, -9.0, -6.0)
SURFACES = (START_PLATFORM, GOAL_PLATFORM, UPPER_BRIDGE, MIDDLE_BRIDGE, LOWER_BRIDGE)

WIND_REGION = (-8.0, 8.0, -3.6, 3.6)
WIND_PERIOD = 5
# Strongest gust. At 28 the centerline controller crosses the middle bridge
# in about 42% of attempts (300 seeded episodes).
WIND_MAX_FORCE = 28.0

COVERAGE_BINS = 50
COVERAGE_RANGE = ((-20.0, 20.0), (-10.0, 15.0))


@dataclass
class WindConfig:
    max_force: float = WIND_MAX_FORCE
    period: int = WIND_PERIOD
    region: tuple = WIND_REGION


def _inside(x0, x1, rect) -> np.ndarray:
    return (x0 >= rect[0]) & (x0 <= rect[1]) & (x1 >= rect[2]) & (x1 <= rect[3])


def on_surface(states) -> np.ndarray:
    states = np.asarray(states)
    x0, x1 = states[..., 0], states[..., 1]
    out = np.zeros(x0.shape, dtype=bool)
    for rect in SURFACES:
        out |= _inside(x0, x1, rect)
    return out


def in_wind_region(states, region=WIND_REGION) -> np.ndarray:
    states = np.asarray(states)
    return _inside(states[..., 0], states[..., 1], region)


def reward(states, next_states) -> np.ndarray:
    """Progress toward the goal line while on a surface, 0 at the goal, -1 in the lava."""
    states = np.asarray(states)
    next_states = np.asarray(next_states)
    progress = np.abs(states[..., 0] - GOAL_X0) - np.abs(next_states[..., 0] - GOAL_X0)
    at_goal = next_states[..., 0] >= GOAL_X0
    return np.where(at_goal, 0.0, np.where(on_surface(next_states), progress, -1.0))


def cost(states, actions, next_states) -> np.ndarray:
    return -reward(states, next_states)


def deterministic_step(states, actions, wind_force=0.0) -> np.ndarray:
    """Damped double-integrator update with walls along the upper bridge.

    ``wind_force`` acts along x1 and is applied as given; callers zero it
    outside the wind region.
    """
    states = np.asarray(states, dtype=float)
    actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
    x0, x1, v0, v1 = states[..., 0], states[..., 1], states[..., 2], states[..., 3]
    nx0 = x0 + v0 * DT
    nx1 = x1 + v1 * DT
    nv0 = v0 + (MAX_FORCE * actions[..., 0] - DAMPING * v0) * DT
    nv1 = v1 + (MAX_FORCE * actions[..., 1] + wind_force - DAMPING * v1) * DT
    nx0, nx1, nv0, nv1 = np.broadcast_arrays(nx0, nx1, nv0, nv1)
    walled = _inside(x0, x1, UPPER_BRIDGE) & (nx0 > UPPER_BRIDGE[0]) & (nx0 < UPPER_BRIDGE[1])
    if np.any(walled):
        clamped = np.clip(nx1, UPPER_BRIDGE[2], UPPER_BRIDGE[3])
        nv1 = np.where(walled & (clamped != nx1), 0.0, nv1)
        nx1 = np.where(walled, clamped, nx1)
    return np.stack([nx0, nx1, nv0, nv1], axis=-1)


class BridgeMazeDynamics:
    """Vectorized simulator used both by the environment and the ground-truth model."""

    state_dim = 4
    action_dim = 2

    def __init__(self, wind: WindConfig | None = None):
        self.wind = wind or WindConfig()

    def _draw_gust(self, shape, rng):
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return sign * rng.uniform(0.0, self.wind.max_force, shape)

    def init_noise(self, num: int, rng: np.random.Generator):
        """Per-particle wind state: current gust and steps until the next resample."""
        return {"force": self._draw_gust(num, rng), "countdown": rng.integers(1, self.wind.period + 1, num)}

    def sample_step(self, states, actions, noise, rng):
        countdown = noise["countdown"]
        resample = countdown <= 0
        fresh = self._draw_gust(countdown.shape, rng)
        force = np.where(resample, fresh, noise["force"])
        countdown = np.where(resample, self.wind.period, countdown) - 1
        applied = np.where(in_wind_region(states, self.wind.region), force, 0.0)
        nxt = deterministic_step(states, actions, applied)
        return nxt, {"force": force, "countdown": countdown}

    def mean_step(self, states, actions):
        return deterministic_step(states, actions)

    def step_variance(self, states, actions):
        states = np.asarray(states, dtype=float)
        shape = np.broadcast_shapes(states.shape, np.asarray(actions).shape[:-1] + (self.state_dim,))
        var = np.zeros(shape)
        gust_var = (self.wind.max_force * DT) ** 2 / 3.0
        var[..., 3] = np.where(in_wind_region(states, self.wind.region), gust_var, 0.0)
        return var


class BridgeMazeEnv:
    """Episodic environment; the wind process is seeded through ``rng``."""

    state_dim = 4
    action_dim = 2

    def __init__(self, wind: WindConfig | None = None, rng: np.random.Generator | None = None):
        self.dynamics = BridgeMazeDynamics(wind)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = START.copy()
        self.steps = 0
        self.wind_force = 0.0

    @property
    def wind(self) -> WindConfig:
        return self.dynamics.wind

    def reset(self) -> np.ndarray:
        self.state = START.copy()
        self.steps = 0
        self.wind_force = 0.0
        return self.state.copy()

    def step(self, action):
        if self.steps % self.wind.period == 0:
            self.wind_force = float(self.dynamics._draw_gust((), self.rng))
        self.steps += 1
        applied = self.wind_force if in_wind_region(self.state, self.wind.region) else 0.0
        nxt = deterministic_step(self.state, action, applied)
        r = float(reward(self.state, nxt))
        success = bool(nxt[0] >= GOAL_X0)
        fell = bool(not success and not on_surface(nxt))
        self.state = nxt
        return nxt.copy(), r, success or fell, {"success": success, "fell": fell, "violation": fell, "wind": applied}


def centerline_policy(state, lane_center: float = 0.0, kp: float = 2.0, kd: float = 0.5) -> np.ndarray:
    """Full forward force while holding x1 on a straight line."""
    lateral = -kp * (state[1] - lane_center) - kd * state[3]
    return np.clip(np.array([1.0, lateral]), -1.0, 1.0)


def coverage(visited) -> float:
    """Fraction of the 50x50 grid cells (over the fixed x0/x1 ranges) that were visited."""
    visited = np.asarray(visited, dtype=float)
    if visited.size == 0:
        return 0.0
    visited = visited.reshape(-1, visited.shape[-1])
    cells = []
    for axis, (lo, hi) in enumerate(COVERAGE_RANGE):
        idx = np.floor((visited[:, axis] - lo) / (hi - lo) * COVERAGE_BINS).astype(int)
        cells.append(np.clip(idx, 0, COVERAGE_BINS - 1))
    occupied = np.unique(cells[0] * COVERAGE_BINS + cells[1])
    return len(occupied) / COVERAGE_BINS**2
