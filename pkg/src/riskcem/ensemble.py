"""Probabilistic MLP ensemble over state deltas.

Every member maps a normalized ``(state, action)`` input to a diagonal
Gaussian over the next-state delta. Members share one architecture and are
stored stacked, so that a single batched matmul evaluates all of them.
Gradients are written out by hand; training uses Adam with decoupled weight
decay.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import truncnorm

from .errors import InvalidInputError, NumericError

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_SLACK = 1e-3
STD_FLOOR = 1e-8
CHECKPOINT_FORMAT = "riskcem.ensemble"
CHECKPOINT_VERSION = 1
# Network passes inside propagation run in single precision (about twice as
# fast); states are accumulated and training is done in double precision.
PROPAGATION_DTYPE = np.float32


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def bound_log_var(raw, min_logvar: float, max_logvar: float):
    """Soft-clip a raw log-variance, upper bound first, then lower."""
    upper = max_logvar - softplus(max_logvar - raw)
    return min_logvar + softplus(upper - min_logvar)


def bound_log_var_grad(raw, min_logvar: float, max_logvar: float):
    upper = max_logvar - softplus(max_logvar - raw)
    return expit(upper - min_logvar) * expit(max_logvar - raw)


@dataclass
class GaussianParams:
    """Mean delta and log-variance of a diagonal Gaussian (arrays of any batch shape)."""

    mean_delta: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass
class ModelConfig:
    ensemble_size: int = 5
    num_layers: int = 2
    size: int = 64
    min_logvar: float = -10.0
    max_logvar: float = 4.0


@dataclass
class TrainConfig:
    lr: float = 0.002
    batch_size: int = 512
    weight_decay: float = 1e-5
    grad_norm: Optional[float] = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class InputNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "InputNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def fit(self, inputs: np.ndarray) -> None:
        self.mean = inputs.mean(axis=0)
        self.std = np.maximum(inputs.std(axis=0), STD_FLOOR)

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return (inputs - self.mean) / self.std


class TransitionDataset:
    """Append-only store of ``(state, action, next_state)`` rows."""

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states = np.empty((0, state_dim))
        self.actions = np.empty((0, action_dim))
        self.next_states = np.empty((0, state_dim))

    def __len__(self) -> int:
        return len(self.states)

    def append(self, states, actions, next_states) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        if (
            states.shape[1] != self.state_dim
            or next_states.shape[1] != self.state_dim
            or actions.shape[1] != self.action_dim
            or not len(states) == len(actions) == len(next_states)
        ):
            raise InvalidInputError("transition rows have inconsistent dimensions")
        self.states = np.concatenate([self.states, states])
        self.actions = np.concatenate([self.actions, actions])
        self.next_states = np.concatenate([self.next_states, next_states])


@dataclass
class ParticleBundle:
    """Result of propagating action sequences through an ensemble.

    Arrays may carry leading batch axes (one per candidate sequence). Time
    is the third-from-last axis of ``particles`` / ``mean_paths``; index 0
    holds the initial state. Step ``t`` of the parameter arrays produced the
    states at index ``t + 1``.
    """

    particles: np.ndarray  # (..., H+1, B, d)
    mean_paths: np.ndarray  # (..., H+1, K, d)
    particle_params: GaussianParams  # (..., H, B, d)
    mean_params: GaussianParams  # (..., H, K, d)
    members: np.ndarray  # (H, B) member index that produced each particle step

    @property
    def horizon(self) -> int:
        return self.particles.shape[-3] - 1

    @property
    def num_particles(self) -> int:
        return self.particles.shape[-2]

    @property
    def num_members(self) -> int:
        return self.mean_paths.shape[-2]


@dataclass
class TrainingReport:
    losses: np.ndarray  # (epochs, K) mean training NLL per epoch and member
    dataset_size: int = 0

    @property
    def final_losses(self) -> np.ndarray:
        return self.losses[-1] if len(self.losses) else np.full(self.losses.shape[1], np.nan)


def _truncated_normal(rng, std: float, shape) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class EnsembleModel:
    """Ensemble of ``K`` stochastic MLPs predicting diagonal Gaussians over state deltas."""

    def __init__(self, state_dim: int, action_dim: int, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        if self.config.ensemble_size < 1:
            raise InvalidInputError("ensemble_size must be >= 1")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.normalizer = InputNormalizer.identity(state_dim + action_dim)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        k = self.config.ensemble_size
        sizes = [state_dim + action_dim] + [self.config.size] * self.config.num_layers + [2 * state_dim]
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(_truncated_normal(rng, 1.0 / math.sqrt(fan_in), (k, fan_in, fan_out)))
            self.biases.append(np.zeros((k, 1, fan_out)))

    @property
    def num_members(self) -> int:
        return self.config.ensemble_size

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "EnsembleModel":
        other = EnsembleModel.__new__(EnsembleModel)
        other.config = ModelConfig(**asdict(self.config))
        other.state_dim, other.action_dim = self.state_dim, self.action_dim
        other.normalizer = InputNormalizer(self.normalizer.mean.copy(), self.normalizer.std.copy())
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    # -- forward / backward -------------------------------------------------

    def _inputs(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if states.shape[-1] != self.state_dim or actions.shape[-1] != self.action_dim:
            raise InvalidInputError(
                f"expected state dim {self.state_dim} and action dim {self.action_dim}, "
                f"got {states.shape[-1]} and {actions.shape[-1]}"
            )
        return self.normalizer(np.concatenate([states, actions], axis=-1))

    def _forward(self, z: np.ndarray, keep_cache: bool = False, dtype=None):
        """Run stacked members on normalized inputs ``z`` of shape (K, n, in).

        ``dtype`` selects a lower working precision for inference-only passes.
        """
        weights, biases = self.weights, self.biases
        if dtype is not None:
            z = z.astype(dtype)
            weights = [w.astype(dtype) for w in weights]
            biases = [b.astype(dtype) for b in biases]
        h = z
        cache = [z]
        pre = []
        for w, b in zip(weights[:-1], biases[:-1]):
            a = h @ w
            a += b
            if keep_cache:
                h = silu(a)
                pre.append(a)
                cache.append(h)
            else:
                # in-place x / (1 + e^-x); much faster than expit in single precision
                with np.errstate(over="ignore"):
                    t = np.exp(-a)
                t += 1.0
                a /= t
                h = a
        out = h @ weights[-1] + biases[-1]
        d = self.state_dim
        mean_delta, raw = out[..., :d], out[..., d:]
        if keep_cache:
            return mean_delta, raw, (cache, pre)
        return mean_delta, raw

    def _backward(self, d_out: np.ndarray, cache) -> list[np.ndarray]:
        hs, pre = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = d_out
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = np.swapaxes(hs[layer], 1, 2) @ delta
            grads_b[layer] = delta.sum(axis=1, keepdims=True)
            if layer > 0:
                delta = (delta @ np.swapaxes(self.weights[layer], 1, 2)) * silu_grad(pre[layer - 1])
        return [g for pair in zip(grads_w, grads_b) for g in pair]

    def _predict_stacked(self, states: np.ndarray, actions: np.ndarray, dtype=None) -> GaussianParams:
        mean_delta, raw = self._forward(self._inputs(states, actions), dtype=dtype)
        if dtype is not None:
            mean_delta, raw = mean_delta.astype(float), raw.astype(float)
        log_var = bound_log_var(raw, self.config.min_logvar, self.config.max_logvar)
        return GaussianParams(mean_delta, log_var)

    def predict(self, states, actions) -> GaussianParams:
        """Evaluate every member on the same inputs; result arrays are (K, ..., d)."""
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        batch_shape = np.broadcast_shapes(states.shape[:-1], actions.shape[:-1])
        s = np.broadcast_to(states, batch_shape + (self.state_dim,)).reshape(1, -1, self.state_dim)
        a = np.broadcast_to(actions, batch_shape + (self.action_dim,)).reshape(1, -1, self.action_dim)
        k = self.num_members
        out = self._predict_stacked(np.broadcast_to(s, (k,) + s.shape[1:]), np.broadcast_to(a, (k,) + a.shape[1:]))
        shape = (k,) + batch_shape + (self.state_dim,)
        return GaussianParams(out.mean_delta.reshape(shape), out.log_var.reshape(shape))

    def forward(self, member: int, state, action) -> GaussianParams:
        """Gaussian parameters of one member for a single ``(state, action)`` pair."""
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float)
        if state.shape != (self.state_dim,) or action.shape != (self.action_dim,):
            raise InvalidInputError(
                f"expected shapes ({self.state_dim},) and ({self.action_dim},), got {state.shape} and {action.shape}"
            )
        if not 0 <= member < self.num_members:
            raise InvalidInputError(f"member index {member} out of range")
        z = self._inputs(state, action)[None, None, :]
        h = z
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = silu(h @ w[member] + b[member])
        out = (h @ self.weights[-1][member] + self.biases[-1][member])[0, 0]
        d = self.state_dim
        if not np.all(np.isfinite(out)):
            raise NumericError(f"member {member} produced non-finite output")
        return GaussianParams(out[:d], bound_log_var(out[d:], self.config.min_logvar, self.config.max_logvar))

    # -- loss ---------------------------------------------------------------

    def loss_and_grads(self, states, actions, next_states, with_grads: bool = True):
        """Per-member Gaussian NLL on stacked batches of shape (K, n, .) and its gradients."""
        z = self._inputs(states, actions)
        mean_delta, raw, cache = self._forward(z, keep_cache=True)
        cfg = self.config
        log_var = bound_log_var(raw, cfg.min_logvar, cfg.max_logvar)
        inv_var = np.exp(-log_var)
        resid = (np.asarray(next_states, dtype=float) - np.asarray(states, dtype=float)) - mean_delta
        per_row = 0.5 * (LOG_2PI + log_var + resid**2 * inv_var).sum(axis=-1)
        losses = per_row.mean(axis=-1)
        if not with_grads:
            return losses, None
        n = z.shape[1]
        d_mean = -resid * inv_var / n
        d_logvar = 0.5 * (1.0 - resid**2 * inv_var) / n
        d_raw = d_logvar * bound_log_var_grad(raw, cfg.min_logvar, cfg.max_logvar)
        grads = self._backward(np.concatenate([d_mean, d_raw], axis=-1), cache)
        return losses, grads

    def nll_loss(self, member: int, states, actions, next_states) -> float:
        """Mean over rows of the summed per-dimension Gaussian negative log-likelihood."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if len(states) == 0:
            raise InvalidInputError("nll_loss needs a nonempty batch")
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
        if not 0 <= member < self.num_members:
            raise InvalidInputError(f"member index {member} out of range")
        k = self.num_members
        tile = lambda x: np.broadcast_to(x, (k,) + x.shape)  # noqa: E731
        losses, _ = self.loss_and_grads(tile(states), tile(actions), tile(next_states), with_grads=False)
        loss = float(losses[member])
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss for member {member}")
        return loss

    # -- propagation --------------------------------------------------------

    def propagate(self, initial, seq, num_particles: int, rng: np.random.Generator, mode: str = "sample") -> ParticleBundle:
        """Propagate a single action sequence of shape (H, m); see :meth:`propagate_batch`."""
        seq = np.asarray(seq, dtype=float)
        if seq.ndim != 2:
            raise InvalidInputError("seq must have shape (H, action_dim)")
        bundle = self.propagate_batch(initial, seq[None], num_particles, rng, mode)
        return ParticleBundle(
            particles=bundle.particles[0],
            mean_paths=bundle.mean_paths[0],
            particle_params=GaussianParams(bundle.particle_params.mean_delta[0], bundle.particle_params.log_var[0]),
            mean_params=GaussianParams(bundle.mean_params.mean_delta[0], bundle.mean_params.log_var[0]),
            members=bundle.members,
        )

    def propagate_batch(self, initial, seqs, num_particles: int, rng: np.random.Generator, mode: str = "sample") -> ParticleBundle:
        """Sample particle trajectories (TS1 mixing) plus one mean trajectory per member.

        ``seqs`` has shape (N, H, m). The member assignment and the standard
        normal draws are shared by all N sequences, which gives common random
        numbers when the sequences are ranked against each other.
        """
        initial = np.asarray(initial, dtype=float)
        seqs = np.asarray(seqs, dtype=float)
        if seqs.ndim != 3 or seqs.shape[2] != self.action_dim:
            raise InvalidInputError("seqs must have shape (N, H, action_dim)")
        if initial.shape != (self.state_dim,):
            raise InvalidInputError(f"initial state must have shape ({self.state_dim},)")
        if mode not in ("sample", "mean"):
            raise InvalidInputError(f"unknown propagation mode {mode!r}")
        n, horizon, _ = seqs.shape
        k, b, d = self.num_members, num_particles, self.state_dim
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if b < k or b % k:
            raise InvalidInputError(f"num_particles ({b}) must be a positive multiple of the ensemble size ({k})")
        per = b // k

        particles = np.empty((n, horizon + 1, b, d))
        mean_paths = np.empty((n, horizon + 1, k, d))
        p_mean = np.empty((n, horizon, b, d))
        p_logvar = np.empty((n, horizon, b, d))
        m_mean = np.empty((n, horizon, k, d))
        m_logvar = np.empty((n, horizon, k, d))
        members = np.empty((horizon, b), dtype=np.int64)
        particles[:, 0] = initial
        mean_paths[:, 0] = initial

        for t in range(horizon):
            assign = rng.permutation(b) % k
            eps = rng.standard_normal((b, d)) if mode == "sample" else None
            members[t] = assign
            order = np.argsort(assign, kind="stable")
            u = seqs[:, t]
            # rows grouped by member: (K, N*per) particle rows followed by (K, N) mean-path rows
            xs = particles[:, t][:, order].reshape(n, k, per, d).transpose(1, 0, 2, 3).reshape(k, n * per, d)
            us = np.broadcast_to(u[None, :, None, :], (k, n, per, self.action_dim)).reshape(k, n * per, -1)
            xm = mean_paths[:, t].transpose(1, 0, 2)
            um = np.broadcast_to(u[None], (k, n, self.action_dim))
            out = self._predict_stacked(
                np.concatenate([xs, xm], axis=1), np.concatenate([us, um], axis=1), dtype=PROPAGATION_DTYPE
            )
            mu_p = out.mean_delta[:, : n * per].reshape(k, n, per, d).transpose(1, 0, 2, 3).reshape(n, b, d)
            lv_p = out.log_var[:, : n * per].reshape(k, n, per, d).transpose(1, 0, 2, 3).reshape(n, b, d)
            inv = np.empty(b, dtype=np.int64)
            inv[order] = np.arange(b)
            mu_p, lv_p = mu_p[:, inv], lv_p[:, inv]
            nxt = particles[:, t] + mu_p
            if eps is not None:
                nxt = nxt + np.exp(0.5 * lv_p) * eps
            mu_m = out.mean_delta[:, n * per :].transpose(1, 0, 2)
            lv_m = out.log_var[:, n * per :].transpose(1, 0, 2)
            nxt_m = mean_paths[:, t] + mu_m
            if not (np.all(np.isfinite(nxt)) and np.all(np.isfinite(nxt_m))):
                raise NumericError(f"non-finite propagated state at step {t}")
            particles[:, t + 1] = nxt
            mean_paths[:, t + 1] = nxt_m
            p_mean[:, t], p_logvar[:, t] = mu_p, lv_p
            m_mean[:, t], m_logvar[:, t] = mu_m, lv_m

        return ParticleBundle(
            particles=particles,
            mean_paths=mean_paths,
            particle_params=GaussianParams(p_mean, p_logvar),
            mean_params=GaussianParams(m_mean, m_logvar),
            members=members,
        )

    # -- checkpoints --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "config": asdict(self.config),
            "normalizer": {"mean": self.normalizer.mean.tolist(), "std": self.normalizer.std.tolist()},
            "members": [
                np.concatenate([p[i].ravel() for p in self.params]).tolist() for i in range(self.num_members)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleModel":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError("not an ensemble checkpoint")
        if data.get("format_version") != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {data.get('format_version')}")
        model = cls(data["state_dim"], data["action_dim"], ModelConfig(**data["config"]))
        model.normalizer = InputNormalizer(np.array(data["normalizer"]["mean"]), np.array(data["normalizer"]["std"]))
        if len(data["members"]) != model.num_members:
            raise InvalidInputError("checkpoint member count does not match its config")
        for i, flat in enumerate(data["members"]):
            flat = np.asarray(flat, dtype=float)
            offset = 0
            for p in model.params:
                size = p[i].size
                if offset + size > len(flat):
                    raise InvalidInputError("checkpoint weights are truncated")
                p[i] = flat[offset : offset + size].reshape(p[i].shape)
                offset += size
            if offset != len(flat):
                raise InvalidInputError("checkpoint weights have unexpected length")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EnsembleModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class _AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def fit(
    model: EnsembleModel,
    data: TransitionDataset,
    epochs: int,
    config: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> TrainingReport:
    """Train every member on its own shuffled mini-batches (Adam, decoupled weight decay).

    The input normalizer is refit on the full dataset first. Training state
    is updated in place on ``model``.
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(data)
    if n == 0:
        raise InvalidInputError("cannot fit on an empty dataset")
    model.normalizer.fit(np.concatenate([data.states, data.actions], axis=1))
    k = model.num_members
    params = model.params
    adam = _AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    bs = min(config.batch_size, n)
    losses = np.zeros((epochs, k))

    for epoch in range(epochs):
        perms = np.stack([rng.permutation(n) for _ in range(k)])
        total = np.zeros(k)
        for start in range(0, n, bs):
            idx = perms[:, start : start + bs]
            batch_loss, grads = model.loss_and_grads(data.states[idx], data.actions[idx], data.next_states[idx])
            if not np.all(np.isfinite(batch_loss)):
                bad = int(np.flatnonzero(~np.isfinite(batch_loss))[0])
                raise NumericError(f"non-finite training loss for member {bad} in epoch {epoch + 1}")
            total += batch_loss * idx.shape[1]
            if config.grad_norm is not None:
                norms = np.sqrt(sum((g**2).sum(axis=(1, 2)) for g in grads))
                scale = np.minimum(1.0, config.grad_norm / np.maximum(norms, 1e-12))
                grads = [g * scale[:, None, None] for g in grads]
            _adamw_step(params, grads, adam, config)
        losses[epoch] = total / n
    return TrainingReport(losses=losses, dataset_size=n)


def _adamw_step(params, grads, state: _AdamState, cfg: TrainConfig) -> None:
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * ((m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p)
