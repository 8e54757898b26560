"""Training, evaluation and parameter sweeps.

Every random stream is derived from the experiment seed through a
``SeedSequence`` keyed by (stream, iteration, episode, role), so adding
episodes or iterations never changes the draws of earlier ones.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..ensemble import EnsembleModel, ModelConfig, TrainConfig, TransitionDataset, fit
from ..envs import bridge_maze, integrator
from ..envs.bridge_maze import BridgeMazeEnv, WindConfig
from ..envs.ground_truth import GroundTruthEnsemble, MomentMatchedDynamics
from ..envs.integrator import ActionNoiseConfig, NoisyIntegratorEnv
from ..errors import InvalidInputError, NumericError, PlannerFailure, RiskCEMError
from ..planner import CEMPlanner, PlannerConfig
from ..safety import BoxConstraint, SafetyConfig
from ..uncertainty import CostWeights
from .config import ExperimentConfig, from_dict
from .records import RUN_SCHEMA, SUMMARY_SCHEMA, RecordWriter, episode_columns, read_records, write_rows

log = logging.getLogger(__name__)

STREAM_MODEL, STREAM_TRAIN, STREAM_FIT, STREAM_EVAL = 0, 1, 2, 3
ROLE_ENV, ROLE_AGENT = 0, 1
GROUND_TRUTH_FORMAT = "riskcem.ground_truth"


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# ---------------------------------------------------------------- factories


def build_env(cfg: ExperimentConfig, rng: np.random.Generator):
    e = cfg.env
    if e.id == "bridge_maze":
        w = e.wind
        wind = WindConfig(
            max_force=bridge_maze.WIND_MAX_FORCE if w.max_force is None else w.max_force,
            period=w.period,
            region=bridge_maze.WIND_REGION if w.region is None else tuple(float(v) for v in w.region),
        )
        return BridgeMazeEnv(wind, rng)
    noise = ActionNoiseConfig(gate=e.action_noise.gate, mean=list(e.action_noise.mean), var=list(e.action_noise.var))
    return NoisyIntegratorEnv(noise, rng, ceiling=e.ceiling)


def cost_function(cfg: ExperimentConfig):
    if cfg.env.id == "bridge_maze":
        return bridge_maze.cost
    return integrator.make_cost(cfg.env.violation_penalty, cfg.env.ceiling)


def violation_box(cfg: ExperimentConfig) -> Optional[BoxConstraint]:
    if cfg.safety.box is not None:
        return BoxConstraint.from_config(cfg.safety.box)
    if cfg.env.id == "noisy_integrator":
        return integrator.ceiling_box(cfg.env.ceiling)
    return None


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.ensemble_size, m.num_layers, m.size, m.min_logvar, m.max_logvar)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    m = cfg.model
    return TrainConfig(lr=m.lr, batch_size=m.batch_size, weight_decay=m.weight_decay, grad_norm=m.grad_norm)


def build_model(cfg: ExperimentConfig):
    env = build_env(cfg, np.random.default_rng(0))
    if cfg.model.kind == "learned":
        return EnsembleModel(env.state_dim, env.action_dim, model_config(cfg), seed=derived_seed(cfg.seed, STREAM_MODEL))
    dynamics = env.dynamics
    if cfg.model.kind == "moment_matched":
        dynamics = MomentMatchedDynamics(dynamics)
    return GroundTruthEnsemble(dynamics, cfg.model.ensemble_size)


def build_planner(cfg: ExperimentConfig, action_dim: int) -> CEMPlanner:
    p = cfg.planner
    pc = PlannerConfig(
        horizon=p.horizon,
        num_samples=p.num_samples,
        num_particles=p.num_particles,
        elite_size=p.elite_size,
        opt_iterations=p.opt_iterations,
        noise_beta=p.noise_beta,
        noise_keep_dc=p.noise_keep_dc,
        alpha=p.alpha,
        init_std=p.init_std,
        fraction_elites_reused=p.fraction_elites_reused,
        keep_previous_elites=p.keep_previous_elites,
        shift_elites_over_time=p.shift_elites_over_time,
        execute_best_elite=p.execute_best_elite,
        use_mean_actions=p.use_mean_actions,
        relative_init=p.relative_init,
        aleatoric_measure=p.aleatoric_measure,
        cost_weights=CostWeights(aleatoric=p.w_aleatoric, epistemic=p.w_epistemic),
    )
    s = cfg.safety
    safety = SafetyConfig(delta=s.delta, c_max=s.c_max, enabled=s.enabled)
    return CEMPlanner(pc, action_dim, cost_function(cfg), box=violation_box(cfg), safety=safety)


def save_checkpoint(model, cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    if isinstance(model, EnsembleModel):
        model.save(path)
        return
    data = {"format": GROUND_TRUTH_FORMAT, "kind": cfg.model.kind, "env": cfg.env.id, "ensemble_size": model.num_members}
    path.write_text(json.dumps(data, indent=1))


def load_checkpoint(path, cfg: ExperimentConfig):
    """Load a model for ``cfg``; dimension or kind mismatches raise ``InvalidInputError``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    env = build_env(cfg, np.random.default_rng(0))
    if data.get("format") == GROUND_TRUTH_FORMAT:
        if data.get("env") != cfg.env.id:
            raise InvalidInputError(f"checkpoint was made for {data.get('env')!r}, config uses {cfg.env.id!r}")
        return build_model(cfg)
    model = EnsembleModel.from_dict(data)
    if (model.state_dim, model.action_dim) != (env.state_dim, env.action_dim):
        raise InvalidInputError(
            f"checkpoint dimensions (state {model.state_dim}, action {model.action_dim}) do not match "
            f"{cfg.env.id} (state {env.state_dim}, action {env.action_dim})"
        )
    return model


# ---------------------------------------------------------------- episodes


@dataclass
class EpisodeResult:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    violations: np.ndarray
    success: bool
    fell: bool
    breakdown: dict = field(default_factory=dict)
    plan_seconds: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


def run_episode(env, planner: Optional[CEMPlanner], model, length: int, rng: np.random.Generator, log_path=None) -> EpisodeResult:
    """Roll out one episode; ``planner=None`` draws uniform random actions instead."""
    state = env.reset()
    if planner is not None:
        planner.reset()
    states, actions, nexts, rewards, flags = [], [], [], [], []
    terms = {"task": [], "aleatoric": [], "epistemic": [], "safety": []}
    plan_seconds = []
    info = {"success": False, "fell": False}
    for _ in range(length):
        if planner is None:
            action = rng.uniform(-1.0, 1.0, env.action_dim)
        else:
            t0 = time.perf_counter()
            action, diag = planner.plan_step(state, model, rng)
            plan_seconds.append(time.perf_counter() - t0)
            for name in terms:
                terms[name].append(getattr(diag.winner, name))
        nxt, reward, done, info = env.step(action)
        states.append(state)
        actions.append(np.asarray(action, dtype=float))
        nexts.append(nxt)
        rewards.append(reward)
        flags.append(bool(info["violation"]))
        state = nxt
        if done:
            break
    result = EpisodeResult(
        states=np.array(states),
        actions=np.array(actions),
        next_states=np.array(nexts),
        rewards=np.array(rewards, dtype=float),
        violations=np.array(flags, dtype=bool),
        success=bool(info["success"]),
        fell=bool(info["fell"]),
        breakdown={k: (float(np.mean(v)) if v else None) for k, v in terms.items()},
        plan_seconds=plan_seconds,
    )
    if log_path is not None:
        _write_episode_log(log_path, result, env.state_dim, env.action_dim)
    return result


def _write_episode_log(path, ep: EpisodeResult, state_dim: int, action_dim: int) -> None:
    columns = episode_columns(state_dim, action_dim)
    with RecordWriter(path, columns) as writer:
        for t in range(ep.steps):
            row = {"t": t, "reward": ep.rewards[t], "violation": ep.violations[t]}
            row.update({f"state_{i}": ep.states[t, i] for i in range(state_dim)})
            row.update({f"action_{i}": ep.actions[t, i] for i in range(action_dim)})
            writer.write(row)


def _episode_row(cfg, kind, iteration, episode, ep: EpisodeResult, dataset_size, coverage) -> dict:
    b = ep.breakdown
    return {
        "row_type": kind,
        "iteration": iteration,
        "episode": episode,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "dataset_size": dataset_size,
        "steps": ep.steps,
        "return": ep.total_return,
        "success": ep.success,
        "fell": ep.fell,
        "violations": int(ep.violations.sum()),
        "coverage": coverage,
        "cost_task": b.get("task"),
        "cost_aleatoric": b.get("aleatoric"),
        "cost_epistemic": b.get("epistemic"),
        "cost_safety": b.get("safety"),
    }


def _positions(ep: EpisodeResult) -> np.ndarray:
    return np.concatenate([ep.states[:1, :2], ep.next_states[:, :2]]) if ep.steps else np.empty((0, 2))


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _prepare_out(cfg: ExperimentConfig, out_dir) -> Path:
    """Create the run directory; refuse to overwrite a run made from a different config."""
    out = Path(out_dir if out_dir is not None else cfg.output)
    previous = out / "summary.json"
    if previous.exists():
        try:
            old_hash = json.loads(previous.read_text()).get("config_hash")
        except ValueError:
            old_hash = None
        if old_hash is not None and old_hash != cfg.hash():
            raise InvalidInputError(
                f"{out} holds a run with config hash {old_hash}, this config hashes to {cfg.hash()}; "
                "choose another output directory"
            )
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainingResult:
    model: object
    out_dir: Path
    summary: dict


def run_training(cfg: ExperimentConfig, out_dir=None) -> TrainingResult:
    """Alternate data collection and model fitting; results are written as they are produced.

    Files: ``run.csv`` (one row per collected episode plus one ``fit`` row per
    iteration), ``episodes/*.csv``, ``model.ckpt``, ``summary.json`` and
    ``timing.json`` (wall clock, excluded from the reproducibility contract).
    """
    out = _prepare_out(cfg, out_dir)
    model = build_model(cfg)
    learned = isinstance(model, EnsembleModel)
    env0 = build_env(cfg, np.random.default_rng(0))
    data = TransitionDataset(env0.state_dim, env0.action_dim)
    sched = cfg.schedule
    visited = []
    plan_seconds = []
    losses = None
    summary = {"seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg.to_dict(), "status": "ok", "iterations_completed": 0}

    with RecordWriter(out / "run.csv", RUN_SCHEMA) as writer:
        try:
            for it in range(sched.iterations):
                random_policy = learned and len(data) == 0
                for ep_idx in range(sched.rollouts_per_iter):
                    env = build_env(cfg, stream(cfg.seed, STREAM_TRAIN, it, ep_idx, ROLE_ENV))
                    planner = None if random_policy else build_planner(cfg, env.action_dim)
                    ep = run_episode(
                        env, planner, model, sched.rollout_length,
                        stream(cfg.seed, STREAM_TRAIN, it, ep_idx, ROLE_AGENT),
                        out / "episodes" / f"train_it{it:03d}_ep{ep_idx:03d}.csv",
                    )
                    plan_seconds.extend(ep.plan_seconds)
                    if ep.steps:
                        data.append(ep.states, ep.actions, ep.next_states)
                    coverage = None
                    if cfg.env.id == "bridge_maze":
                        visited.append(_positions(ep))
                        coverage = bridge_maze.coverage(np.concatenate(visited))
                    writer.write(_episode_row(cfg, "episode", it, ep_idx, ep, len(data), coverage))
                if learned:
                    report = fit(model, data, sched.fit_epochs, train_config(cfg), stream(cfg.seed, STREAM_FIT, it))
                    losses = report.final_losses.tolist()
                writer.write({
                    "row_type": "fit",
                    "iteration": it,
                    "seed": cfg.seed,
                    "config_hash": cfg.hash(),
                    "dataset_size": len(data),
                    "member_losses": losses,
                })
                summary["iterations_completed"] = it + 1
        except (NumericError, PlannerFailure) as exc:
            summary.update(status="numeric_failure", error=str(exc))
            raise
        finally:
            summary["dataset_size"] = len(data)
            summary["final_member_losses"] = losses
            save_checkpoint(model, cfg, out / "model.ckpt")
            _write_json(out / "summary.json", summary)
            _write_json(out / "timing.json", _timing(plan_seconds))
    return TrainingResult(model, out, summary)


def _timing(plan_seconds) -> dict:
    return {
        "plan_steps": len(plan_seconds),
        "plan_step_seconds_mean": float(np.mean(plan_seconds)) if plan_seconds else None,
        "plan_step_seconds_max": float(np.max(plan_seconds)) if plan_seconds else None,
    }


# ---------------------------------------------------------------- evaluation


def _rate(flags) -> tuple[float, float]:
    n = len(flags)
    p = float(np.mean(flags))
    return p, math.sqrt(p * (1.0 - p) / n)


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), se


def summarize(episodes: list) -> dict:
    success, success_se = _rate([e.success for e in episodes])
    fall, fall_se = _rate([e.fell for e in episodes])
    ret, ret_se = _mean_se([e.total_return for e in episodes])
    viol, viol_se = _mean_se([e.violations.sum() for e in episodes])
    return {
        "episodes": len(episodes),
        "success_rate": success,
        "success_se": success_se,
        "fall_rate": fall,
        "fall_se": fall_se,
        "mean_return": ret,
        "return_se": ret_se,
        "mean_violations": viol,
        "violations_se": viol_se,
        "violation_episode_rate": float(np.mean([e.violations.any() for e in episodes])),
    }


def run_eval(cfg: ExperimentConfig, checkpoint=None, out_dir=None) -> dict:
    """Evaluate the planner for ``evaluation.episodes`` episodes and return the metrics summary.

    ``run.csv`` gets one row per episode and a final ``summary`` row.
    """
    if checkpoint is not None:
        model = load_checkpoint(checkpoint, cfg)
    elif cfg.model.kind == "learned":
        raise InvalidInputError("evaluating a learned model needs a checkpoint")
    else:
        model = build_model(cfg)
    if cfg.planner.num_particles % model.num_members:
        raise InvalidInputError(
            f"planner.num_particles ({cfg.planner.num_particles}) is not a multiple of the model's "
            f"ensemble size ({model.num_members})"
        )
    out = _prepare_out(cfg, out_dir)
    episodes = []
    plan_seconds = []
    summary = {"seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg.to_dict(), "status": "ok"}
    with RecordWriter(out / "run.csv", SUMMARY_SCHEMA) as writer:
        try:
            for i in range(cfg.evaluation.episodes):
                env = build_env(cfg, stream(cfg.seed, STREAM_EVAL, i, ROLE_ENV))
                planner = build_planner(cfg, env.action_dim)
                ep = run_episode(
                    env, planner, model, cfg.evaluation.episode_length,
                    stream(cfg.seed, STREAM_EVAL, i, ROLE_AGENT),
                    out / "episodes" / f"eval_ep{i:03d}.csv",
                )
                episodes.append(ep)
                plan_seconds.extend(ep.plan_seconds)
                coverage = bridge_maze.coverage(_positions(ep)) if cfg.env.id == "bridge_maze" else None
                writer.write(_episode_row(cfg, "episode", None, i, ep, None, coverage))
        except (NumericError, PlannerFailure) as exc:
            summary.update(status="numeric_failure", error=str(exc))
            _write_json(out / "summary.json", summary)
            raise
        metrics = summarize(episodes)
        writer.write({
            "row_type": "summary",
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "episode": len(episodes),
            "return": metrics["mean_return"],
            "violations": int(sum(e.violations.sum() for e in episodes)),
            "success_rate": metrics["success_rate"],
            "success_se": metrics["success_se"],
            "fall_rate": metrics["fall_rate"],
            "fall_se": metrics["fall_se"],
            "return_se": metrics["return_se"],
            "violations_se": metrics["violations_se"],
            "violation_episode_rate": metrics["violation_episode_rate"],
        })
    summary["metrics"] = metrics
    _write_json(out / "summary.json", summary)
    _write_json(out / "timing.json", _timing(plan_seconds))
    return summary


# ---------------------------------------------------------------- sweeps


def _set_path(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise InvalidInputError(f"grid key {key!r}: {part} is not a config section")
        node = node[part]
    if parts[-1] not in node:
        raise InvalidInputError(f"grid key {key!r} does not name a config field")
    node[parts[-1]] = value


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise InvalidInputError("parameter grid must be nonempty")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(cfg: ExperimentConfig, grid: dict, out_dir=None, mode: str = "train", checkpoint=None) -> list[dict]:
    """Run every grid point and write ``sweep.csv`` keyed by the parameter values.

    Point ``i`` runs with seed ``cfg.seed + i`` unless ``seed`` is itself a
    grid key, so a one-point grid reproduces a plain run. A failing point is
    recorded with its error and the sweep moves on.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"unknown sweep mode {mode!r}")
    points = grid_points(grid)
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    schema = RUN_SCHEMA if mode == "train" else SUMMARY_SCHEMA
    results = []
    rows = []
    for idx, params in enumerate(points):
        data = cfg.to_dict()
        if "seed" not in params:
            data["seed"] = cfg.seed + idx
        point_dir = out / f"point_{idx:03d}"
        status = "ok"
        try:
            for key, value in params.items():
                _set_path(data, key, value)
            data["output"] = str(point_dir)
            point_cfg = from_dict(data)
            if mode == "train":
                run_training(point_cfg, point_dir)
            else:
                run_eval(point_cfg, checkpoint, point_dir)
        except RiskCEMError as exc:
            status = f"failed: {exc}"
            log.warning("grid point %d %s failed: %s", idx, params, exc)
        results.append({"point": idx, "params": params, "status": status, "out_dir": str(point_dir)})
        run_csv = point_dir / "run.csv"
        point_rows = read_records(run_csv, schema) if run_csv.exists() else [{}]
        for row in point_rows:
            rows.append({"point": idx, "status": status, **{f"param:{k}": v for k, v in params.items()}, **row})
    columns = {"point": int, "status": str}
    for key in grid:
        columns[f"param:{key}"] = _kind(grid[key])
    columns.update(schema)
    write_rows(out / "sweep.csv", list(columns), rows, columns)
    return results


def _kind(values):
    if all(isinstance(v, bool) for v in values):
        return bool
    if all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        return int
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        return float
    return str
