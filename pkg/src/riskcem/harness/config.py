"""Experiment configuration: a YAML tree mapped onto nested dataclasses.

Unknown keys are rejected so that a typo in a hyperparameter name fails
loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..errors import InvalidInputError

ENV_IDS = ("bridge_maze", "noisy_integrator")
MODEL_KINDS = ("learned", "ground_truth", "moment_matched")


@dataclass
class WindSection:
    max_force: Optional[float] = None  # None: environment default
    period: int = 5
    region: Optional[list] = None


@dataclass
class ActionNoiseSection:
    gate: float = 0.6
    mean: list = field(default_factory=lambda: [0.0, 0.0])
    var: list = field(default_factory=lambda: [0.2, 0.2])


@dataclass
class EnvSection:
    id: str = "bridge_maze"
    wind: WindSection = field(default_factory=WindSection)
    action_noise: ActionNoiseSection = field(default_factory=ActionNoiseSection)
    ceiling: float = 0.3
    violation_penalty: float = 0.0


@dataclass
class ModelSection:
    kind: str = "learned"
    ensemble_size: int = 5
    num_layers: int = 2
    size: int = 64
    min_logvar: float = -10.0
    max_logvar: float = 4.0
    lr: float = 0.002
    batch_size: int = 512
    weight_decay: float = 1e-5
    grad_norm: Optional[float] = 2.0


@dataclass
class PlannerSection:
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
    w_aleatoric: float = 0.0
    w_epistemic: float = 0.0


@dataclass
class SafetySection:
    enabled: bool = False
    delta: float = 0.0
    c_max: float = 1e4
    box: Optional[list] = None  # None: environment default violation set


@dataclass
class ScheduleSection:
    iterations: int = 10
    rollouts_per_iter: int = 5
    rollout_length: int = 80
    fit_epochs: int = 25


@dataclass
class EvaluationSection:
    episodes: int = 50
    episode_length: int = 80


@dataclass
class ExperimentConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    safety: SafetySection = field(default_factory=SafetySection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: str = "runs/default"

    def validate(self) -> None:
        if self.env.id not in ENV_IDS:
            raise InvalidInputError(f"unknown environment id {self.env.id!r}; expected one of {ENV_IDS}")
        if self.model.kind not in MODEL_KINDS:
            raise InvalidInputError(f"unknown model kind {self.model.kind!r}; expected one of {MODEL_KINDS}")
        s = self.schedule
        if s.iterations < 0:
            raise InvalidInputError("schedule.iterations must be >= 0")
        for name in ("rollouts_per_iter", "rollout_length", "fit_epochs"):
            if getattr(s, name) < 1:
                raise InvalidInputError(f"schedule.{name} must be >= 1")
        if self.evaluation.episodes < 1 or self.evaluation.episode_length < 1:
            raise InvalidInputError("evaluation counts must be >= 1")
        if self.model.ensemble_size < 1 or self.model.num_layers < 1 or self.model.size < 1:
            raise InvalidInputError("model sizes must be >= 1")
        if self.planner.num_particles % self.model.ensemble_size:
            raise InvalidInputError("planner.num_particles must be a multiple of model.ensemble_size")
        w = self.env.wind
        if w.period < 1 or (w.max_force is not None and w.max_force < 0):
            raise InvalidInputError("wind period must be >= 1 and max_force >= 0")
        if any(v < 0 for v in self.env.action_noise.var):
            raise InvalidInputError("action noise variances must be >= 0")
        if not 0.0 <= self.safety.delta <= 1.0:
            raise InvalidInputError("safety.delta must lie in [0, 1]")
        if self.safety.c_max <= 0:
            raise InvalidInputError("safety.c_max must be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Stable digest of everything that influences results (the output path excluded)."""
        data = self.to_dict()
        data.pop("output")
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise InvalidInputError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value or {}, key)
        else:
            kwargs[name] = _coerce(hint, value, key)
    return cls(**kwargs)


def _coerce(hint, value, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise InvalidInputError(f"{key}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInputError(f"{key}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise InvalidInputError(f"{key}: expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise InvalidInputError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    config = _build(ExperimentConfig, data or {}, "")
    config.validate()
    return config


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a raw config tree; the value is parsed as YAML."""
    if "=" not in assignment:
        raise InvalidInputError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise InvalidInputError(f"override {assignment!r} has an empty key component")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise InvalidInputError(f"override {assignment!r}: {part} is not a section")
        node = child
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=(), seed: Optional[int] = None, output=None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise InvalidInputError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError(f"config {path} must be a mapping at the top level")
    for assignment in overrides:
        apply_override(data, assignment)
    if seed is not None:
        data["seed"] = seed
    if output is not None:
        data["output"] = str(output)
    return from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
