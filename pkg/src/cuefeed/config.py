"""Run configuration: schema, strict parsing, defaults, hashing.

One JSON file drives every command. Unknown keys are rejected (typos
must not silently fall back to defaults), every key has a documented
default, and a short hash of the canonical serialization is embedded in
all output artifacts so results can be traced to their configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .policy import (
    FEEDBACK_LOSSES,
    FeedbackPolicy,
    LossWeightCurve,
    SamplerSpec,
    TimestepGate,
    default_gates,
)

ENV_PREFIX = "CUEFEED_"


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012


@dataclass
class SamplerConfig:
    edges: list[int] = field(default_factory=lambda: [0, 500, 1000])
    weights: list[float] = field(default_factory=lambda: [2.0, 1.0])


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.25


@dataclass
class DetectorConfig:
    gaze_temperature: float = 0.05
    pose_temperature: float = 0.05
    hoi_seed: int = 0
    hoi_variance_gate: float = 0.05
    hoi_top_k: int = 5


@dataclass
class ModelConfig:
    hidden: int = 20
    cond_dim: int = 32
    time_dim: int = 32
    feature_grid: int = 4


@dataclass
class OptimConfig:
    lr_body: float = 5e-5
    lr_aligner: float = 5e-7
    grad_clip: float = 1.0


@dataclass
class SourceConfig:
    kind: str = "synthetic"  # "synthetic" | "manifest"
    count: int = 256
    size: int = 48
    seed: int = 11
    path: str | None = None
    crop: str = "random"  # manifest sources: "random" | "center"


@dataclass
class PhaseConfig:
    name: str = "main"
    steps: int = 100
    source: SourceConfig = field(default_factory=SourceConfig)


@dataclass
class EvalConfig:
    t_start: int = 400
    sample_steps: int = 20
    holdout_count: int = 64
    holdout_seed: int = 977


@dataclass
class PreprocessConfig:
    target_side: int = 512
    crop: str = "random"
    conditioning_side: int = 224


def _default_gate_map() -> dict[str, list[int]]:
    return {name: [g.t_min, g.t_max] for name, g in default_gates(1000).items()}


def _default_weights() -> dict[str, float]:
    return {name: 0.01 for name in FEEDBACK_LOSSES}


def _default_hoi_classes() -> list[list[str]]:
    verbs = ["holding", "pushing", "watching", "feeding"]
    objects = ["ball", "box", "cart", "block"]
    return [[v, o] for v in verbs for o in objects]


@dataclass
class RunConfig:
    seed: int = 0
    batch_size: int = 8
    out_dir: str = "runs/run"
    parallel: int = 1
    force_timestep: int | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gates: dict = field(default_factory=_default_gate_map)
    loss_weights: dict = field(default_factory=_default_weights)
    weight_curves: dict = field(default_factory=dict)
    focal: FocalConfig = field(default_factory=FocalConfig)
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    phases: list = field(default_factory=lambda: [PhaseConfig()])
    eval: EvalConfig = field(default_factory=EvalConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    hoi_classes: list = field(default_factory=_default_hoi_classes)

    # -- derived objects -------------------------------------------------

    def feedback_policy(self) -> FeedbackPolicy:
        t_last = self.schedule.num_steps - 1
        gates = {}
        for name, bounds in self.gates.items():
            if len(bounds) != 2:
                raise ConfigError(f"gates.{name} must be [t_min, t_max]")
            gate = TimestepGate(int(bounds[0]), int(bounds[1]))
            if gate != TimestepGate(-1, -1) and gate.t_max > t_last:
                raise ConfigError(
                    f"gates.{name} upper bound {gate.t_max} exceeds last timestep {t_last}"
                )
            gates[name] = gate
        curves = {}
        for name, spec in self.weight_curves.items():
            try:
                curves[name] = LossWeightCurve(
                    t_grid=tuple(int(t) for t in spec["t_grid"]),
                    values=tuple(float(v) for v in spec["values"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"weight_curves.{name}: {exc}") from exc
        try:
            return FeedbackPolicy(
                weights={k: float(v) for k, v in self.loss_weights.items()},
                gates=gates,
                weight_curves=curves,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def sampler_spec(self) -> SamplerSpec:
        try:
            spec = SamplerSpec(
                edges=tuple(int(e) for e in self.sampler.edges),
                weights=tuple(float(w) for w in self.sampler.weights),
            )
        except ValueError as exc:
            raise ConfigError(f"sampler: {exc}") from exc
        if spec.num_steps != self.schedule.num_steps:
            raise ConfigError(
                f"sampler covers [0, {spec.num_steps}) but the schedule has "
                f"{self.schedule.num_steps} steps"
            )
        return spec

    def validate(self) -> "RunConfig":
        if self.schedule.num_steps < 1:
            raise ConfigError("schedule.num_steps must be >= 1")
        if not (0 < self.schedule.beta_start <= self.schedule.beta_end < 1):
            raise ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if not self.phases:
            raise ConfigError("phases must be non-empty")
        if self.optim.lr_body <= 0 or self.optim.lr_aligner <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.force_timestep is not None and not (
            0 <= self.force_timestep < self.schedule.num_steps
        ):
            raise ConfigError("force_timestep outside the schedule range")
        for i, phase in enumerate(self.phases):
            if phase.steps < 0:
                raise ConfigError(f"phases[{i}].steps must be >= 0")
            if phase.source.kind not in ("synthetic", "manifest"):
                raise ConfigError(f"phases[{i}].source.kind must be synthetic or manifest")
            if phase.source.kind == "manifest" and not phase.source.path:
                raise ConfigError(f"phases[{i}].source.path required for manifest sources")
        seen = set()
        for pair in self.hoi_classes:
            if len(pair) != 2:
                raise ConfigError("hoi_classes entries must be [verb, object] pairs")
            if tuple(pair) in seen:
                raise ConfigError(f"duplicate hoi class {pair}")
            seen.add(tuple(pair))
        self.feedback_policy()
        self.sampler_spec()
        return self


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict_run(data).validate()


_NESTED = {
    "schedule": ScheduleConfig,
    "sampler": SamplerConfig,
    "focal": FocalConfig,
    "detectors": DetectorConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "eval": EvalConfig,
    "preprocess": PreprocessConfig,
}


def _from_dict_run(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _NESTED:
            kwargs[name] = _strict_simple(_NESTED[name], value, name)
        elif name == "phases":
            if not isinstance(value, list):
                raise ConfigError("phases: expected a list")
            phases = []
            for i, v in enumerate(value):
                if not isinstance(v, dict):
                    raise ConfigError(f"phases[{i}]: expected an object")
                extra = set(v) - {"name", "steps", "source"}
                if extra:
                    raise ConfigError(f"phases[{i}]: unknown keys {sorted(extra)}")
                src = v.get("source", {})
                phases.append(
                    PhaseConfig(
                        name=str(v.get("name", f"phase{i}")),
                        steps=int(v.get("steps", 0)),
                        source=_strict_simple(SourceConfig, src, f"phases[{i}].source"),
                    )
                )
            kwargs[name] = phases
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc


def _strict_simple(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def config_hash(config: RunConfig) -> str:
    """Hash of the result-determining fields.

    Where outputs land (out_dir) and how work is scheduled (parallel)
    cannot change any computed value, so two runs that differ only there
    share a hash and their checkpoints stay interchangeable.
    """
    data = config_to_dict(config)
    data.pop("out_dir", None)
    data.pop("parallel", None)
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(
    path: str | Path | None, env: dict | None = None, overrides: dict | None = None
) -> RunConfig:
    """Read a JSON config and apply environment/flag overrides.

    Precedence: file < environment (CUEFEED_SECTION__KEY) < explicit
    overrides (dotted keys). Override values are parsed as JSON where
    possible, else taken as strings. ``path=None`` starts from the
    built-in defaults.
    """
    if path is None:
        data: dict = {}
    else:
        try:
            raw = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    env = os.environ if env is None else env
    for key, value in sorted(env.items()):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX) :].lower().replace("__", ".")
            _set_dotted(data, dotted, _parse_value(value))
    for dotted, value in (overrides or {}).items():
        _set_dotted(data, dotted, value)
    return config_from_dict(data)


def default_config() -> RunConfig:
    return RunConfig().validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def describe_config() -> list[tuple[str, str]]:
    """Flat (key, default) pairs for --help output."""
    rows: list[tuple[str, str]] = []

    def walk(obj, prefix=""):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                walk(value, key + ".")
            elif key == "phases":
                rows.append((key, json.dumps([dataclasses.asdict(p) for p in value])))
            else:
                rows.append((key, json.dumps(value)))

    walk(RunConfig())
    return rows
