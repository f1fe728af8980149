"""Declarative run configuration: one JSON document with a section per module.

Unknown keys are hard errors so that recorded configs stay auditable, and the
dataclass tree round-trips through JSON losslessly.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .duffing import DuffingParams
from .errors import ConfigError
from .orchestrator import ConvergenceConfig, LoopConfig, ProbeConfig, RewardConfig
from .trainers import DpoConfig, PpoConfig

DEFAULT_SEEDS = (42, 123, 456, 789, 1011)


@dataclass
class LearnerConfig:
    lr: float = 2e-3
    root_lr: float = 1e-2
    dropout_p: float = 0.1
    steps_per_episode: int = 20
    minibatch: int = 32
    buffer_window: int = 2048


@dataclass
class EnvSpec:
    name: str = "scm5"
    value_range: tuple[float, float] = (-5.0, 5.0)
    scm_path: str | None = None  # custom SCM config file (overrides name)
    duffing: DuffingParams = field(default_factory=DuffingParams)
    archive_csv: str | None = None
    archive_regimes: str | None = None  # JSON regime spec next to the CSV
    archive_rows: int = 1200
    archive_n_regimes: int = 4
    archive_seed: int = 7


@dataclass
class AblationConfig:
    no_pernode_convergence: bool = False
    no_root_learner: bool = False
    no_dpo: bool = False
    no_diversity: bool = False


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    policy: str = "dpo"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    episodes: int | None = None  # fixed budget; None runs to convergence or cap
    jobs: int = 1
    outdir: str = "runs"
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    convergence: ConvergenceConfig = field(default_factory=ConvergenceConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _mentions_tuple(hint) -> bool:
    if typing.get_origin(hint) is tuple or hint is tuple:
        return True
    return any(_mentions_tuple(a) for a in typing.get_args(hint))


def dataclass_from_dict(cls, data: dict):
    """Strictly build a (possibly nested) config dataclass from plain dicts."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        hint = hints[f.name]
        target = hint
        if dataclasses.is_dataclass(hint):
            v = dataclass_from_dict(hint, v)
        else:
            for arg in typing.get_args(hint):
                if dataclasses.is_dataclass(arg) and isinstance(v, dict):
                    v = dataclass_from_dict(arg, v)
                    break
            if isinstance(v, list) and _mentions_tuple(target):
                v = tuple(v)
            if isinstance(v, bool):
                pass
            elif isinstance(v, int) and (hint is float):
                v = float(v)
        kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return dataclass_from_dict(RunConfig, data)


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
