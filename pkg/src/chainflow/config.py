"""Run configuration: every module config in one tree, with dotted overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .chain import ChainConfig
from .flow import FlowConfig
from .metrics import MetricConfig
from .model import PlannerConfig
from .scenario import ScenarioConfig
from .scorer import ScorerConfig
from .training import LossWeights, TrainConfig

CONFIG_ENV = "CHAINFLOW_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    seed: int = 0
    batch_size: int = 16
    n_steps: int | None = None


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        T = {self.scenario.T, self.chain.T, self.flow.T, self.scorer.T}
        dt = {self.scenario.dt, self.chain.dt, self.flow.dt, self.scorer.dt}
        if len(T) != 1 or len(dt) != 1:
            raise ConfigError(f"horizon mismatch across modules: T={sorted(T)} dt={sorted(dt)}")
        if len({self.scenario.d_tok, self.chain.d_tok, self.flow.d_tok, self.scorer.d_tok}) != 1:
            raise ConfigError("d_tok must agree across modules")
        if self.scenario.d_sem != self.flow.d_sem:
            raise ConfigError("d_sem must agree between scenario and flow")

    @property
    def planner(self) -> PlannerConfig:
        return PlannerConfig(self.chain, self.flow, self.scorer)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    kw = {}
    for name, value in data.items():
        sub = _nested_type(cls, name)
        path = f"{where}.{name}" if where else name
        if sub is not None:
            kw[name] = _build(sub, value, path)
        elif isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


_NESTED = {
    RunConfig: {"scenario": ScenarioConfig, "chain": ChainConfig, "flow": FlowConfig,
                "scorer": ScorerConfig, "train": TrainConfig, "metrics": MetricConfig,
                "eval": EvalConfig},
    TrainConfig: {"weights": LossWeights},
}


def _nested_type(cls, name):
    return _NESTED.get(cls, {}).get(name)


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {key}")
        node[parts[-1]] = _parse_value(raw)
    return tree


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the file (``path`` or $CHAINFLOW_CONFIG), then overrides."""
    tree = RunConfig().to_dict()
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(tree, data, "")
    apply_overrides(tree, overrides)
    return _build(RunConfig, tree, "")


def _merge(base: dict, new: dict, where: str) -> None:
    for k, v in new.items():
        path = f"{where}.{k}" if where else k
        if k not in base:
            raise ConfigError(f"unknown key {path}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "maneuver_probs":
            _merge(base[k], v, path)
        else:
            base[k] = v
