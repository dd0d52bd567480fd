"""Planner bundle: the three sub-models sharing one ParamStore."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .chain import ChainConfig, init_chain
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import FlowConfig, build_schedule, init_flow
from .scorer import ScorerConfig, init_scorer
from .tensorcore import ParamStore


@dataclass
class PlannerConfig:
    chain: ChainConfig = field(default_factory=ChainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)

    def to_dict(self) -> dict:
        return {"chain": asdict(self.chain), "flow": asdict(self.flow),
                "scorer": asdict(self.scorer)}

    @classmethod
    def from_dict(cls, d: dict) -> PlannerConfig:
        return cls(ChainConfig(**d["chain"]), FlowConfig(**d["flow"]), ScorerConfig(**d["scorer"]))


@dataclass
class Planner:
    config: PlannerConfig
    params: ParamStore

    @property
    def schedule(self):
        return build_schedule(self.config.flow.n_train_steps)


def build_planner(config: PlannerConfig | None = None, seed: int = 0) -> Planner:
    cfg = config or PlannerConfig()
    p = ParamStore()
    init_chain(cfg.chain, p, seed)
    init_flow(cfg.flow, p, seed)
    init_scorer(cfg.scorer, p, seed)
    return Planner(cfg, p)


def save_planner(path, planner: Planner, extra: dict | None = None) -> None:
    save_checkpoint(path, planner.params, {"planner": planner.config.to_dict(), **(extra or {})})


def load_planner(path) -> tuple[Planner, dict]:
    arrays, header = load_checkpoint(path)
    cfg = PlannerConfig.from_dict(header["config"]["planner"])
    planner = build_planner(cfg)
    planner.params.load_arrays(arrays)
    return planner, header


def with_flow(planner: Planner, flow: FlowConfig, seed: int = 0) -> Planner:
    """Copy of a planner with freshly initialized refiner weights for ``flow``.

    Chain and scorer weights are copied, so several Stage II variants can
    start from one Stage I product.
    """
    cfg = PlannerConfig(planner.config.chain, flow, planner.config.scorer)
    out = build_planner(cfg, seed)
    keep = {n: planner.params[n].data.copy() for n in planner.params.names()
            if not n.startswith("flow.")}
    out.params.load_arrays(keep)
    return out
