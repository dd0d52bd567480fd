import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from chainflow.chain import ChainConfig
from chainflow.flow import FlowConfig
from chainflow.model import PlannerConfig, build_planner
from chainflow.scenario import ScenarioConfig, TOK_VALID, generate_dataset
from chainflow.scorer import ScorerConfig

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def tiny_planner_config(T=3, K=2, space="residual", cond="semantic_ctx") -> PlannerConfig:
    return PlannerConfig(
        ChainConfig(K=K, T=T, hidden_dim=6, query_dim=5, n_tok_layers=1),
        FlowConfig(n_blocks=1, model_dim=8, n_heads=2, T=T, time_embed_dim=6, d_sem=5,
                   space=space, conditioning_source=cond, n_train_steps=50, n_infer_steps=2),
        ScorerConfig(hidden_dim=6, T=T),
    )


@pytest.fixture
def tiny_planner():
    return build_planner(tiny_planner_config(), seed=3)


def random_tokens(rng, B, N=4, D=16):
    tok = rng.standard_normal((B, N, D))
    tok[..., TOK_VALID] = 1.0
    tok[:, -1, TOK_VALID] = 0.0
    return tok


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(77, 24, ScenarioConfig())


# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
