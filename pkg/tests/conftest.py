"""Shared fixtures: the default experiment scenario and a session-wide
cache of solved configurations (the acceptance sweeps revisit the same
configs several times)."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from ehaoi import (
    ScenarioConfig,
    SystemState,
    TransitionKernel,
    build_kernel,
    value_iteration,
)

# Default experiment scenario: both age caps 10, discount 0.99 (the
# ScenarioConfig defaults), plus the baseline probabilities used across the
# experiment suite.
BASE = ScenarioConfig(
    p_e=0.8,
    p_s=0.8,
    p_z=((0.9, 0.1), (0.2, 0.8)),
    e_max=5,
)
S0 = SystemState(0, 0, 0, 1, 0)


@dataclass
class SolvedCase:
    kernel: TransitionKernel
    values: object
    policy: object
    report: object


@pytest.fixture(scope="session")
def solved():
    """Callable fixture: solve a config once per session and memoise."""
    cache: dict = {}

    def get(cfg: ScenarioConfig, tol: float = 1e-9) -> SolvedCase:
        key = (cfg, tol)
        if key not in cache:
            kernel = build_kernel(cfg)
            values, policy, report = value_iteration(cfg, tol=tol, kernel=kernel)
            cache[key] = SolvedCase(kernel, values, policy, report)
        return cache[key]

    return get
