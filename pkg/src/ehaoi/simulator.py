"""Seeded Monte Carlo rollouts and trace-level consistency checks.

Episodes are driven by a counter-based PRNG (Philox); episode ``i`` of a run
with master seed ``s`` draws from streams keyed by ``(s, i, lane)``, so
episodes are independent, order-insensitive, and reproducible one at a
time.  Lane 0 feeds the disturbances, lane 1 feeds randomized policies.

For policies expressible as a dense action table (and for the Bernoulli
baseline) the evaluator runs a vectorised rollout over episode batches that
consumes the exact same uniform streams as the scalar episode path, so both
produce bit-identical returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .kernel import next_state, stage_cost, stage_cost_bound
from .model import (
    HOLD,
    TRANSMIT,
    Action,
    RandomVector,
    ScenarioConfig,
    StateSpace,
    SystemState,
    validate_config,
)

__all__ = [
    "TraceStep",
    "EpisodeTrace",
    "EvalSummary",
    "TruncationTooCoarse",
    "TabularPolicy",
    "BernoulliPolicy",
    "as_policy",
    "make_baseline",
    "sample_disturbance",
    "simulate_episode",
    "evaluate_policy_mc",
    "direct_aoi_trace",
    "verify_aoi_consistency",
]


class TruncationTooCoarse(ValueError):
    """The requested horizon leaves a discounted tail above the caller's cap."""


class TraceStep(NamedTuple):
    state: SystemState
    action: Action
    disturbance: RandomVector
    cost: float


@dataclass
class EpisodeTrace:
    """One simulated episode: states, actions, outcomes, and costs.

    ``steps[k]`` holds the slot-k state; ``final_state`` is the state after
    the last slot.  ``seed`` records provenance for generated traces and is
    not meaningful for hand-built ones.
    """

    steps: list[TraceStep]
    final_state: SystemState
    seed: int
    horizon: int
    config: ScenarioConfig

    def discounted_return(self) -> float:
        total = 0.0
        disc = 1.0
        for step in self.steps:
            total += disc * step.cost
            disc *= self.config.gamma
        return total


@dataclass
class EvalSummary:
    """Monte Carlo estimate of the discounted cost of a policy."""

    mean_discounted_cost: float
    std_error: float
    n_episodes: int
    horizon: int
    truncation_bound: float  # worst-case mass of the discarded tail


@dataclass
class TabularPolicy:
    """Deterministic policy given as a dense action table over state indices."""

    actions: np.ndarray
    space: StateSpace

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int8)
        if self.actions.shape != (self.space.size,):
            raise ValueError(
                f"policy table has shape {self.actions.shape}, "
                f"expected ({self.space.size},)")
        if not np.isin(self.actions, (HOLD, TRANSMIT)).all():
            raise ValueError("policy actions must be 0 or 1")
        e = self.space.component_arrays()[2]
        if (self.actions[e == 0] == TRANSMIT).any():
            raise ValueError("policy transmits from an empty buffer")

    def action(self, s: SystemState, rng=None) -> Action:
        return int(self.actions[self.space.index_of(s)])


@dataclass
class BernoulliPolicy:
    """Transmit with probability ``p`` whenever energy is available.

    Draws one uniform per slot from the policy stream regardless of the
    buffer level, keeping the stream position independent of the trajectory.
    """

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"transmit probability must lie in [0, 1], got {self.p}")

    def action(self, s: SystemState, rng) -> Action:
        u = rng.random()
        return int(s.e > 0 and u < self.p)


def as_policy(policy, cfg: ScenarioConfig, space: StateSpace | None = None):
    """Coerce an action array or policy object to the policy protocol."""
    if isinstance(policy, (TabularPolicy, BernoulliPolicy)):
        return policy
    if isinstance(policy, np.ndarray):
        return TabularPolicy(policy, space or StateSpace(cfg))
    if hasattr(policy, "action"):
        return policy
    raise TypeError(f"cannot interpret {type(policy).__name__} as a policy")


def make_baseline(kind: str, cfg: ScenarioConfig, p: float | None = None):
    """Reference policies: ``never``, ``always``, ``alarm_only``, ``random``.

    ``always`` and ``alarm_only`` hold whenever the buffer is empty;
    ``random`` requires the transmit probability ``p``.
    """
    if kind == "random":
        if p is None:
            raise ValueError("random baseline needs a transmit probability")
        return BernoulliPolicy(p)
    space = StateSpace(cfg)
    z, _, e, _, _ = space.component_arrays()
    if kind == "never":
        actions = np.zeros(space.size, dtype=np.int8)
    elif kind == "always":
        actions = (e > 0).astype(np.int8)
    elif kind == "alarm_only":
        actions = ((z == 1) & (e > 0)).astype(np.int8)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return TabularPolicy(actions, space)


def _stream(seed: int, episode_index: int, lane: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=(int(seed), int(episode_index), lane))
    return np.random.Generator(np.random.Philox(ss))


def sample_disturbance(s: SystemState, a: Action, cfg: ScenarioConfig,
                       rng: np.random.Generator) -> RandomVector:
    """Draw one slot's random outcomes; success is forced to 0 unless the
    slot actually transmits.  Consumes exactly three uniforms."""
    if a == TRANSMIT and s.e == 0:
        raise ValueError("transmit is not admissible with an empty buffer")
    u_s, u_e, u_z = rng.random(3)
    w_s = int(a == TRANSMIT and s.e > 0 and u_s < cfg.p_s)
    w_e = int(u_e < cfg.p_e)
    w_z = int(u_z < cfg.p_z[s.z][1])
    return RandomVector(w_s, w_e, w_z)


def simulate_episode(policy, cfg: ScenarioConfig, s0: SystemState,
                     horizon: int, seed: int,
                     episode_index: int = 0) -> EpisodeTrace:
    """Roll one episode forward; deterministic given all arguments."""
    validate_config(cfg)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    space = StateSpace(cfg)
    space.index_of(s0)  # range check
    pol = as_policy(policy, cfg, space)
    d_rng = _stream(seed, episode_index, 0)
    p_rng = _stream(seed, episode_index, 1)
    s = s0
    steps: list[TraceStep] = []
    for _ in range(horizon):
        a = pol.action(s, p_rng)
        if a == TRANSMIT and s.e == 0:
            raise ValueError(f"policy chose transmit in energy-empty state {s}")
        w = sample_disturbance(s, a, cfg, d_rng)
        steps.append(TraceStep(s, a, w, stage_cost(s, cfg)))
        s = next_state(s, a, w, cfg)
    return EpisodeTrace(steps, s, seed, horizon, cfg)


def evaluate_policy_mc(policy, cfg: ScenarioConfig, s0: SystemState,
                       horizon: int, n_episodes: int, seed: int,
                       max_truncation_bound: float | None = None) -> EvalSummary:
    """Estimate the infinite-horizon discounted cost by averaging truncated
    rollouts.

    The truncation bound ``gamma**horizon * g_max / (1 - gamma)`` caps the
    contribution of the discarded tail; pass ``max_truncation_bound`` to
    reject horizons too short for the accuracy you need.
    """
    validate_config(cfg)
    if horizon < 1 or n_episodes < 1:
        raise ValueError("horizon and n_episodes must be >= 1")
    bound = cfg.gamma ** horizon * stage_cost_bound(cfg) / (1.0 - cfg.gamma)
    if max_truncation_bound is not None and bound > max_truncation_bound:
        raise TruncationTooCoarse(
            f"truncation bound {bound:.3e} exceeds cap {max_truncation_bound:.3e}")
    space = StateSpace(cfg)
    pol = as_policy(policy, cfg, space)
    if isinstance(pol, TabularPolicy):
        returns = _batch_returns(pol.actions, None, cfg, space, s0, horizon,
                                 n_episodes, seed)
    elif isinstance(pol, BernoulliPolicy):
        returns = _batch_returns(None, pol.p, cfg, space, s0, horizon,
                                 n_episodes, seed)
    else:
        returns = np.array([
            simulate_episode(pol, cfg, s0, horizon, seed, i).discounted_return()
            for i in range(n_episodes)
        ])
    mean = float(np.mean(returns))
    if n_episodes > 1:
        se = float(np.std(returns, ddof=1) / math.sqrt(n_episodes))
    else:
        se = 0.0
    return EvalSummary(mean, se, n_episodes, horizon, bound)


def _batch_returns(actions: np.ndarray | None, bernoulli_p: float | None,
                   cfg: ScenarioConfig, space: StateSpace, s0: SystemState,
                   horizon: int, n_episodes: int, seed: int,
                   chunk: int = 2048) -> np.ndarray:
    """Vectorised rollouts over episode batches.

    Consumes per-episode streams identical to :func:`simulate_episode`, so
    the returns match the scalar path bit for bit.
    """
    space.index_of(s0)
    cs = cfg.cost_shape
    f_tab = np.array([cs.f(d) for d in range(cfg.d_max0 + 1)])
    h_tab = np.array([cs.h(d) for d in range(cfg.d_max1 + 1)])
    p01, p11 = cfg.p_z[0][1], cfg.p_z[1][1]
    returns = np.empty(n_episodes)
    for lo in range(0, n_episodes, chunk):
        hi = min(lo + chunk, n_episodes)
        m = hi - lo
        u = np.empty((m, horizon, 3))
        for t, ep in enumerate(range(lo, hi)):
            u[t] = _stream(seed, ep, 0).random((horizon, 3))
        if bernoulli_p is not None:
            u_pol = np.empty((m, horizon))
            for t, ep in enumerate(range(lo, hi)):
                u_pol[t] = _stream(seed, ep, 1).random(horizon)
        z = np.full(m, s0.z)
        z_d = np.full(m, s0.z_d)
        e = np.full(m, s0.e)
        d0 = np.full(m, s0.d0)
        d1 = np.full(m, s0.d1)
        total = np.zeros(m)
        disc = 1.0
        for k in range(horizon):
            total += disc * np.where(z == 0, f_tab[d0], h_tab[d1])
            if actions is not None:
                a = actions[space.index_arrays(z, z_d, e, d0, d1)].astype(np.int64)
            else:
                a = ((e > 0) & (u_pol[:, k] < bernoulli_p)).astype(np.int64)
            w_s = (a == 1) & (u[:, k, 0] < cfg.p_s)
            w_e = (u[:, k, 1] < cfg.p_e).astype(np.int64)
            w_z = (u[:, k, 2] < np.where(z == 0, p01, p11)).astype(np.int64)
            inc0 = np.minimum(d0 + 1, cfg.d_max0)
            inc1 = np.minimum(d1 + 1, cfg.d_max1)
            d0_miss = np.where((z_d == 0) | ((z == 0) & (w_z == 0)), inc0, 0)
            d1_miss = np.where((z_d == 1) | ((z == 1) & (w_z == 1)), inc1, 0)
            d0 = np.where(w_s, np.where(z == 0, 1, 0), d0_miss)
            d1 = np.where(w_s, np.where(z == 1, 1, 0), d1_miss)
            z_d = np.where(w_s, z, z_d)
            e = np.minimum(e + w_e - a, cfg.e_max)
            z = w_z
            disc *= cfg.gamma
        returns[lo:hi] = total
    return returns


def direct_aoi_trace(trace: EpisodeTrace) -> list[tuple[int, int]]:
    """Recompute both age counters at every slot straight from history.

    Uses the timestamp of the last delivered packet and of the last source
    state change: the believed state ages from the delivery, a currently
    active but unreported state ages from the change, and a state that is
    neither believed nor active has age zero.  Both ages saturate at their
    caps.  Initial timestamps are back-dated from the first state's
    counters, so a start consistent with these rules reproduces itself.
    """
    cfg = trace.config
    caps = (cfg.d_max0, cfg.d_max1)
    states = [step.state for step in trace.steps] + [trace.final_state]
    first = states[0]
    last_rx = -(first.d0 if first.z_d == 0 else first.d1)
    if first.z != first.z_d:
        last_change = -(first.d0 if first.z == 0 else first.d1)
    else:
        last_change = 0  # never read before a change updates it
    ages: list[tuple[int, int]] = []
    for k, s in enumerate(states):
        pair = []
        for z in (0, 1):
            if z == s.z_d:
                pair.append(min(k - last_rx, caps[z]))
            elif z == s.z:
                pair.append(min(k - last_change, caps[z]))
            else:
                pair.append(0)
        ages.append((pair[0], pair[1]))
        if k < len(trace.steps):
            step = trace.steps[k]
            if step.disturbance.w_s:
                last_rx = k
            if step.disturbance.w_z != s.z:
                last_change = k + 1
    return ages


def verify_aoi_consistency(
        trace: EpisodeTrace
) -> tuple[bool, tuple[int, tuple[int, int], tuple[int, int]] | None]:
    """Check the recursively maintained age counters against the direct
    from-history computation at every slot.

    Returns (flag, first mismatch) where the mismatch carries
    (slot, stored pair, direct pair).
    """
    direct = direct_aoi_trace(trace)
    states = [step.state for step in trace.steps] + [trace.final_state]
    for k, (s, pair) in enumerate(zip(states, direct)):
        if (s.d0, s.d1) != pair:
            return False, (k, (s.d0, s.d1), pair)
    return True, None
