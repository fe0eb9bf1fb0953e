"""Discounted-cost Bellman machinery and structural checkers.

Provides synchronous value iteration with greedy policy extraction, an
independently implemented finite-horizon backward-induction oracle for
cross-validation, and numerical checkers for the structural properties the
optimal solution is expected to satisfy:

* the transmit region of each (z, z_d, e) slice is up-closed in the two age
  counters (a threshold policy);
* the transmit-vs-hold action-value gap is non-increasing in the age pair
  within each slice, and exactly zero without energy;
* the value spread between age-ordered state pairs at energy level e
  dominates (1 - p_s) times the spread one energy unit below.

Both solver paths support optional multiple-precision arithmetic (``gmpy2``)
for verifying contraction bounds far below float64 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .kernel import (
    TransitionKernel,
    build_kernel,
    stage_cost_bound,
    stage_cost_vector,
    transition_distribution,
)
from .model import (
    HOLD,
    RangeError,
    ScenarioConfig,
    StateSpace,
    SystemState,
    validate_config,
)

__all__ = [
    "TIE_TOL",
    "SolveReport",
    "NotConverged",
    "Violation",
    "StructureReport",
    "bellman_backup",
    "value_iteration",
    "extract_policy",
    "action_value_gaps",
    "action_value_gap",
    "finite_horizon_oracle",
    "finite_horizon_values",
    "policy_action_grid",
    "check_threshold_structure",
    "check_gap_monotonicity",
    "check_value_spread_inequality",
]

# Action-value gaps within this tolerance of zero count as ties and resolve
# to hold, matching the sign rule that defines the optimal action.
TIE_TOL = 1e-12


@dataclass
class SolveReport:
    """Convergence record of one value-iteration run."""

    iterations: int
    residual: float           # sup-norm of the last update
    optimality_bound: float   # gamma * residual / (1 - gamma)
    converged: bool
    tol: float


class NotConverged(RuntimeError):
    """Raised when the iteration budget runs out; carries partial results."""

    def __init__(self, values, policy, report: SolveReport):
        super().__init__(
            f"no convergence after {report.iterations} iterations "
            f"(residual {report.residual:.3e}, tol {report.tol:.3e})")
        self.values = values
        self.policy = policy
        self.report = report


def _backup(g: np.ndarray, mats, gamma: float, v: np.ndarray) -> np.ndarray:
    q0 = g + gamma * (mats[0] @ v)
    q1 = g + gamma * (mats[1] @ v)
    return np.minimum(q0, q1)


def bellman_backup(v: np.ndarray, kernel: TransitionKernel,
                   cfg: ScenarioConfig) -> tuple[np.ndarray, float]:
    """One synchronous sweep of the Bellman minimisation.

    Returns the updated value vector and the sup-norm change.  States
    without energy only have the hold action; their transmit rows alias the
    hold rows, so the elementwise minimum respects admissibility.
    """
    out = _backup(stage_cost_vector(cfg, kernel.space), kernel.matrices,
                  cfg.gamma, np.asarray(v, dtype=float))
    return out, float(np.max(np.abs(out - v)))


def value_iteration(
    cfg: ScenarioConfig,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    kernel: TransitionKernel | None = None,
    precision: int | None = None,
) -> tuple[np.ndarray, np.ndarray, SolveReport]:
    """Iterate the Bellman operator from zero until the sup-norm residual
    drops below ``tol``.

    Returns (values, greedy policy, report).  Raises :class:`NotConverged`
    with partial results if ``max_iter`` sweeps are exhausted.

    ``precision`` switches to multiple-precision arithmetic with that many
    mantissa bits; use it when the requested tolerance is finer than float64
    can resolve.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    validate_config(cfg)
    if precision is not None:
        return _value_iteration_mp(cfg, tol, max_iter, precision)
    kernel = kernel or build_kernel(cfg)
    g = stage_cost_vector(cfg, kernel.space)
    mats = kernel.matrices
    gamma = cfg.gamma
    v = np.zeros(kernel.size)
    iterations = 0
    residual = np.inf
    while iterations < max_iter:
        iterations += 1
        v_new = _backup(g, mats, gamma, v)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            break
    converged = residual < tol
    report = SolveReport(
        iterations=iterations,
        residual=residual,
        optimality_bound=gamma * residual / (1.0 - gamma),
        converged=converged,
        tol=tol,
    )
    policy = extract_policy(v, kernel, cfg)
    if not converged:
        raise NotConverged(v, policy, report)
    return v, policy, report


def action_value_gaps(v: np.ndarray, kernel: TransitionKernel,
                      cfg: ScenarioConfig) -> np.ndarray:
    """Q(s, transmit) - Q(s, hold) for every state.

    The stage cost cancels, leaving the discounted difference of expected
    continuation values.  Exactly zero wherever e = 0 because those rows are
    aliased.
    """
    v = np.asarray(v, dtype=float)
    p0, p1 = kernel.matrices
    return cfg.gamma * (p1 @ v) - cfg.gamma * (p0 @ v)


def action_value_gap(v: np.ndarray, s: SystemState, kernel: TransitionKernel,
                     cfg: ScenarioConfig) -> float:
    """Gap of a single state; transmitting is optimal iff it is negative."""
    return float(action_value_gaps(v, kernel, cfg)[kernel.space.index_of(s)])


def extract_policy(v: np.ndarray, kernel: TransitionKernel,
                   cfg: ScenarioConfig) -> np.ndarray:
    """Greedy policy for ``v``: transmit iff the action-value gap is below
    ``-TIE_TOL``; ties resolve to hold."""
    return (action_value_gaps(v, kernel, cfg) < -TIE_TOL).astype(np.int8)


# ---------------------------------------------------------------------------
# multiple-precision path


def _mp_context(precision: int):
    try:
        import gmpy2
    except ImportError as exc:  # pragma: no cover - gmpy2 is a declared dep
        raise RuntimeError("precision > float64 requires gmpy2") from exc
    return gmpy2, gmpy2.context(precision=precision)


def _mp_rows(cfg: ScenarioConfig, space: StateSpace, mpfr):
    """Per-state successor rows with exactly converted probabilities.

    Converting the float64 probabilities to mpfr is exact, so every caller
    sees the identical transition law regardless of arithmetic.
    """
    g = []
    rows = ([], [])
    cs = cfg.cost_shape
    for s in space.states():
        g.append(mpfr(cs.f(s.d0) if s.z == 0 else cs.h(s.d1)))
        hold_row = [(j_s, mpfr(p)) for j_s, p in _indexed_row(s, HOLD, cfg, space)]
        rows[0].append(hold_row)
        if s.e > 0:
            rows[1].append(
                [(j_s, mpfr(p)) for j_s, p in _indexed_row(s, 1, cfg, space)])
        else:
            rows[1].append(hold_row)
    return g, rows


def _indexed_row(s, a, cfg, space):
    return [(space.index_of(s2), p) for s2, p in transition_distribution(s, a, cfg)]


def _value_iteration_mp(cfg: ScenarioConfig, tol: float, max_iter: int,
                        precision: int):
    gmpy2, ctx = _mp_context(precision)
    with ctx:
        mpfr = gmpy2.mpfr
        space = StateSpace(cfg)
        n = space.size
        g, rows = _mp_rows(cfg, space, mpfr)
        gamma = mpfr(cfg.gamma)
        tol_mp = mpfr(tol)
        v = [mpfr(0)] * n
        iterations = 0
        residual = mpfr("inf")
        while iterations < max_iter:
            iterations += 1
            v_new = []
            residual = mpfr(0)
            for i in range(n):
                q0 = sum(p * v[j] for j, p in rows[0][i])
                q1 = sum(p * v[j] for j, p in rows[1][i])
                x = g[i] + gamma * (q0 if q0 <= q1 else q1)
                v_new.append(x)
                delta = abs(x - v[i])
                if delta > residual:
                    residual = delta
            v = v_new
            if residual < tol_mp:
                break
        converged = residual < tol_mp
        tie = mpfr(-TIE_TOL)
        policy = np.zeros(n, dtype=np.int8)
        for i in range(n):
            q0 = sum(p * v[j] for j, p in rows[0][i])
            q1 = sum(p * v[j] for j, p in rows[1][i])
            policy[i] = 1 if gamma * (q1 - q0) < tie else 0
        values = np.array(v, dtype=object)
        report = SolveReport(
            iterations=iterations,
            residual=float(residual),
            optimality_bound=float(gamma * residual / (1 - gamma)),
            converged=bool(converged),
            tol=tol,
        )
    if not converged:
        raise NotConverged(values, policy, report)
    return values, policy, report


# ---------------------------------------------------------------------------
# finite-horizon oracle


def finite_horizon_values(
    cfg: ScenarioConfig,
    horizons: Sequence[int],
    precision: int | None = None,
) -> dict[int, np.ndarray]:
    """N-stage discounted optimal costs for several horizons in one pass.

    Exact backward induction from a zero terminal value, implemented as a
    plain per-state loop independent of the value-iteration code path so the
    two can validate each other.  Rows come straight from the scalar
    transition law.
    """
    validate_config(cfg)
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    space = StateSpace(cfg)
    n = space.size

    if precision is None:
        num = float
        gamma = cfg.gamma
        zero = 0.0
        ctx_mgr = None
    else:
        gmpy2, ctx_mgr = _mp_context(precision)
        ctx_mgr.__enter__()
        num = gmpy2.mpfr
        gamma = num(cfg.gamma)
        zero = num(0)
    try:
        cs = cfg.cost_shape
        g = []
        hold_rows = []
        tx_rows = []
        for s in space.states():
            g.append(num(cs.f(s.d0) if s.z == 0 else cs.h(s.d1)))
            hold_rows.append(
                [(j, num(p)) for j, p in _indexed_row(s, HOLD, cfg, space)])
            tx_rows.append(
                [(j, num(p)) for j, p in _indexed_row(s, 1, cfg, space)]
                if s.e > 0 else None)

        values = [zero] * n
        out: dict[int, np.ndarray] = {}
        for stage in range(1, horizons[-1] + 1):
            nxt = []
            for i in range(n):
                best = sum(p * values[j] for j, p in hold_rows[i])
                if tx_rows[i] is not None:
                    alt = sum(p * values[j] for j, p in tx_rows[i])
                    if alt < best:
                        best = alt
                nxt.append(g[i] + gamma * best)
            values = nxt
            if stage in horizons:
                if precision is None:
                    out[stage] = np.array(values, dtype=float)
                else:
                    out[stage] = np.array(values, dtype=object)
        return out
    finally:
        if ctx_mgr is not None:
            ctx_mgr.__exit__(None, None, None)


def finite_horizon_oracle(cfg: ScenarioConfig, horizon: int,
                          precision: int | None = None) -> np.ndarray:
    """N-stage discounted optimal cost from a zero terminal value."""
    return finite_horizon_values(cfg, [horizon], precision)[int(horizon)]


# ---------------------------------------------------------------------------
# structural checkers


class Violation(NamedTuple):
    """A witnessed failure of an order property within one slice.

    ``lo`` is the componentwise-smaller age pair and ``hi`` the larger one;
    ``e`` is the slice's energy level (for the value-spread check, the
    higher of the two levels involved).
    """

    z: int
    z_d: int
    e: int
    lo: tuple[int, int]
    hi: tuple[int, int]


@dataclass
class StructureReport:
    """Outcome of one structural check."""

    holds: bool
    violations: list[Violation] = field(default_factory=list)
    name: str = ""


def _dominance_pairs(n0: int, n1: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean matrix D[p, q] marking flat cell q >= cell p componentwise,
    plus the (i, j) coordinates of each flat cell."""
    ii, jj = np.meshgrid(np.arange(n0), np.arange(n1), indexing="ij")
    coords = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)
    dom = ((coords[None, :, 0] >= coords[:, None, 0])
           & (coords[None, :, 1] >= coords[:, None, 1]))
    np.fill_diagonal(dom, False)
    return dom, coords


def _collect(dom_viol: np.ndarray, coords: np.ndarray, z: int, z_d: int,
             e: int) -> Iterable[Violation]:
    for p, q in np.argwhere(dom_viol):
        yield Violation(z, z_d, e,
                        (int(coords[p, 0]), int(coords[p, 1])),
                        (int(coords[q, 0]), int(coords[q, 1])))


def check_threshold_structure(policy: np.ndarray, cfg: ScenarioConfig,
                              space: StateSpace | None = None,
                              reachable: set[int] | None = None) -> StructureReport:
    """Verify that every (z, z_d, e) slice transmits on an up-closed region
    of the age grid.

    Lists every ordered pair with transmit at the smaller age pair and hold
    at a dominating one.  ``reachable`` restricts the check to pairs whose
    endpoints are both reachable (diagnostic use); by default the whole
    product space is checked.
    """
    space = space or StateSpace(cfg)
    grid = np.asarray(policy).reshape(space.shape)
    mask = None
    if reachable is not None:
        mask = np.zeros(space.size, dtype=bool)
        mask[sorted(reachable)] = True
        mask = mask.reshape(space.shape)
    dom, coords = _dominance_pairs(cfg.d_max0 + 1, cfg.d_max1 + 1)
    violations: list[Violation] = []
    for z in (0, 1):
        for z_d in (0, 1):
            for e in range(cfg.e_max + 1):
                tx = grid[z, z_d, e].reshape(-1).astype(bool)
                bad = dom & tx[:, None] & ~tx[None, :]
                if mask is not None:
                    m = mask[z, z_d, e].reshape(-1)
                    bad &= m[:, None] & m[None, :]
                if bad.any():
                    violations.extend(_collect(bad, coords, z, z_d, e))
    return StructureReport(not violations, violations, "threshold_structure")


def check_gap_monotonicity(v: np.ndarray, kernel: TransitionKernel,
                           cfg: ScenarioConfig, slack: float = 1e-8,
                           reachable: set[int] | None = None) -> StructureReport:
    """Verify the action-value gap is non-increasing in the age pair within
    every (z, z_d, e) slice, up to ``slack``."""
    space = kernel.space
    gaps = action_value_gaps(v, kernel, cfg).reshape(space.shape)
    mask = None
    if reachable is not None:
        mask = np.zeros(space.size, dtype=bool)
        mask[sorted(reachable)] = True
        mask = mask.reshape(space.shape)
    dom, coords = _dominance_pairs(cfg.d_max0 + 1, cfg.d_max1 + 1)
    violations: list[Violation] = []
    for z in (0, 1):
        for z_d in (0, 1):
            for e in range(cfg.e_max + 1):
                flat = gaps[z, z_d, e].reshape(-1)
                bad = dom & (flat[None, :] > flat[:, None] + slack)
                if mask is not None:
                    m = mask[z, z_d, e].reshape(-1)
                    bad &= m[:, None] & m[None, :]
                if bad.any():
                    violations.extend(_collect(bad, coords, z, z_d, e))
    return StructureReport(not violations, violations, "gap_monotonicity")


def check_value_spread_inequality(v: np.ndarray, cfg: ScenarioConfig,
                                  space: StateSpace | None = None,
                                  slack: float = 1e-8) -> StructureReport:
    """Verify that for every age-ordered state pair the value spread at
    energy e dominates (1 - p_s) times the spread at energy e - 1.

    Equivalently, (1 - p_s) * V[e-1] - V[e] must be non-increasing in the
    age pair within each (z, z_d) plane, for every e >= 1.  The reported
    slice energy is the higher level e.
    """
    space = space or StateSpace(cfg)
    grid = np.asarray(v, dtype=float).reshape(space.shape)
    dom, coords = _dominance_pairs(cfg.d_max0 + 1, cfg.d_max1 + 1)
    violations: list[Violation] = []
    for z in (0, 1):
        for z_d in (0, 1):
            for e in range(1, cfg.e_max + 1):
                spread = ((1.0 - cfg.p_s) * grid[z, z_d, e - 1]
                          - grid[z, z_d, e]).reshape(-1)
                bad = dom & (spread[None, :] > spread[:, None] + slack)
                if bad.any():
                    violations.extend(_collect(bad, coords, z, z_d, e))
    return StructureReport(not violations, violations, "value_spread")


def policy_action_grid(policy: np.ndarray, space: StateSpace, z: int,
                       z_d: int, other_aoi: int) -> np.ndarray:
    """Action grid over (energy, age of state ``z``) for one policy slice,
    holding the other state's age at ``other_aoi``."""
    cfg = space.config
    if z not in (0, 1) or z_d not in (0, 1):
        raise RangeError("z and z_d must be 0 or 1")
    other_cap = cfg.d_max1 if z == 0 else cfg.d_max0
    if not 0 <= other_aoi <= other_cap:
        raise RangeError(f"other-state age {other_aoi} outside [0, {other_cap}]")
    grid = np.asarray(policy).reshape(space.shape)
    if z == 0:
        return grid[0, z_d, :, :, other_aoi].copy()
    return grid[1, z_d, :, other_aoi, :].copy()
