"""Single-step dynamics, stage cost, and the sparse transition kernel.

Per slot, three independent random outcomes drive the transition: channel
success ``w_s`` (only possible on a transmit with energy available), energy
arrival ``w_e``, and the next source state ``w_z``.  Combining the at most
eight realisations with the deterministic update rule yields a sparse
successor distribution per (state, action) pair.

Age counter semantics: a counter ages by one per slot while its source
state is either the one the destination believes or the one currently
active; a successful transmission restarts the active state's counter at 1
and clears the other; a counter whose state is neither believed nor active
is zero.  This keeps every stored state consistent with the direct
age-from-history definition (see :func:`ehaoi.simulator.direct_aoi_trace`),
which the simulator cross-checks on every trace.
"""

from __future__ import annotations

import csv
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sparse

from .model import (
    HOLD,
    TRANSMIT,
    Action,
    RandomVector,
    ScenarioConfig,
    StateSpace,
    SystemState,
)

__all__ = [
    "InvalidDisturbance",
    "TransitionKernel",
    "admissible_actions",
    "stage_cost",
    "stage_cost_bound",
    "stage_cost_vector",
    "next_state",
    "disturbance_distribution",
    "transition_distribution",
    "build_kernel",
    "reachable_states",
    "write_kernel_csv",
]

_PROB_TOL = 1e-12


class InvalidDisturbance(ValueError):
    """A disturbance vector violates the channel-success forcing rule."""


def admissible_actions(s: SystemState) -> tuple[Action, ...]:
    """Actions available at ``s``: transmitting needs a buffered unit."""
    return (HOLD,) if s.e == 0 else (HOLD, TRANSMIT)


def stage_cost(s: SystemState, cfg: ScenarioConfig) -> float:
    """Staleness penalty charged in state ``s``; action-independent."""
    cs = cfg.cost_shape
    return cs.f(s.d0) if s.z == 0 else cs.h(s.d1)


def stage_cost_bound(cfg: ScenarioConfig) -> float:
    """Upper bound on the stage cost over the whole state space."""
    cs = cfg.cost_shape
    return max(cs.f(cfg.d_max0), cs.h(cfg.d_max1))


def stage_cost_vector(cfg: ScenarioConfig, space: StateSpace) -> np.ndarray:
    """Stage cost for every state, in index order."""
    z, _, _, d0, d1 = space.component_arrays()
    cs = cfg.cost_shape
    f_tab = np.array([cs.f(d) for d in range(cfg.d_max0 + 1)])
    h_tab = np.array([cs.h(d) for d in range(cfg.d_max1 + 1)])
    return np.where(z == 0, f_tab[d0], h_tab[d1])


def next_state(s: SystemState, a: Action, w: RandomVector,
               cfg: ScenarioConfig) -> SystemState:
    """Deterministic successor of ``s`` under action ``a`` and outcome ``w``.

    A harvested unit arriving at a full buffer is discarded.  Raises
    :class:`InvalidDisturbance` if ``w`` claims a channel success on a slot
    where no transmission could have happened.
    """
    if w.w_s and (a == HOLD or s.e == 0):
        raise InvalidDisturbance(
            f"w_s=1 requires a transmission with energy, got a={a}, e={s.e}")
    z_next = w.w_z
    e_next = min(s.e + w.w_e - a, cfg.e_max)
    if w.w_s:
        # Fresh report of s.z: its counter restarts at 1, the other clears.
        return SystemState(z_next, s.z, e_next,
                           1 if s.z == 0 else 0,
                           1 if s.z == 1 else 0)
    d_next = [0, 0]
    for z, (d, cap) in enumerate(((s.d0, cfg.d_max0), (s.d1, cfg.d_max1))):
        if z == s.z_d or (z == w.w_z and z == s.z):
            d_next[z] = min(d + 1, cap)
        # else: neither believed nor active next slot -> stays/returns to 0
    return SystemState(z_next, s.z_d, e_next, d_next[0], d_next[1])


def disturbance_distribution(
        s: SystemState, a: Action, cfg: ScenarioConfig
) -> list[tuple[RandomVector, float]]:
    """Joint law of the slot's random outcomes given state and action.

    The three outcomes are independent; channel success is forced to 0 on a
    hold or with an empty buffer.  Zero-probability atoms are omitted, so
    the list has between 1 and 8 entries summing to 1.
    """
    if a == TRANSMIT and s.e == 0:
        raise ValueError("transmit is not admissible with an empty buffer")
    if a == TRANSMIT:
        ws_law = ((0, 1.0 - cfg.p_s), (1, cfg.p_s))
    else:
        ws_law = ((0, 1.0),)
    we_law = ((0, 1.0 - cfg.p_e), (1, cfg.p_e))
    wz_law = ((0, cfg.p_z[s.z][0]), (1, cfg.p_z[s.z][1]))
    atoms = []
    for w_s, p_s in ws_law:
        if p_s == 0.0:
            continue
        for w_e, p_e in we_law:
            if p_e == 0.0:
                continue
            for w_z, p_z in wz_law:
                if p_z == 0.0:
                    continue
                atoms.append((RandomVector(w_s, w_e, w_z), p_s * p_e * p_z))
    return atoms


def transition_distribution(
        s: SystemState, a: Action, cfg: ScenarioConfig
) -> list[tuple[SystemState, float]]:
    """Successor distribution of (s, a): disturbances pushed through
    :func:`next_state`, duplicate successors merged.

    Returned in state-index order.  Scalar reference implementation; the
    vectorised :func:`build_kernel` is cross-checked against it.
    """
    merged: dict[SystemState, float] = {}
    for w, p in disturbance_distribution(s, a, cfg):
        s2 = next_state(s, a, w, cfg)
        merged[s2] = merged.get(s2, 0.0) + p
    return sorted(merged.items())


class TransitionKernel:
    """Sparse successor distributions for every (state, action) pair.

    Rows are stored per action as CSR matrices over the dense state index.
    The transmit row of an energy-empty state carries the same entries as
    its hold row, so taking an elementwise minimum over actions is always
    safe.
    """

    def __init__(self, space: StateSpace, config: ScenarioConfig,
                 matrices: tuple[sparse.csr_matrix, sparse.csr_matrix]):
        self.space = space
        self.config = config
        self.matrices = matrices

    @property
    def size(self) -> int:
        return self.space.size

    def matrix(self, a: Action) -> sparse.csr_matrix:
        return self.matrices[a]

    def row(self, i: int, a: Action) -> list[tuple[int, float]]:
        """Atoms (successor index, probability) of one row."""
        m = self.matrices[a]
        lo, hi = m.indptr[i], m.indptr[i + 1]
        return list(zip(m.indices[lo:hi].tolist(), m.data[lo:hi].tolist()))

    def row_counts(self) -> np.ndarray:
        """Number of atoms per row, shape (2, size)."""
        return np.stack([np.diff(m.indptr) for m in self.matrices])

    def row_sums(self) -> np.ndarray:
        """Probability mass per row, shape (2, size)."""
        return np.stack([np.asarray(m.sum(axis=1)).reshape(-1)
                         for m in self.matrices])


def _successor_arrays(space: StateSpace, cfg: ScenarioConfig, a: Action,
                      w_s: int, w_e: int, w_z: int):
    """Vectorised next_state over all states for one disturbance pattern.

    Returns (successor index array, probability array); the probability is
    zero where the pattern cannot occur.  Transmit with an empty buffer is
    treated as hold, which aliases those rows to the hold rows.
    """
    z, z_d, e, d0, d1 = space.component_arrays()
    eff_a = np.where(e > 0, a, HOLD)
    transmitting = eff_a == TRANSMIT
    if w_s:
        p_ws = np.where(transmitting, cfg.p_s, 0.0)
    else:
        p_ws = np.where(transmitting, 1.0 - cfg.p_s, 1.0)
    p_we = cfg.p_e if w_e else 1.0 - cfg.p_e
    p_wz = np.where(z == 0, cfg.p_z[0][w_z], cfg.p_z[1][w_z])
    prob = p_ws * p_we * p_wz

    e2 = np.minimum(e + w_e - eff_a, cfg.e_max)
    if w_s:
        zd2 = z
        d0_2 = np.where(z == 0, 1, 0)
        d1_2 = np.where(z == 1, 1, 0)
    else:
        zd2 = z_d
        keep0 = (z_d == 0) | ((z == 0) & (w_z == 0))
        keep1 = (z_d == 1) | ((z == 1) & (w_z == 1))
        d0_2 = np.where(keep0, np.minimum(d0 + 1, cfg.d_max0), 0)
        d1_2 = np.where(keep1, np.minimum(d1 + 1, cfg.d_max1), 0)
    cols = space.index_arrays(np.full_like(z, w_z), zd2, e2, d0_2, d1_2)
    return cols, prob


def build_kernel(cfg: ScenarioConfig, space: StateSpace | None = None) -> TransitionKernel:
    """Assemble the full kernel for a validated config.

    Every row is a probability distribution with at most 8 strictly
    positive atoms; duplicate successors produced by saturation are merged.
    """
    space = space or StateSpace(cfg)
    n = space.size
    rows_template = np.arange(n)
    mats = []
    for a in (HOLD, TRANSMIT):
        rows_parts, cols_parts, prob_parts = [], [], []
        for w_s in (0, 1):
            for w_e in (0, 1):
                for w_z in (0, 1):
                    cols, prob = _successor_arrays(space, cfg, a, w_s, w_e, w_z)
                    keep = prob > 0.0
                    rows_parts.append(rows_template[keep])
                    cols_parts.append(cols[keep])
                    prob_parts.append(prob[keep])
        coo = sparse.coo_matrix(
            (np.concatenate(prob_parts),
             (np.concatenate(rows_parts), np.concatenate(cols_parts))),
            shape=(n, n))
        m = coo.tocsr()
        m.sum_duplicates()
        mats.append(m)
    kernel = TransitionKernel(space, cfg, (mats[0], mats[1]))
    counts = kernel.row_counts()
    sums = kernel.row_sums()
    assert counts.min() >= 1 and counts.max() <= 8
    assert np.abs(sums - 1.0).max() <= _PROB_TOL
    return kernel


def reachable_states(cfg: ScenarioConfig, s0: SystemState,
                     kernel: TransitionKernel | None = None) -> set[int]:
    """Forward closure of {s0} under positive-probability transitions,
    exploring every admissible action."""
    kernel = kernel or build_kernel(cfg)
    space = kernel.space
    start = space.index_of(s0)
    seen = np.zeros(space.size, dtype=bool)
    seen[start] = True
    frontier = [start]
    mats = kernel.matrices
    while frontier:
        nxt = []
        for i in frontier:
            for m in mats:
                for j in m.indices[m.indptr[i]:m.indptr[i + 1]]:
                    if not seen[j]:
                        seen[j] = True
                        nxt.append(int(j))
        frontier = nxt
    return set(np.flatnonzero(seen).tolist())


def write_kernel_csv(kernel: TransitionKernel, out: IO[str] | str) -> None:
    """Dump every kernel atom as CSV rows
    (state_index, action, successor_index, probability), ordered by state,
    then action, then successor."""
    if isinstance(out, str):
        with open(out, "w", newline="") as fh:
            write_kernel_csv(kernel, fh)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["state_index", "action", "successor_index", "probability"])
    for i in range(kernel.size):
        for a in (HOLD, TRANSMIT):
            for j, p in kernel.row(i, a):
                writer.writerow([i, a, j, f"{p:.12g}"])
