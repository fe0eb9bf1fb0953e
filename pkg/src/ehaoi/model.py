"""Domain types and the state-space index bijection.

The system under study is a sensor that harvests energy and sends status
updates about a two-state Markov source (state 0 = normal, state 1 = alarm)
over an unreliable channel.  Everything downstream (transition kernel,
solver, simulator, CLI) shares the types defined here.

A system state is the 5-tuple

    (z, z_d, e, d0, d1)

where ``z`` is the current source state, ``z_d`` the source state last
reported to the destination, ``e`` the number of buffered energy units, and
``d0``/``d1`` the freshness (age) counters kept per source state, each
saturating at its own cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

__all__ = [
    "HOLD",
    "TRANSMIT",
    "Action",
    "ConfigError",
    "RangeError",
    "CostSpec",
    "ScenarioConfig",
    "SystemState",
    "RandomVector",
    "StateSpace",
    "validate_config",
    "source_matrix",
]

# Actions are plain ints everywhere: 0 = hold (keep the energy), 1 = transmit.
Action = int
HOLD: Action = 0
TRANSMIT: Action = 1


class ConfigError(ValueError):
    """A scenario parameter violates its declared constraint."""


class RangeError(ValueError):
    """A state or index lies outside the declared state space."""


class SystemState(NamedTuple):
    """Full system state at the start of a slot."""

    z: int    # current source state, 0 or 1
    z_d: int  # source state last delivered to the destination
    e: int    # buffered energy units, 0..e_max
    d0: int   # age counter for source state 0, 0..d_max0
    d1: int   # age counter for source state 1, 0..d_max1


class RandomVector(NamedTuple):
    """Per-slot random outcomes.

    ``w_s`` is forced to 0 whenever the slot's action is hold or the buffer
    is empty; the channel can only succeed on an actual transmission.
    """

    w_s: int  # channel success
    w_e: int  # energy unit arrival
    w_z: int  # next source state


@dataclass(frozen=True)
class CostSpec:
    """Shape of the per-slot staleness penalty.

    The stage cost charges ``f_weight * d0 ** f_exponent`` while the source
    is normal and ``h_weight * d1 ** h_exponent`` while it is in alarm.  The
    alarm curve must dominate the normal curve on the whole age range so the
    alarm state is never cheaper to neglect; this is validated together with
    the scenario (the age range depends on the caps).

    The defaults (linear normal penalty, quadratic alarm penalty) are the
    shapes used throughout the experiment suite.
    """

    f_weight: float = 1.0
    f_exponent: float = 1.0
    h_weight: float = 1.0
    h_exponent: float = 2.0

    def f(self, delta: int) -> float:
        """Penalty for age ``delta`` in the normal state."""
        return self.f_weight * float(delta) ** self.f_exponent

    def h(self, delta: int) -> float:
        """Penalty for age ``delta`` in the alarm state."""
        return self.h_weight * float(delta) ** self.h_exponent


def _as_row_pair(p_z) -> tuple[tuple[float, float], tuple[float, float]]:
    rows = tuple(tuple(float(x) for x in row) for row in p_z)
    if len(rows) != 2 or any(len(r) != 2 for r in rows):
        raise ConfigError("p_z must be a 2x2 matrix")
    return rows  # type: ignore[return-value]


@dataclass(frozen=True)
class ScenarioConfig:
    """All parameters of one scenario.

    Immutable (and hashable) after construction so configs can be shared
    across workers and used as cache keys.  Construction normalises the
    numeric types; it does not validate -- call :func:`validate_config`.
    """

    p_e: float                      # energy-unit arrival probability per slot
    p_s: float                      # transmission success probability
    p_z: tuple[tuple[float, float], tuple[float, float]]  # source transitions
    e_max: int                      # energy buffer capacity, units
    d_max0: int = 10                # age saturation cap for state 0
    d_max1: int = 10                # age saturation cap for state 1
    gamma: float = 0.99             # discount factor
    cost_shape: CostSpec = field(default_factory=CostSpec)

    def __post_init__(self):
        object.__setattr__(self, "p_e", float(self.p_e))
        object.__setattr__(self, "p_s", float(self.p_s))
        object.__setattr__(self, "p_z", _as_row_pair(self.p_z))
        object.__setattr__(self, "e_max", int(self.e_max))
        object.__setattr__(self, "d_max0", int(self.d_max0))
        object.__setattr__(self, "d_max1", int(self.d_max1))
        object.__setattr__(self, "gamma", float(self.gamma))


def source_matrix(p01: float, p10: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Build the source transition matrix from the two off-diagonal rates."""
    return ((1.0 - p01, p01), (p10, 1.0 - p10))


_ROW_SUM_TOL = 1e-12


def validate_config(raw: ScenarioConfig) -> ScenarioConfig:
    """Return ``raw`` unchanged iff every parameter constraint holds.

    Raises :class:`ConfigError` naming the first violated constraint.
    Validation is idempotent: an accepted config is accepted again.
    """
    if not 0.0 <= raw.p_e <= 1.0:
        raise ConfigError(f"p_e must lie in [0, 1], got {raw.p_e}")
    if not 0.0 <= raw.p_s <= 1.0:
        raise ConfigError(f"p_s must lie in [0, 1], got {raw.p_s}")
    for z, row in enumerate(raw.p_z):
        for p in row:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_z row {z} entry {p} outside [0, 1]")
        if abs(sum(row) - 1.0) > _ROW_SUM_TOL:
            raise ConfigError(f"p_z row {z} sums to {sum(row)!r}, expected 1")
    if raw.e_max < 0:
        raise ConfigError(f"e_max must be >= 0, got {raw.e_max}")
    if raw.d_max0 < 1:
        raise ConfigError(f"d_max0 must be >= 1, got {raw.d_max0}")
    if raw.d_max1 < 1:
        raise ConfigError(f"d_max1 must be >= 1, got {raw.d_max1}")
    if not 0.0 < raw.gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {raw.gamma}")
    cs = raw.cost_shape
    if cs.f_exponent <= 0 or cs.h_exponent <= 0:
        raise ConfigError("cost exponents must be positive")
    if cs.f_weight < 0 or cs.h_weight < 0:
        raise ConfigError("cost weights must be nonnegative")
    # The alarm penalty must dominate the normal one on every admissible age.
    for delta in range(max(raw.d_max0, raw.d_max1) + 1):
        if cs.h(delta) < cs.f(delta):
            raise ConfigError(
                f"alarm penalty below normal penalty at age {delta}: "
                f"{cs.h(delta)} < {cs.f(delta)}"
            )
    return raw


class StateSpace:
    """Dense enumeration of the full product state space.

    States are laid out mixed-radix with axes (z, z_d, e, d0, d1) from
    slowest to fastest, so the index is strictly monotone in the tuple.
    The full product space is enumerated even though some of it is
    unreachable from consistent starts; solving over the superset is still
    correct and keeps the index dense.
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._ne = config.e_max + 1
        self._n0 = config.d_max0 + 1
        self._n1 = config.d_max1 + 1
        self.size = 4 * self._ne * self._n0 * self._n1
        self._components: tuple[np.ndarray, ...] | None = None

    def index_of(self, s: SystemState) -> int:
        """Dense index of a state; raises :class:`RangeError` off the grid."""
        z, z_d, e, d0, d1 = s
        if not (z in (0, 1) and z_d in (0, 1) and 0 <= e < self._ne
                and 0 <= d0 < self._n0 and 0 <= d1 < self._n1):
            raise RangeError(f"state {s!r} outside the declared space")
        return (((z * 2 + z_d) * self._ne + e) * self._n0 + d0) * self._n1 + d1

    def state_of(self, i: int) -> SystemState:
        """Inverse of :meth:`index_of`."""
        if not 0 <= i < self.size:
            raise RangeError(f"index {i} outside [0, {self.size})")
        i, d1 = divmod(i, self._n1)
        i, d0 = divmod(i, self._n0)
        i, e = divmod(i, self._ne)
        z, z_d = divmod(i, 2)
        return SystemState(z, z_d, e, d0, d1)

    def states(self) -> Iterator[SystemState]:
        """All states in index order."""
        for i in range(self.size):
            yield self.state_of(i)

    def component_arrays(self) -> tuple[np.ndarray, ...]:
        """Arrays (z, z_d, e, d0, d1), each of shape (size,), in index order."""
        if self._components is None:
            grids = np.indices((2, 2, self._ne, self._n0, self._n1))
            self._components = tuple(g.reshape(-1) for g in grids)
        return self._components

    def index_arrays(self, z, z_d, e, d0, d1) -> np.ndarray:
        """Vectorised :meth:`index_of` for component arrays (no range check)."""
        return (((z * 2 + z_d) * self._ne + e) * self._n0 + d0) * self._n1 + d1

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        """Shape of the (z, z_d, e, d0, d1) grid a dense vector reshapes to."""
        return (2, 2, self._ne, self._n0, self._n1)
