"""Exact solver, simulator, and experiment harness for an energy-harvesting
status-update system monitoring a two-state Markov source."""

from .model import (
    HOLD,
    TRANSMIT,
    Action,
    ConfigError,
    CostSpec,
    RandomVector,
    RangeError,
    ScenarioConfig,
    StateSpace,
    SystemState,
    source_matrix,
    validate_config,
)
from .kernel import (
    InvalidDisturbance,
    TransitionKernel,
    admissible_actions,
    build_kernel,
    disturbance_distribution,
    next_state,
    reachable_states,
    stage_cost,
    stage_cost_bound,
    stage_cost_vector,
    transition_distribution,
    write_kernel_csv,
)
from .solver import (
    NotConverged,
    SolveReport,
    StructureReport,
    Violation,
    action_value_gap,
    action_value_gaps,
    bellman_backup,
    check_gap_monotonicity,
    check_threshold_structure,
    check_value_spread_inequality,
    extract_policy,
    finite_horizon_oracle,
    finite_horizon_values,
    policy_action_grid,
    value_iteration,
)
from .simulator import (
    BernoulliPolicy,
    EpisodeTrace,
    EvalSummary,
    TabularPolicy,
    TraceStep,
    TruncationTooCoarse,
    as_policy,
    direct_aoi_trace,
    evaluate_policy_mc,
    make_baseline,
    sample_disturbance,
    simulate_episode,
    verify_aoi_consistency,
)

__version__ = "0.1.0"
