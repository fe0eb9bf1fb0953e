"""Single-step dynamics, disturbance laws, and kernel construction."""

import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehaoi import (
    InvalidDisturbance,
    RandomVector,
    ScenarioConfig,
    StateSpace,
    SystemState,
    admissible_actions,
    build_kernel,
    disturbance_distribution,
    next_state,
    reachable_states,
    source_matrix,
    stage_cost,
    stage_cost_bound,
    stage_cost_vector,
    transition_distribution,
    write_kernel_csv,
)

from conftest import BASE, S0

SMALL = ScenarioConfig(p_e=0.6, p_s=0.7, p_z=source_matrix(0.3, 0.4),
                       e_max=2, d_max0=3, d_max1=4, gamma=0.9)


def test_admissible_actions():
    assert admissible_actions(SystemState(0, 0, 0, 1, 0)) == (0,)
    assert admissible_actions(SystemState(0, 0, 1, 1, 0)) == (0, 1)
    assert admissible_actions(SystemState(1, 1, BASE.e_max, 0, 5)) == (0, 1)


def test_stage_cost_default_shapes():
    assert stage_cost(SystemState(0, 0, 0, 3, 9), BASE) == 3.0
    assert stage_cost(SystemState(1, 0, 0, 9, 4), BASE) == 16.0
    assert stage_cost(SystemState(1, 1, 2, 5, 0), BASE) == 0.0


def test_stage_cost_bound_default():
    assert stage_cost_bound(BASE) == 100.0
    vec = stage_cost_vector(BASE, StateSpace(BASE))
    assert vec.max() <= 100.0 and vec.min() >= 0.0


def test_next_state_transmit_success_resets_active_counter():
    s2 = next_state(SystemState(0, 0, 2, 3, 0), 1, RandomVector(1, 0, 0), BASE)
    assert s2 == SystemState(0, 0, 1, 1, 0)


def test_next_state_miss_with_lagging_destination():
    # No success, source flips to the believed state: the believed state's
    # counter keeps aging, the abandoned state's counter clears because it
    # is no longer active and was never reported.
    s2 = next_state(SystemState(0, 1, 1, 4, 6), 0, RandomVector(0, 1, 1), BASE)
    assert s2 == SystemState(1, 1, 2, 0, 7)


def test_next_state_success_while_lagging():
    s2 = next_state(SystemState(1, 0, 1, 2, 9), 1, RandomVector(1, 1, 1), BASE)
    assert s2 == SystemState(1, 1, 1, 0, 1)


def test_next_state_full_buffer_discards_harvest():
    s = SystemState(0, 0, BASE.e_max, 1, 0)
    s2 = next_state(s, 0, RandomVector(0, 1, 0), BASE)
    assert s2.e == BASE.e_max


def test_next_state_counters_saturate():
    s = SystemState(0, 0, 0, BASE.d_max0, 0)
    s2 = next_state(s, 0, RandomVector(0, 0, 0), BASE)
    assert s2.d0 == BASE.d_max0


def test_forcing_rule_violation_raises():
    with pytest.raises(InvalidDisturbance):
        next_state(SystemState(0, 0, 2, 1, 0), 0, RandomVector(1, 0, 0), BASE)
    with pytest.raises(InvalidDisturbance):
        next_state(SystemState(0, 0, 0, 1, 0), 1, RandomVector(1, 0, 0), BASE)


def test_disturbance_forced_zero_success():
    for s, a in [(SystemState(0, 0, 0, 1, 0), 0), (SystemState(1, 0, 3, 1, 1), 0)]:
        atoms = disturbance_distribution(s, a, BASE)
        assert all(w.w_s == 0 for w, _ in atoms)
        assert sum(p for _, p in atoms) == pytest.approx(1.0, abs=1e-15)


def test_disturbance_hand_product():
    # transmit with energy: success * harvest * stay-normal
    atoms = dict(disturbance_distribution(SystemState(0, 0, 2, 1, 0), 1, BASE))
    assert atoms[RandomVector(1, 1, 0)] == pytest.approx(0.8 * 0.8 * 0.9)
    assert len(atoms) == 8


def test_disturbance_degenerate_harvest():
    cfg = ScenarioConfig(p_e=1.0, p_s=0.5, p_z=source_matrix(0.3, 0.4), e_max=2)
    atoms = disturbance_distribution(SystemState(0, 0, 1, 1, 0), 1, cfg)
    assert all(w.w_e == 1 for w, _ in atoms)
    assert len(atoms) == 4


def test_transition_distribution_from_empty_buffer():
    row = dict(transition_distribution(S0, 0, BASE))
    expected = {
        SystemState(0, 0, 1, 2, 0): 0.72,
        SystemState(0, 0, 0, 2, 0): 0.18,
        SystemState(1, 0, 1, 2, 0): 0.08,
        SystemState(1, 0, 0, 2, 0): 0.02,
    }
    assert set(row) == set(expected)
    for s2, p in expected.items():
        assert row[s2] == pytest.approx(p, abs=1e-15)


def test_transition_rows_are_distributions():
    for s in StateSpace(SMALL).states():
        for a in admissible_actions(s):
            row = transition_distribution(s, a, SMALL)
            total = sum(p for _, p in row)
            assert total == pytest.approx(1.0, abs=1e-12)
            assert all(p > 0 for _, p in row)
            assert len(row) <= 8


def test_reliable_channel_updates_destination():
    cfg = ScenarioConfig(p_e=0.6, p_s=1.0, p_z=source_matrix(0.3, 0.4), e_max=2)
    for s in StateSpace(cfg).states():
        if s.e == 0:
            continue
        for s2, _ in transition_distribution(s, 1, cfg):
            assert s2.z_d == s.z


def test_build_kernel_counts():
    kernel = build_kernel(BASE)
    assert kernel.size == 2904
    counts = kernel.row_counts()
    assert counts.shape == (2, 2904)
    assert counts.min() >= 1 and counts.max() <= 8
    assert np.abs(kernel.row_sums() - 1.0).max() <= 1e-12


def test_kernel_matches_scalar_reference():
    kernel = build_kernel(SMALL)
    space = kernel.space
    for s in space.states():
        for a in (0, 1):
            ref_action = a if s.e > 0 else 0
            ref = {space.index_of(s2): p
                   for s2, p in transition_distribution(s, ref_action, SMALL)}
            row = dict(kernel.row(space.index_of(s), a))
            assert set(row) == set(ref)
            for j, p in ref.items():
                assert row[j] == pytest.approx(p, abs=1e-14)


def test_kernel_energy_bookkeeping():
    kernel = build_kernel(SMALL)
    space = kernel.space
    e_of = space.component_arrays()[2]
    for a in (0, 1):
        m = kernel.matrix(a)
        for i in range(space.size):
            e_here = e_of[i]
            eff_a = a if e_here > 0 else 0
            for j in m.indices[m.indptr[i]:m.indptr[i + 1]]:
                e_next = space.state_of(int(j)).e
                assert 0 <= e_next <= SMALL.e_max
                assert e_next in {min(e_here + w - eff_a, SMALL.e_max)
                                  for w in (0, 1)}


def test_empty_buffer_rows_alias_hold():
    kernel = build_kernel(SMALL)
    space = kernel.space
    for i in range(space.size):
        if space.state_of(i).e == 0:
            assert kernel.row(i, 1) == kernel.row(i, 0)


@settings(max_examples=25, deadline=None)
@given(
    p_e=st.sampled_from([0.0, 0.3, 1.0]),
    p_s=st.sampled_from([0.0, 0.7, 1.0]),
    p01=st.floats(0.0, 1.0),
    p10=st.floats(0.0, 1.0),
    e_max=st.integers(0, 3),
)
def test_kernel_rows_stochastic_property(p_e, p_s, p01, p10, e_max):
    cfg = ScenarioConfig(p_e=p_e, p_s=p_s, p_z=source_matrix(p01, p10),
                         e_max=e_max, d_max0=2, d_max1=3)
    kernel = build_kernel(cfg)
    assert np.abs(kernel.row_sums() - 1.0).max() <= 1e-12
    counts = kernel.row_counts()
    assert counts.min() >= 1 and counts.max() <= 8


def test_reachable_contains_start_and_is_fixed_point():
    kernel = build_kernel(SMALL)
    start = SystemState(0, 0, 0, 1, 0)
    closure = reachable_states(SMALL, start, kernel)
    assert kernel.space.index_of(start) in closure
    # one more expansion step adds nothing
    expanded = set(closure)
    for i in closure:
        for a in (0, 1):
            expanded.update(j for j, _ in kernel.row(i, a))
    assert expanded == closure


def test_reachable_agreeing_states_have_zero_other_counter():
    kernel = build_kernel(SMALL)
    space = kernel.space
    closure = reachable_states(SMALL, SystemState(0, 0, 0, 1, 0), kernel)
    for i in closure:
        s = space.state_of(i)
        if s.z == s.z_d == 0:
            assert s.d1 == 0
        if s.z == s.z_d == 1:
            assert s.d0 == 0


def test_kernel_csv_dump():
    cfg = ScenarioConfig(p_e=0.6, p_s=0.7, p_z=source_matrix(0.3, 0.4),
                         e_max=1, d_max0=1, d_max1=1)
    kernel = build_kernel(cfg)
    buf1, buf2 = io.StringIO(), io.StringIO()
    write_kernel_csv(kernel, buf1)
    write_kernel_csv(kernel, buf2)
    assert buf1.getvalue() == buf2.getvalue()
    lines = buf1.getvalue().splitlines()
    assert lines[0] == "state_index,action,successor_index,probability"
    expected_atoms = int(kernel.row_counts().sum())
    assert len(lines) == 1 + expected_atoms
    # rows ordered by (state, action, successor)
    keys = [tuple(map(float, line.split(",")[:3])) for line in lines[1:]]
    assert keys == sorted(keys)
