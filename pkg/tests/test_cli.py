"""End-to-end checks of the command-line harness and its exit-code contract."""

import csv
import os

import pytest

from ehaoi import ScenarioConfig, StateSpace, SystemState, source_matrix
from ehaoi.cli import load_experiment, main

SMALL_CFG = """
# compact instance so every command finishes in milliseconds
model.p_e = 0.6
model.p_s = 0.7
model.p01 = 0.3
model.p10 = 0.4
model.e_max = 2
model.d_max0 = 4
model.d_max1 = 4
model.gamma = 0.9
solver.tol = 1e-10
mc.episodes = 150
mc.horizon = 250
mc.seed = 7
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return str(path)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# config parsing


def test_load_experiment_defaults(small_cfg):
    spec = load_experiment(small_cfg)
    assert spec.base.e_max == 2
    assert spec.base.p_z == ((0.7, 0.3), (0.4, 0.6))
    assert spec.s0 == SystemState(0, 0, 0, 1, 0)
    assert spec.mc_seed == 7


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(SMALL_CFG + "model.p_q = 1\n")
    assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_missing_required_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("model.p_e = 0.5\n")
    assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_inconsistent_redundant_rate(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(SMALL_CFG + "model.p00 = 0.5\n")
    assert main(["solve", "--config", str(path), "--out", str(tmp_path)]) == 1


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path)]) == 1


def test_usage_error_maps_to_input_error():
    assert main(["sweep"]) == 1  # --config required


# ---------------------------------------------------------------------------
# solve


def test_solve_writes_solution(small_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["solve", "--config", small_cfg, "--out", str(out)]) == 0
    assert "converged" in capsys.readouterr().out
    rows = read_rows(out / "report.csv")
    assert len(rows) == 1 and rows[0]["converged"] == "true"
    spec = load_experiment(small_cfg)
    n = StateSpace(spec.base).size
    assert len(read_rows(out / "value.csv")) == n
    assert len(read_rows(out / "policy.csv")) == n


def test_solve_reruns_byte_identical(small_cfg, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    main(["solve", "--config", small_cfg, "--out", str(out1)])
    main(["solve", "--config", small_cfg, "--out", str(out2)])
    for name in ("value.csv", "policy.csv", "report.csv"):
        assert read_bytes(out1 / name) == read_bytes(out2 / name)


def test_solve_iteration_starved_exits_2(tmp_path, capsys):
    path = tmp_path / "starved.cfg"
    path.write_text(SMALL_CFG.replace("solver.tol = 1e-10",
                                      "solver.tol = 1e-10\nsolver.max_iter = 10"))
    out = tmp_path / "out"
    assert main(["solve", "--config", str(path), "--out", str(out)]) == 2
    assert "not converged" in capsys.readouterr().err
    rows = read_rows(out / "report.csv")
    assert rows[0]["converged"] == "false" and rows[0]["iterations"] == "10"


# ---------------------------------------------------------------------------
# sweep


def test_sweep_grid_rows_and_determinism(small_cfg, tmp_path):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    argv = ["sweep", "--config", small_cfg,
            "--axis", "p_e=0.2,0.5,0.8", "--axis", "e_max=1,2",
            "--threads", "1"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    rows = read_rows(out1 / "sweep.csv")
    assert len(rows) == 6
    assert list(rows[0]) == ["p_e", "e_max", "j_star_s0", "iterations",
                             "residual"]
    # rows iterate the grid row-major on the axis order given
    assert [(r["p_e"], r["e_max"]) for r in rows] == [
        ("0.2", "1"), ("0.2", "2"), ("0.5", "1"),
        ("0.5", "2"), ("0.8", "1"), ("0.8", "2")]
    assert read_bytes(out1 / "sweep.csv") == read_bytes(out2 / "sweep.csv")


def test_sweep_parallel_matches_serial(small_cfg, tmp_path):
    serial, parallel = tmp_path / "ser", tmp_path / "par"
    argv = ["sweep", "--config", small_cfg, "--axis", "p_s=0.4,0.6,0.8,1.0"]
    assert main(argv + ["--out", str(serial), "--threads", "1"]) == 0
    assert main(argv + ["--out", str(parallel), "--threads", "2"]) == 0
    assert read_bytes(serial / "sweep.csv") == read_bytes(parallel / "sweep.csv")


def test_sweep_requires_axis(small_cfg, tmp_path):
    assert main(["sweep", "--config", small_cfg, "--out", str(tmp_path)]) == 1


def test_sweep_rejects_unknown_axis(small_cfg, tmp_path):
    assert main(["sweep", "--config", small_cfg, "--out", str(tmp_path),
                 "--axis", "gamma=0.9,0.99"]) == 1


def test_sweep_rejects_invalid_value(small_cfg, tmp_path):
    assert main(["sweep", "--config", small_cfg, "--out", str(tmp_path),
                 "--axis", "p_e=0.5,1.5"]) == 1


# ---------------------------------------------------------------------------
# policy-table


def test_policy_table_empty_buffer_row_is_hold(small_cfg, tmp_path):
    for z in (0, 1):
        for z_d in (0, 1):
            out = tmp_path / f"t{z}{z_d}"
            assert main(["policy-table", "--config", small_cfg,
                         "--out", str(out), "--z", str(z), "--z-d", str(z_d),
                         "--other-aoi", "0"]) == 0
            rows = read_rows(out / "policy_table.csv")
            assert rows[0]["e"] == "0"
            assert all(v == "0" for key, v in rows[0].items() if key != "e")


def test_policy_table_rejects_out_of_range_slice(small_cfg, tmp_path):
    assert main(["policy-table", "--config", small_cfg, "--out", str(tmp_path),
                 "--z", "0", "--z-d", "0", "--other-aoi", "99"]) == 1


# ---------------------------------------------------------------------------
# simulate


def test_simulate_deterministic_bytes(small_cfg, tmp_path):
    out1, out2 = tmp_path / "m1", tmp_path / "m2"
    argv = ["simulate", "--config", small_cfg, "--policy", "alarm_only",
            "--episodes", "80", "--horizon", "120"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert read_bytes(out1 / "simulate.csv") == read_bytes(out2 / "simulate.csv")
    different = tmp_path / "m3"
    assert main(argv + ["--out", str(different), "--seed", "99"]) == 0
    assert read_bytes(out1 / "simulate.csv") != read_bytes(different / "simulate.csv")


def test_simulate_optimal_consistent_with_solver(small_cfg, tmp_path):
    out = tmp_path / "opt"
    assert main(["simulate", "--config", small_cfg, "--policy", "optimal",
                 "--episodes", "400", "--horizon", "250",
                 "--out", str(out)]) == 0
    solve_out = tmp_path / "sv"
    main(["solve", "--config", small_cfg, "--out", str(solve_out)])
    j0 = float(read_rows(solve_out / "report.csv")[0]["j_star_s0"])
    row = read_rows(out / "simulate.csv")[0]
    slack = (3 * float(row["std_error"]) + float(row["truncation_bound"]))
    assert abs(float(row["mean_discounted_cost"]) - j0) <= slack


def test_simulate_never_costs_at_least_optimal(small_cfg, tmp_path):
    means = {}
    for policy in ("optimal", "never"):
        out = tmp_path / policy
        assert main(["simulate", "--config", small_cfg, "--policy", policy,
                     "--episodes", "150", "--out", str(out)]) == 0
        means[policy] = float(read_rows(out / "simulate.csv")[0]
                              ["mean_discounted_cost"])
    assert means["never"] >= means["optimal"]


def test_simulate_policy_csv_roundtrip(small_cfg, tmp_path):
    solve_out = tmp_path / "sv"
    main(["solve", "--config", small_cfg, "--out", str(solve_out)])
    out_csv = tmp_path / "replay"
    assert main(["simulate", "--config", small_cfg,
                 "--policy", str(solve_out / "policy.csv"),
                 "--episodes", "50", "--out", str(out_csv)]) == 0
    out_opt = tmp_path / "direct"
    assert main(["simulate", "--config", small_cfg, "--policy", "optimal",
                 "--episodes", "50", "--out", str(out_opt)]) == 0
    a = read_rows(out_csv / "simulate.csv")[0]
    b = read_rows(out_opt / "simulate.csv")[0]
    assert a["mean_discounted_cost"] == b["mean_discounted_cost"]


def test_simulate_rejects_malformed_policy(small_cfg, tmp_path):
    solve_out = tmp_path / "sv"
    main(["solve", "--config", small_cfg, "--out", str(solve_out)])
    # transmit from an energy-empty state is inadmissible
    lines = (solve_out / "policy.csv").read_text().splitlines()
    header, first = lines[0], lines[1].split(",")
    assert first[2] == "0"  # e = 0 in the first state
    first[-1] = "1"
    bad = tmp_path / "bad_policy.csv"
    bad.write_text("\n".join([header, ",".join(first)] + lines[2:]) + "\n")
    assert main(["simulate", "--config", small_cfg, "--policy", str(bad),
                 "--episodes", "10", "--out", str(tmp_path)]) == 1
    # truncated table (missing states)
    short = tmp_path / "short_policy.csv"
    short.write_text("\n".join(lines[:10]) + "\n")
    assert main(["simulate", "--config", small_cfg, "--policy", str(short),
                 "--episodes", "10", "--out", str(tmp_path)]) == 1


def test_simulate_rejects_bad_random_spec(small_cfg, tmp_path):
    assert main(["simulate", "--config", small_cfg, "--policy", "random:x",
                 "--out", str(tmp_path)]) == 1
    assert main(["simulate", "--config", small_cfg, "--policy", "random:1.5",
                 "--out", str(tmp_path)]) == 1


# ---------------------------------------------------------------------------
# check


def test_check_passes_on_solved_policy(small_cfg, tmp_path, capsys):
    out = tmp_path / "chk"
    assert main(["check", "--config", small_cfg, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    for name in ("threshold_structure", "gap_monotonicity", "value_spread"):
        assert f"{name}: ok" in printed
        assert len(read_rows(out / f"check_{name}.csv")) == 0


def test_check_no_energy_instance_vacuous(tmp_path):
    path = tmp_path / "noenergy.cfg"
    path.write_text(SMALL_CFG.replace("model.e_max = 2", "model.e_max = 0"))
    assert main(["check", "--config", str(path), "--out", str(tmp_path)]) == 0


def test_check_flags_corrupted_policy(small_cfg, tmp_path):
    solve_out = tmp_path / "sv"
    main(["solve", "--config", small_cfg, "--out", str(solve_out)])
    spec = load_experiment(small_cfg)
    space = StateSpace(spec.base)
    # force a hold in the middle of the transmit region
    target = None
    rows = read_rows(solve_out / "policy.csv")
    for i, row in enumerate(rows):
        s = SystemState(*(int(row[k]) for k in ("z", "z_d", "e", "d0", "d1")))
        if (row["action"] == "1" and s.d0 < spec.base.d_max0
                and s.d1 < spec.base.d_max1):
            target, rows[i]["action"] = i, "0"
            # also transmit strictly below it so the violation is witnessed
            below = next(j for j, r2 in enumerate(rows)
                         if (r2["z"], r2["z_d"], r2["e"]) == (row["z"], row["z_d"], row["e"])
                         and int(r2["d0"]) <= s.d0 and int(r2["d1"]) <= s.d1
                         and (int(r2["d0"]), int(r2["d1"])) != (s.d0, s.d1))
            rows[below]["action"] = "1"
            break
    assert target is not None
    bad = tmp_path / "corrupt.csv"
    with open(bad, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    out = tmp_path / "chk"
    assert main(["check", "--config", small_cfg, "--out", str(out),
                 "--policy", str(bad)]) == 3
    assert len(read_rows(out / "check_threshold_structure.csv")) >= 1


# ---------------------------------------------------------------------------
# trace


def test_trace_consistent_and_deterministic(small_cfg, tmp_path):
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    argv = ["trace", "--config", small_cfg, "--policy", "optimal",
            "--horizon", "200"]
    assert main(argv + ["--out", str(out1)]) == 0
    assert main(argv + ["--out", str(out2)]) == 0
    assert read_bytes(out1 / "trace.csv") == read_bytes(out2 / "trace.csv")
    rows = read_rows(out1 / "trace.csv")
    assert len(rows) == 200
    assert all(r["consistent"] == "true" for r in rows)
    assert all((r["d0"], r["d1"]) == (r["direct_d0"], r["direct_d1"])
               for r in rows)


def test_trace_single_slot(small_cfg, tmp_path):
    out = tmp_path / "t"
    assert main(["trace", "--config", small_cfg, "--policy", "never",
                 "--horizon", "1", "--out", str(out)]) == 0
    assert len(read_rows(out / "trace.csv")) == 1


def test_trace_unreadable_policy(small_cfg, tmp_path):
    assert main(["trace", "--config", small_cfg, "--horizon", "10",
                 "--policy", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path)]) == 1
