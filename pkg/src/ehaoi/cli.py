"""Command-line harness: solve, sweep, policy-table, simulate, check, trace.

All commands read one flat ``key = value`` config file (dotted section
prefixes, ``#`` comments) and write CSV files into the output directory.
Outputs are deterministic functions of the config bytes, flags, and seed;
re-running a command reproduces its files byte for byte.

Exit codes: 0 success, 1 input error, 2 solver non-convergence,
3 property violation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .kernel import build_kernel
from .model import (
    ConfigError,
    CostSpec,
    RangeError,
    ScenarioConfig,
    StateSpace,
    SystemState,
    source_matrix,
    validate_config,
)
from .simulator import (
    BernoulliPolicy,
    TabularPolicy,
    direct_aoi_trace,
    evaluate_policy_mc,
    make_baseline,
    simulate_episode,
)
from .solver import (
    NotConverged,
    StructureReport,
    check_gap_monotonicity,
    check_threshold_structure,
    check_value_spread_inequality,
    policy_action_grid,
    value_iteration,
)

__all__ = ["ExperimentSpec", "load_experiment", "main"]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2
EXIT_VIOLATION = 3

_SWEEP_AXES = ("p_e", "p_s", "e_max", "p01", "p10")

_KNOWN_KEYS = {
    "model.p_e", "model.p_s", "model.p00", "model.p01", "model.p10",
    "model.p11", "model.e_max", "model.d_max0", "model.d_max1",
    "model.gamma", "cost.f_weight", "cost.f_exponent", "cost.h_weight",
    "cost.h_exponent", "solver.tol", "solver.max_iter", "mc.episodes",
    "mc.horizon", "mc.seed", "init.z", "init.z_d", "init.e", "init.d0",
    "init.d1",
}

_REQUIRED_KEYS = ("model.p_e", "model.p_s", "model.p01", "model.p10",
                  "model.e_max")


@dataclass
class ExperimentSpec:
    """Everything one experiment needs: scenario, start state, solver and
    Monte Carlo settings."""

    base: ScenarioConfig
    s0: SystemState
    tol: float = 1e-9
    max_iter: int = 200_000
    mc_episodes: int = 10_000
    mc_horizon: int = 2_000
    mc_seed: int = 0


def _parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _get(kv: dict[str, str], key: str, cast, default=None):
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return cast(kv[key])
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def load_experiment(path: str) -> ExperimentSpec:
    """Parse and validate a config file; raises :class:`ConfigError`."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            kv = _parse_kv_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    for key in _REQUIRED_KEYS:
        if key not in kv:
            raise ConfigError(f"missing required key {key!r}")
    p01 = _get(kv, "model.p01", float)
    p10 = _get(kv, "model.p10", float)
    for redundant, expected in (("model.p00", 1.0 - p01), ("model.p11", 1.0 - p10)):
        if redundant in kv and abs(float(kv[redundant]) - expected) > 1e-12:
            raise ConfigError(
                f"{redundant} = {kv[redundant]} contradicts its off-diagonal "
                f"rate (expected {expected!r})")
    cfg = ScenarioConfig(
        p_e=_get(kv, "model.p_e", float),
        p_s=_get(kv, "model.p_s", float),
        p_z=source_matrix(p01, p10),
        e_max=_get(kv, "model.e_max", int),
        d_max0=_get(kv, "model.d_max0", int, 10),
        d_max1=_get(kv, "model.d_max1", int, 10),
        gamma=_get(kv, "model.gamma", float, 0.99),
        cost_shape=CostSpec(
            f_weight=_get(kv, "cost.f_weight", float, 1.0),
            f_exponent=_get(kv, "cost.f_exponent", float, 1.0),
            h_weight=_get(kv, "cost.h_weight", float, 1.0),
            h_exponent=_get(kv, "cost.h_exponent", float, 2.0),
        ),
    )
    validate_config(cfg)
    s0 = SystemState(
        z=_get(kv, "init.z", int, 0),
        z_d=_get(kv, "init.z_d", int, 0),
        e=_get(kv, "init.e", int, 0),
        d0=_get(kv, "init.d0", int, 1),
        d1=_get(kv, "init.d1", int, 0),
    )
    StateSpace(cfg).index_of(s0)  # range check
    return ExperimentSpec(
        base=cfg,
        s0=s0,
        tol=_get(kv, "solver.tol", float, 1e-9),
        max_iter=_get(kv, "solver.max_iter", int, 200_000),
        mc_episodes=_get(kv, "mc.episodes", int, 10_000),
        mc_horizon=_get(kv, "mc.horizon", int, 2_000),
        mc_seed=_get(kv, "mc.seed", int, 0),
    )


# ---------------------------------------------------------------------------
# CSV plumbing


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".12g")
    return str(x)


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _state_rows(space: StateSpace, values) -> Iterable[Sequence]:
    for i, s in enumerate(space.states()):
        yield (*s, values[i])


def _write_solution(out_dir: str, space: StateSpace, s0: SystemState, values,
                    policy, report) -> None:
    _write_csv(os.path.join(out_dir, "value.csv"),
               ["z", "z_d", "e", "d0", "d1", "value"],
               _state_rows(space, values))
    _write_csv(os.path.join(out_dir, "policy.csv"),
               ["z", "z_d", "e", "d0", "d1", "action"],
               _state_rows(space, policy))
    _write_csv(os.path.join(out_dir, "report.csv"),
               ["iterations", "residual", "optimality_bound", "converged",
                "tol", "j_star_s0"],
               [(report.iterations, report.residual, report.optimality_bound,
                 report.converged, report.tol,
                 float(values[space.index_of(s0)]))])


def _read_policy_csv(path: str, space: StateSpace) -> np.ndarray:
    """Load a policy table written by ``solve``; every state exactly once."""
    actions = np.full(space.size, -1, dtype=np.int8)
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"z", "z_d", "e", "d0", "d1", "action"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise ConfigError(f"policy CSV {path!r} must have columns {sorted(required)}")
            for row in reader:
                s = SystemState(int(row["z"]), int(row["z_d"]), int(row["e"]),
                                int(row["d0"]), int(row["d1"]))
                i = space.index_of(s)
                if actions[i] != -1:
                    raise ConfigError(f"policy CSV repeats state {tuple(s)}")
                a = int(row["action"])
                if a not in (0, 1):
                    raise ConfigError(f"policy CSV action {a} must be 0 or 1")
                if a == 1 and s.e == 0:
                    raise ConfigError(
                        f"policy CSV transmits from energy-empty state {tuple(s)}")
                actions[i] = a
    except OSError as exc:
        raise ConfigError(f"cannot read policy CSV {path!r}: {exc}") from exc
    except (ValueError, RangeError) as exc:
        raise ConfigError(f"malformed policy CSV {path!r}: {exc}") from exc
    if (actions == -1).any():
        raise ConfigError(f"policy CSV {path!r} misses "
                          f"{int((actions == -1).sum())} states")
    return actions


def _resolve_policy(source: str, spec: ExperimentSpec):
    """Map a --policy argument to a policy object.

    Accepts ``optimal``, the baseline names, ``random:P``, or a path to a
    policy CSV.
    """
    cfg = spec.base
    if source == "optimal":
        _, policy, _ = value_iteration(cfg, tol=spec.tol, max_iter=spec.max_iter)
        return TabularPolicy(policy, StateSpace(cfg))
    if source in ("never", "always", "alarm_only"):
        return make_baseline(source, cfg)
    if source.startswith("random:"):
        try:
            p = float(source.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad random policy spec {source!r}") from exc
        return BernoulliPolicy(p)
    return TabularPolicy(_read_policy_csv(source, StateSpace(cfg)), StateSpace(cfg))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_solve(args, spec: ExperimentSpec) -> int:
    space = StateSpace(spec.base)
    try:
        values, policy, report = value_iteration(
            spec.base, tol=spec.tol, max_iter=spec.max_iter)
    except NotConverged as exc:
        _write_solution(args.out, space, spec.s0, exc.values, exc.policy, exc.report)
        print(f"not converged: residual {exc.report.residual:.3e} after "
              f"{exc.report.iterations} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    _write_solution(args.out, space, spec.s0, values, policy, report)
    print(f"converged in {report.iterations} iterations, "
          f"residual {report.residual:.3e}, "
          f"J*(s0) = {values[space.index_of(spec.s0)]:.6f}")
    return EXIT_OK


def _swept_config(base: ScenarioConfig, names: Sequence[str], point) -> ScenarioConfig:
    fields: dict = {}
    p01 = base.p_z[0][1]
    p10 = base.p_z[1][0]
    for name, value in zip(names, point):
        if name == "p01":
            p01 = value
        elif name == "p10":
            p10 = value
        elif name == "e_max":
            fields["e_max"] = int(value)
        else:
            fields[name] = value
    fields["p_z"] = source_matrix(p01, p10)
    return ScenarioConfig(
        p_e=fields.get("p_e", base.p_e),
        p_s=fields.get("p_s", base.p_s),
        p_z=fields["p_z"],
        e_max=fields.get("e_max", base.e_max),
        d_max0=base.d_max0,
        d_max1=base.d_max1,
        gamma=base.gamma,
        cost_shape=base.cost_shape,
    )


def _sweep_point(payload):
    cfg, s0, tol, max_iter = payload
    values, _, report = value_iteration(cfg, tol=tol, max_iter=max_iter)
    j = float(values[StateSpace(cfg).index_of(s0)])
    return j, report.iterations, report.residual


def _parse_axes(axis_args: Sequence[str]) -> tuple[list[str], list[list[float]]]:
    names: list[str] = []
    grids: list[list[float]] = []
    for spec in axis_args:
        if "=" not in spec:
            raise ConfigError(f"axis {spec!r} must look like name=v1,v2,...")
        name, _, values = spec.partition("=")
        name = name.strip()
        if name not in _SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; "
                              f"choose from {_SWEEP_AXES}")
        if name in names:
            raise ConfigError(f"sweep axis {name!r} given twice")
        try:
            grid = [float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"axis {name!r}: {exc}") from exc
        if not grid:
            raise ConfigError(f"axis {name!r} has no values")
        names.append(name)
        grids.append(grid)
    if not names:
        raise ConfigError("sweep needs at least one --axis")
    return names, grids


def _cmd_sweep(args, spec: ExperimentSpec) -> int:
    names, grids = _parse_axes(args.axis)
    points = list(product(*grids))
    configs = [_swept_config(spec.base, names, point) for point in points]
    for cfg in configs:
        validate_config(cfg)
        StateSpace(cfg).index_of(spec.s0)
    payloads = [(cfg, spec.s0, spec.tol, spec.max_iter) for cfg in configs]
    workers = args.threads if args.threads > 0 else (os.cpu_count() or 1)
    workers = min(workers, len(payloads))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    rows = [(*point, j, iters, residual)
            for point, (j, iters, residual) in zip(points, results)]
    _write_csv(os.path.join(args.out, "sweep.csv"),
               [*names, "j_star_s0", "iterations", "residual"], rows)
    print(f"swept {len(rows)} configurations over axes {', '.join(names)}")
    return EXIT_OK


def _cmd_policy_table(args, spec: ExperimentSpec) -> int:
    cfg = spec.base
    _, policy, _ = value_iteration(cfg, tol=spec.tol, max_iter=spec.max_iter)
    grid = policy_action_grid(policy, StateSpace(cfg), args.z, args.z_d,
                              args.other_aoi)
    cap = grid.shape[1] - 1
    _write_csv(os.path.join(args.out, "policy_table.csv"),
               ["e", *[str(d) for d in range(cap + 1)]],
               [(e, *grid[e]) for e in range(grid.shape[0])])
    print(f"policy grid for slice z={args.z} z_d={args.z_d} "
          f"other_aoi={args.other_aoi}: {int(grid.sum())} transmit cells")
    return EXIT_OK


def _cmd_simulate(args, spec: ExperimentSpec) -> int:
    policy = _resolve_policy(args.policy, spec)
    seed = args.seed if args.seed is not None else spec.mc_seed
    episodes = args.episodes or spec.mc_episodes
    horizon = args.horizon or spec.mc_horizon
    summary = evaluate_policy_mc(policy, spec.base, spec.s0, horizon,
                                 episodes, seed)
    _write_csv(os.path.join(args.out, "simulate.csv"),
               ["policy", "mean_discounted_cost", "std_error", "n_episodes",
                "horizon", "truncation_bound", "seed"],
               [(args.policy, summary.mean_discounted_cost, summary.std_error,
                 summary.n_episodes, summary.horizon,
                 summary.truncation_bound, seed)])
    print(f"policy {args.policy}: mean discounted cost "
          f"{summary.mean_discounted_cost:.6f} "
          f"(SE {summary.std_error:.4f}, {episodes} episodes)")
    return EXIT_OK


def _violation_rows(report: StructureReport):
    for v in report.violations:
        yield (v.z, v.z_d, v.e, v.lo[0], v.lo[1], v.hi[0], v.hi[1])


def _cmd_check(args, spec: ExperimentSpec) -> int:
    cfg = spec.base
    kernel = build_kernel(cfg)
    values, policy, _ = value_iteration(cfg, tol=spec.tol,
                                        max_iter=spec.max_iter, kernel=kernel)
    if args.policy is not None:
        # audit an externally supplied policy table instead of the solved one
        policy = _read_policy_csv(args.policy, kernel.space)
    reports = [
        check_threshold_structure(policy, cfg, kernel.space),
        check_gap_monotonicity(values, kernel, cfg),
        check_value_spread_inequality(values, cfg, kernel.space),
    ]
    header = ["z", "z_d", "e", "d0_lo", "d1_lo", "d0_hi", "d1_hi"]
    ok = True
    for report in reports:
        _write_csv(os.path.join(args.out, f"check_{report.name}.csv"),
                   header, _violation_rows(report))
        status = "ok" if report.holds else f"{len(report.violations)} violations"
        print(f"{report.name}: {status}")
        ok &= report.holds
    return EXIT_OK if ok else EXIT_VIOLATION


def _cmd_trace(args, spec: ExperimentSpec) -> int:
    policy = _resolve_policy(args.policy, spec)
    seed = args.seed if args.seed is not None else spec.mc_seed
    horizon = args.horizon or spec.mc_horizon
    trace = simulate_episode(policy, spec.base, spec.s0, horizon, seed)
    direct = direct_aoi_trace(trace)
    rows = []
    consistent = True
    for k, step in enumerate(trace.steps):
        s, a, w, cost = step
        ok = (s.d0, s.d1) == direct[k]
        consistent &= ok
        rows.append((k, s.z, s.z_d, s.e, s.d0, s.d1, a, w.w_s, w.w_e, w.w_z,
                     cost, direct[k][0], direct[k][1], ok))
    _write_csv(os.path.join(args.out, "trace.csv"),
               ["k", "z", "z_d", "e", "d0", "d1", "action", "w_s", "w_e",
                "w_z", "cost", "direct_d0", "direct_d1", "consistent"],
               rows)
    if not consistent:
        print("recursive and direct age counters disagree", file=sys.stderr)
        return EXIT_VIOLATION
    print(f"trace of {horizon} slots written; age counters consistent")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the config file")
    common.add_argument("--out", default=".", help="output directory for CSV files")
    common.add_argument("--seed", type=int, default=None,
                        help="override mc.seed from the config")
    common.add_argument("--threads", type=int, default=0,
                        help="worker processes for sweeps (0 = auto)")
    parser = argparse.ArgumentParser(
        prog="ehaoi",
        description="Solve and analyse the energy-harvesting status-update model.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common],
                   help="run value iteration, write value/policy/report CSVs")
    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="solve over a grid of parameter values")
    p_sweep.add_argument("--axis", action="append", default=[],
                         metavar="NAME=V1,V2,...",
                         help="sweep axis (p_e, p_s, e_max, p01, p10); repeatable")
    p_table = sub.add_parser("policy-table", parents=[common],
                             help="action grid of one (z, z_d) policy slice")
    p_table.add_argument("--z", type=int, required=True, choices=(0, 1))
    p_table.add_argument("--z-d", dest="z_d", type=int, required=True,
                         choices=(0, 1))
    p_table.add_argument("--other-aoi", dest="other_aoi", type=int, default=0,
                         help="fixed age of the state other than z")
    p_sim = sub.add_parser("simulate", parents=[common],
                           help="Monte Carlo estimate of a policy's cost")
    p_sim.add_argument("--policy", required=True,
                       help="optimal | never | always | alarm_only | random:P "
                            "| policy CSV path")
    p_sim.add_argument("--episodes", type=int, default=None)
    p_sim.add_argument("--horizon", type=int, default=None)
    p_check = sub.add_parser("check", parents=[common],
                             help="solve, then verify the structural properties")
    p_check.add_argument("--policy", default=None,
                         help="audit this policy CSV instead of the solved policy")
    p_trace = sub.add_parser("trace", parents=[common],
                             help="single-episode trace with age cross-check")
    p_trace.add_argument("--policy", required=True)
    p_trace.add_argument("--horizon", type=int, default=None)
    return parser


_COMMANDS = {
    "solve": _cmd_solve,
    "sweep": _cmd_sweep,
    "policy-table": _cmd_policy_table,
    "simulate": _cmd_simulate,
    "check": _cmd_check,
    "trace": _cmd_trace,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit status 2 for usage errors; that code is
        # reserved for non-convergence here.
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        spec = load_experiment(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args, spec)
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (ConfigError, RangeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
