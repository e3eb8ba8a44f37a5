"""Command line entry point: ``tubecbf run | verify | export | preset``.

Every command prints a JSON summary on stdout and exits with status 0 only
when all of its checks pass.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .barrier import PairBarrier, lie_stack_obstacle, lie_stack_pair
from .config import dumps_scenario, load_scenario, preset, preset_names, save_scenario
from .errors import TubeCbfError
from .simulator import ScenarioConfig, TrajectoryLog, metrics, run, synthesize_tubes
from .verify import (forward_invariance_report, lie_fd_oracle, rpi_monte_carlo, support_oracle,
                     tighten_bound_check, tube_containment_report)
from .tube import support

__all__ = ["main", "build_parser", "cmd_run", "cmd_verify", "cmd_export", "resolve_scenario"]

TABLE_HEADER = ("t", "agent", "block", "component", "true", "nominal", "input")


def _float(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# commands

def resolve_scenario(scenario: Optional[str] = None, preset_name: Optional[str] = None,
                     seed: Optional[int] = None, ecbf_mode: Optional[str] = None,
                     no_tighten: bool = False, no_disturbance: bool = False,
                     steps: Optional[int] = None) -> ScenarioConfig:
    """Load a scenario file or preset and apply command line overrides."""
    if (scenario is None) == (preset_name is None):
        raise TubeCbfError("give exactly one of --scenario or --preset")
    cfg = load_scenario(scenario) if scenario is not None else preset(preset_name)
    kw = {}
    if seed is not None:
        kw["seed"] = int(seed)
    if ecbf_mode is not None:
        kw["ocp"] = replace(cfg.ocp, ecbf_mode=ecbf_mode)
    if no_tighten:
        kw["tighten"] = False
    if no_disturbance:
        kw["disturbances"] = False
    if steps is not None:
        kw["steps"] = int(steps)
    cfg = replace(cfg, **kw) if kw else cfg
    cfg.validate()
    return cfg


def write_table(log: Optional[TrajectoryLog], path) -> None:
    """Long trajectory table; an empty or missing log gives a header-only file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        if log is None or log.steps == 0:
            return
        for row in log.table():
            w.writerow([_float(row[0]), int(row[1]), int(row[2]), int(row[3]),
                        _float(row[4]), _float(row[5]), _float(row[6])])


def write_metrics(log: TrajectoryLog, path) -> None:
    """Long-format metrics: ``metric, agent, index, value``."""
    m = metrics(log)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "agent", "index", "value"))
        for j, (a, b) in enumerate(log.pairs):
            w.writerow(("min_h_pair", a, b, _float(m.min_h_pair[j])))
        for i in range(m.min_h_obs.shape[0]):
            for o in range(m.min_h_obs.shape[1]):
                w.writerow(("min_h_obstacle", i, o, _float(m.min_h_obs[i, o])))
        for name in ("max_tube_ratio", "formation_mean", "formation_max", "formation_final"):
            for i, v in enumerate(getattr(m, name)):
                w.writerow((name, i, "", _float(v)))
        w.writerow(("infeasible_count", "", "", m.infeasible_count))
        w.writerow(("fallback_count", "", "", m.fallback_count))


def cmd_run(cfg: ScenarioConfig, out_dir: Optional[str] = None) -> dict:
    """Simulate, check safety and containment, and optionally write artifacts."""
    log = run(cfg)
    reports = [forward_invariance_report(log), tube_containment_report(log)]
    summary = {
        "command": "run",
        "scenario": cfg.name,
        "steps": log.steps,
        "metrics": metrics(log).as_dict(),
        "reports": [r.as_dict() for r in reports],
        "digest": log.digest(),
        "passed": all(r.passed for r in reports),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(log, out / "trajectory.csv")
        write_metrics(log, out / "metrics.csv")
        log.save(out / "log.npz")
        save_scenario(cfg, out / "scenario.yaml")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
        summary["out_dir"] = str(out)
    return summary


def cmd_verify(cfg: ScenarioConfig, trials: int = 1000, seed: Optional[int] = None,
               horizon: float = 1.0) -> dict:
    """Run the oracle suites against the scenario's tubes, barriers and drifts."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    tubes = synthesize_tubes(cfg)
    reports = []

    # support function, maximizer-augmented sampling against the closed form
    worst = 0.0
    for i, tb in enumerate(tubes):
        e = tb.ellipsoid
        for _ in range(max(1, trials // len(tubes))):
            g = rng.standard_normal(e.dim)
            exact = support(e, g)
            est = support_oracle(e, g, samples=1000, seed=int(rng.integers(2 ** 31)))
            worst = max(worst, abs(est - exact) / max(abs(exact), 1e-300))
    reports.append(_report_dict("support_oracle", trials, -worst, 1e-12, seed))

    # robust invariance of each tube
    for i, (a, tb) in enumerate(zip(cfg.agents, tubes)):
        r = rpi_monte_carlo(tb, a.drift, None, trials, horizon=horizon,
                            box=a.tube.lipschitz_box or a.state_box, seed=seed + i)
        r.name = f"rpi_monte_carlo[agent {i}]"
        reports.append(r.as_dict())

    # Lie stacks against finite differences along the flow
    n, d = cfg.n, cfg.d
    worst = 0.0
    cases = 0
    pair_b = PairBarrier(cfg.d_min) if cfg.d_min is not None else None
    for _ in range(10):
        i, j = rng.choice(cfg.n_agents, 2, replace=cfg.n_agents < 2)
        xi, xj = rng.uniform(-2, 2, n * d), rng.uniform(-2, 2, n * d)
        uj = rng.uniform(-1, 1, d)
        t = float(rng.uniform(0, 5))
        fi, fj = cfg.agents[i].drift, cfg.agents[j].drift
        checks = []
        if pair_b is not None and i != j:
            st = lie_stack_pair(pair_b, xi, xj, fi, fj, uj, t)
            checks.append((st, lambda q: lie_fd_oracle(pair_b, (xi, xj), (fi, fj), q, t=t,
                                                       u_other=uj)))
        for ob in cfg.obstacles:
            st = lie_stack_obstacle(ob, xi, fi, t)
            checks.append((st, lambda q, ob=ob: lie_fd_oracle(ob, xi, fi, q, t=t)))
        for st, fd in checks:
            for q in range(1, n + 1):
                ref = fd(q)
                worst = max(worst, abs(float(st.values[q]) - ref) / max(1.0, abs(ref)))
                cases += 1
    reports.append(_report_dict("lie_fd_oracle", cases, -worst, 1e-3, seed))

    # tightening soundness
    if pair_b is not None and cfg.n_agents > 1:
        r = tighten_bound_check(pair_b, [tubes[0], tubes[1]], samples=10 * trials, seed=seed, d=d)
        r.name = "tighten_bound_check[pair]"
        reports.append(r.as_dict())
    for o, ob in enumerate(cfg.obstacles):
        r = tighten_bound_check(ob, tubes[0], samples=10 * trials, seed=seed + o)
        r.name = f"tighten_bound_check[obstacle {o}]"
        reports.append(r.as_dict())
    return {"command": "verify", "scenario": cfg.name, "reports": reports,
            "passed": all(r["passed"] for r in reports)}


def _report_dict(name, trials, worst, tol, seed) -> dict:
    return {"name": name, "trials": int(trials), "worst": float(worst), "tolerance": tol,
            "passed": bool(worst >= -tol), "seed": seed, "details": {}}


def cmd_export(log_path: str, out: str, fmt: str = "csv") -> dict:
    """Convert a saved ``log.npz`` into a trajectory table (csv) or JSON."""
    log = TrajectoryLog.load(log_path)
    if fmt == "csv":
        write_table(log, out)
    elif fmt == "json":
        tab = log.table() if log.steps else np.zeros((0, 7))
        Path(out).write_text(json.dumps({"columns": list(TABLE_HEADER), "rows": tab.tolist()}))
    else:
        raise TubeCbfError(f"unknown export format {fmt!r}")
    return {"command": "export", "rows": int(log.steps and log.table().shape[0]), "out": out,
            "passed": True}


# --------------------------------------------------------------------------
# argument parsing

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def _scenario_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", metavar="PATH", help="scenario YAML file")
    src.add_argument("--preset", metavar="NAME", help=f"built-in preset {preset_names()}")
    p.add_argument("--seed", type=int)
    p.add_argument("--ecbf-mode", choices=("all-nodes", "first-node"))
    p.add_argument("--no-tighten", action="store_true", help="force rho = 0 (ablation)")
    p.add_argument("--no-disturbance", action="store_true", help="set w = 0")
    p.add_argument("--steps", type=int, help="override the number of sampling periods")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubecbf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario")
    _scenario_args(p)
    p.add_argument("--out", metavar="DIR", help="directory for tables, log and config echo")

    p = sub.add_parser("verify", help="run the oracle suites")
    _scenario_args(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--horizon", type=float, default=1.0, help="RPI trial length in seconds")

    p = sub.add_parser("export", help="convert a saved log")
    p.add_argument("log", help="log.npz written by run --out")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("preset", help="list or show presets")
    psub = p.add_subparsers(dest="action", required=True)
    psub.add_parser("list")
    show = psub.add_parser("show")
    show.add_argument("name")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    warnings.filterwarnings("ignore", module="cvxpy")
    try:
        if args.command == "preset":
            if args.action == "list":
                summary = {"command": "preset list", "presets": preset_names(), "passed": True}
            else:
                sys.stdout.write(dumps_scenario(preset(args.name)))
                return 0
        elif args.command == "export":
            summary = cmd_export(args.log, args.out, args.format)
        else:
            cfg = resolve_scenario(args.scenario, args.preset, args.seed, args.ecbf_mode,
                                   args.no_tighten, args.no_disturbance, args.steps)
            if args.command == "run":
                summary = cmd_run(cfg, args.out)
            else:
                summary = cmd_verify(cfg, args.trials, args.seed, args.horizon)
    except (TubeCbfError, OSError) as exc:
        summary = {"command": args.command, "error": f"{type(exc).__name__}: {exc}",
                   "passed": False}
    print(json.dumps(summary, indent=2, default=_json_default))
    return 0 if summary.get("passed") else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
