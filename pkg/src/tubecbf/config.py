"""Scenario files (YAML) and built-in presets.

Keys carry their units (``ts_seconds``, ``center_m``...).  Unknown keys are
rejected, parse errors report the offending line, and floats are written with
``repr`` precision so ``load(save(cfg))`` reproduces ``cfg`` exactly.
"""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .barrier import EcbfGains, ObstacleBarrier
from .errors import ConfigurationError
from .model import DisturbanceSignal, DriftSpec
from .planner import OcpConfig, SolverOptions
from .simulator import AgentConfig, LeaderConfig, ScenarioConfig, TubeSynthesis
from .topology import FormationSpec, Graph

__all__ = ["PRESETS", "preset", "preset_names", "load_scenario", "loads_scenario",
           "save_scenario", "dumps_scenario", "to_dict", "from_dict"]


# --------------------------------------------------------------------------
# schema

_BOX = {"lower": None, "upper": None}
_SCHEMA: dict[str, Any] = {
    "name": None,
    "dimensions": {"n": None, "d": None},
    "leader": {"drift": {"kind": None, "params": "*"}, "initial_state": None},
    "agents": [{
        "drift": {"kind": None, "params": "*"},
        "disturbance": {"amplitude": None, "frequency_rad_s": None, "phase_rad": None},
        "initial_state": None,
        "initial_nominal_state": None,
        "state_box": _BOX,
        "tube": {
            "certificate": None, "poles": None, "gain_vector": None, "gain_convention": None,
            "q_scale": None, "lipschitz_box": _BOX, "lipschitz_samples": None,
            "lipschitz_inflation": None, "lipschitz": None, "rho_inflation": None,
        },
    }],
    "graph": {"undirected": None, "adjacency": None, "leader_weights": None},
    "formation": {"offsets_m": None, "leader_offsets_m": None},
    "barriers": {
        "d_min_m": None,
        "ecbf_gains": None,
        "activation_radius_m": None,
        "obstacles": [{"center_m": None, "radius_m": None, "inflation_m": None}],
    },
    "stability": {"lambda": None, "nu": None},
    "planner": {
        "horizon_steps": None, "ts_seconds": None, "q_r": None, "p_r": None, "R": None,
        "R_du": None, "state_box": _BOX, "input_box": _BOX, "ecbf_mode": None,
        "activation_margin_m": None,
        "solver": {"max_iter": None, "constraint_tol": None, "step_tol": None,
                   "decrease_tol": None, "armijo": None, "backtrack": None, "min_step": None},
    },
    "simulation": {"steps": None, "substeps": None, "seed": None, "tighten": None,
                   "disturbances": None, "reset_nominal": None},
}
_REQUIRED = ["name", "dimensions", "leader", "agents", "graph", "formation", "barriers",
             "stability", "planner"]


def _check_keys(data, schema, path="") -> None:
    if schema is None or schema == "*":
        return
    if isinstance(schema, list):
        if not isinstance(data, list):
            raise ConfigurationError(f"{path or 'root'}: expected a list")
        for k, item in enumerate(data):
            _check_keys(item, schema[0], f"{path}[{k}]")
        return
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'root'}: expected a mapping")
    for key, val in data.items():
        if key not in schema:
            raise ConfigurationError(f"unknown key {path + '.' if path else ''}{key}")
        if val is not None:
            _check_keys(val, schema[key], f"{path + '.' if path else ''}{key}")


# --------------------------------------------------------------------------
# dict <-> objects

def _arr(x, dtype=float):
    return None if x is None else np.asarray(x, dtype=dtype)


def _box(b, size: int):
    if b is None:
        return None
    lo, hi = np.asarray(b["lower"], dtype=float), np.asarray(b["upper"], dtype=float)
    if lo.size != size or hi.size != size:
        raise ConfigurationError(f"box bounds need {size} entries")
    return lo, hi


def _blocks_to_flat(v, n, d, what):
    a = np.asarray(v, dtype=float)
    if a.shape == (n, d):
        return a.reshape(-1)
    if a.shape == (n * d,):
        return a
    raise ConfigurationError(f"{what}: expected {n} blocks of {d} values")


def from_dict(data: dict) -> ScenarioConfig:
    """Build and validate a scenario from plain data."""
    if not isinstance(data, dict):
        raise ConfigurationError("scenario must be a mapping")
    _check_keys(data, _SCHEMA)
    for key in _REQUIRED:
        if key not in data:
            raise ConfigurationError(f"missing required key {key}")
    n, d = int(data["dimensions"]["n"]), int(data["dimensions"]["d"])
    m = n * d

    def drift(spec):
        return DriftSpec(spec["kind"], dict(spec.get("params") or {}), n, d)

    lead = data["leader"]
    leader = LeaderConfig(drift(lead["drift"]),
                          _blocks_to_flat(lead["initial_state"], n, d, "leader.initial_state"))
    agents = []
    for k, a in enumerate(data["agents"]):
        ds = a["disturbance"]
        tb = a["tube"]
        tube = TubeSynthesis(
            certificate=tb.get("certificate", "s-procedure"),
            poles=None if tb.get("poles") is None else tuple(tb["poles"]),
            gain_vector=None if tb.get("gain_vector") is None else tuple(tb["gain_vector"]),
            gain_convention=tb.get("gain_convention", "axis-major"),
            q_scale=float(tb.get("q_scale", 1.0)),
            lipschitz_box=_box(tb.get("lipschitz_box"), m),
            lipschitz_samples=int(tb.get("lipschitz_samples", 4000)),
            lipschitz_inflation=float(tb.get("lipschitz_inflation", 1.2)),
            lipschitz=None if tb.get("lipschitz") is None else float(tb["lipschitz"]),
            rho_inflation=float(tb.get("rho_inflation", 1.0)))
        x0 = _blocks_to_flat(a["initial_state"], n, d, f"agents[{k}].initial_state")
        xb = a.get("initial_nominal_state")
        agents.append(AgentConfig(
            drift(a["drift"]),
            DisturbanceSignal(ds["amplitude"], ds["frequency_rad_s"], ds["phase_rad"]),
            x0, tube,
            None if xb is None else _blocks_to_flat(xb, n, d, f"agents[{k}].initial_nominal_state"),
            _box(a.get("state_box"), m)))
    N = len(agents)
    g = data["graph"]
    graph = Graph(np.asarray(g["adjacency"], dtype=float).reshape(N, N),
                  np.asarray(g["leader_weights"], dtype=float), bool(g.get("undirected", True)))
    f = data["formation"]
    off = np.asarray(f["offsets_m"], dtype=float)
    if off.ndim == 2:
        full = np.zeros((N, n, d))
        full[:, 0, :] = off
        off = full
    lead_off = f.get("leader_offsets_m")
    if lead_off is not None:
        lead_off = np.asarray(lead_off, dtype=float)
        if lead_off.ndim == 1:
            tmp = np.zeros((n, d))
            tmp[0] = lead_off
            lead_off = tmp
    formation = FormationSpec(off, lead_off)
    b = data["barriers"]
    obstacles = tuple(ObstacleBarrier(tuple(o["center_m"]), float(o["radius_m"]),
                                      float(o.get("inflation_m", 0.0)))
                      for o in (b.get("obstacles") or []))
    pl = data["planner"]
    sol = pl.get("solver") or {}
    ocp = OcpConfig(
        H=int(pl.get("horizon_steps", 5)), ts=float(pl.get("ts_seconds", 0.1)),
        q_r=float(pl.get("q_r", 50.0)), p_r=float(pl.get("p_r", 10.0)),
        R=np.asarray(pl.get("R", 0.01), dtype=float), R_du=np.asarray(pl.get("R_du", 0.001), float),
        state_box=_box(pl.get("state_box"), m), input_box=_box(pl.get("input_box"), d),
        solver=SolverOptions(**{k: v for k, v in sol.items()}),
        ecbf_mode=pl.get("ecbf_mode", "all-nodes"),
        activation_margin=float(pl.get("activation_margin_m", 3.0)))
    st = data["stability"]
    sim = data.get("simulation") or {}
    cfg = ScenarioConfig(
        name=str(data["name"]), agents=tuple(agents), leader=leader, graph=graph,
        formation=formation,
        d_min=None if b.get("d_min_m") is None else float(b["d_min_m"]),
        obstacles=obstacles, kappa=EcbfGains(tuple(b["ecbf_gains"])),
        lam=tuple(float(v) for v in st["lambda"]), nu=tuple(float(v) for v in st["nu"]),
        ocp=ocp, steps=int(sim.get("steps", 300)), substeps=int(sim.get("substeps", 10)),
        seed=int(sim.get("seed", 0)), tighten=bool(sim.get("tighten", True)),
        disturbances=bool(sim.get("disturbances", True)),
        reset_nominal=bool(sim.get("reset_nominal", False)),
        activation_radius=(None if b.get("activation_radius_m") is None
                           else float(b["activation_radius_m"])))
    cfg.validate()
    return cfg


def _plain(x):
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def _box_out(b):
    return None if b is None else {"lower": _plain(b[0]), "upper": _plain(b[1])}


def to_dict(cfg: ScenarioConfig) -> dict:
    """Plain-data form of a scenario (inverse of :func:`from_dict`)."""
    n, d = cfg.n, cfg.d
    agents = []
    for a in cfg.agents:
        t = a.tube
        agents.append({
            "drift": {"kind": a.drift.kind, "params": _plain(dict(a.drift.params))},
            "disturbance": {"amplitude": list(a.disturbance.amplitude),
                            "frequency_rad_s": list(a.disturbance.frequency),
                            "phase_rad": list(a.disturbance.phase)},
            "initial_state": _plain(a.x0.reshape(n, d)),
            "initial_nominal_state": _plain(a.x_bar0.reshape(n, d)),
            "state_box": _box_out(a.state_box),
            "tube": {
                "certificate": t.certificate,
                "poles": None if t.poles is None else _plain(list(t.poles)),
                "gain_vector": None if t.gain_vector is None else _plain(list(t.gain_vector)),
                "gain_convention": t.gain_convention, "q_scale": t.q_scale,
                "lipschitz_box": _box_out(t.lipschitz_box),
                "lipschitz_samples": t.lipschitz_samples,
                "lipschitz_inflation": t.lipschitz_inflation, "lipschitz": t.lipschitz,
                "rho_inflation": t.rho_inflation,
            },
        })
    o = cfg.ocp
    s = o.solver
    return _plain({
        "name": cfg.name,
        "dimensions": {"n": n, "d": d},
        "leader": {"drift": {"kind": cfg.leader.drift.kind,
                             "params": dict(cfg.leader.drift.params)},
                   "initial_state": cfg.leader.x0.reshape(n, d)},
        "agents": agents,
        "graph": {"undirected": cfg.graph.undirected, "adjacency": cfg.graph.weights,
                  "leader_weights": cfg.graph.leader_weights},
        "formation": {"offsets_m": cfg.formation.offsets,
                      "leader_offsets_m": cfg.formation.leader_offsets},
        "barriers": {
            "d_min_m": cfg.d_min, "ecbf_gains": list(cfg.kappa.kappa),
            "activation_radius_m": cfg.activation_radius,
            "obstacles": [{"center_m": list(ob.center), "radius_m": ob.radius,
                           "inflation_m": ob.inflation} for ob in cfg.obstacles],
        },
        "stability": {"lambda": list(cfg.lam), "nu": list(cfg.nu)},
        "planner": {
            "horizon_steps": o.H, "ts_seconds": o.ts, "q_r": o.q_r, "p_r": o.p_r,
            "R": np.asarray(o.R, dtype=float), "R_du": np.asarray(o.R_du, dtype=float),
            "state_box": _box_out(o.state_box), "input_box": _box_out(o.input_box),
            "ecbf_mode": o.ecbf_mode, "activation_margin_m": o.activation_margin,
            "solver": {"max_iter": s.max_iter, "constraint_tol": s.constraint_tol,
                       "step_tol": s.step_tol, "decrease_tol": s.decrease_tol, "armijo": s.armijo, "backtrack": s.backtrack,
                       "min_step": s.min_step},
        },
        "simulation": {"steps": cfg.steps, "substeps": cfg.substeps, "seed": cfg.seed,
                       "tighten": cfg.tighten, "disturbances": cfg.disturbances,
                       "reset_nominal": cfg.reset_nominal},
    })


def loads_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    """Parse YAML text into a validated scenario."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"{source}: parse error{where}: {exc}") from exc
    if data is None:
        raise ConfigurationError(f"{source}: parse error: file is empty")
    return from_dict(data)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"scenario file {path} does not exist")
    return loads_scenario(path.read_text(), str(path))


def dumps_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None, width=100)


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(dumps_scenario(cfg))


# --------------------------------------------------------------------------
# presets

_PI = float(np.pi)
_FOLLOWERS = [
    # kind, amplitudes, frequencies, phases, start, position box (x, y), triple pole
    ("follower1", (0.20, 0.15), (0.9, 1.1), (0.0, _PI / 7), (1.0, -0.5),
     ((-11.0, 2.5), (-1.5, 3.5)), -135.0),
    ("follower2", (0.18, 0.18), (1.1, 0.8), (0.3, -_PI / 5), (-0.8, 0.4),
     ((-8.0, 2.0), (-1.5, 3.5)), -110.0),
    ("follower3", (0.18, 0.18), (1.1, 0.8), (0.3, -_PI / 5), (0.6, 0.6),
     ((-2.5, 4.5), (-1.5, 3.5)), -10.0),
    ("follower4", (0.12, 0.12), (0.6, 0.6), (0.0, _PI / 2), (-0.5, -0.7),
     ((-2.0, 10.5), (-2.0, 3.5)), -200.0),
    ("follower5", (0.22, 0.20), (0.9, 1.0), (_PI / 8, 0.0), (0.7, 0.0),
     ((-1.5, 13.5), (-1.5, 3.5)), -250.0),
]
_OFFSETS = [(-9.0, 2.0), (-6.0, 2.0), (0.0, 2.0), (6.0, 2.0), (9.0, 2.0)]
# Flat companion gains quoted for u = u_bar + K_p z, leading sign removed.
REFERENCE_GAIN_VECTOR = (15.0, 4.0, 15.0, 8.0, 6.0, 8.0)


def _five_agent(gains: str = "poles") -> ScenarioConfig:
    n, d, N = 3, 2, 5
    vel_acc = 10.0
    input_limit = 3000.0
    agents = []
    for kind, amp, freq, ph, start, (bx, by), pole in _FOLLOWERS:
        lo = np.array([bx[0], by[0]] + [-vel_acc] * 4)
        hi = np.array([bx[1], by[1]] + [vel_acc] * 4)
        if gains == "poles":
            tube = TubeSynthesis("s-procedure", poles=(pole, pole, pole), lipschitz_box=(lo, hi))
        else:
            tube = TubeSynthesis("closed-form", gain_vector=REFERENCE_GAIN_VECTOR,
                                 lipschitz_box=(lo, hi))
        x0 = np.zeros(n * d)
        x0[:d] = start
        agents.append(AgentConfig(DriftSpec(kind, {}, n, d), DisturbanceSignal(amp, freq, ph),
                                  x0, tube, None, (lo, hi)))
    x_lead = np.zeros(n * d)
    x_lead[0] = 3.0
    full = np.ones((N, N)) - np.eye(N)
    return ScenarioConfig(
        name="paper-5agent" if gains == "poles" else "paper-5agent-gains",
        agents=tuple(agents),
        leader=LeaderConfig(DriftSpec("leader", {}, n, d), x_lead),
        graph=Graph(full, np.ones(N), True),
        formation=FormationSpec.from_positions(_OFFSETS, n),
        d_min=0.5,
        obstacles=(ObstacleBarrier((1.0, 1.0), 0.35, 0.15),
                   ObstacleBarrier((-1.5, 0.5), 0.50, 0.15)),
        kappa=EcbfGains((30.0, 38.0, 3.0)),
        lam=(100.0, 50.0, 1.0), nu=(1.0, 1.0),
        ocp=OcpConfig(H=5, ts=0.1, q_r=50.0, p_r=10.0, R=0.01, R_du=0.001,
                      state_box=(np.array([-50.0, -50.0] + [-vel_acc] * 4),
                                 np.array([50.0, 50.0] + [vel_acc] * 4)),
                      input_box=(np.full(d, -input_limit), np.full(d, input_limit))),
        steps=300, substeps=20, seed=0)


def _two_agent() -> ScenarioConfig:
    """Small linear scenario: two followers pass a single obstacle."""
    n, d = 3, 2
    lin = DriftSpec("custom-polynomial", {"coefficients": [[0.0, -0.5], [0.0, -1.0], [0.0, -2.0]]},
                    n, d)
    agents = []
    for start in ((-2.0, 0.2), (-2.0, -1.0)):
        x0 = np.zeros(n * d)
        x0[:d] = start
        agents.append(AgentConfig(lin, DisturbanceSignal((0.01, 0.01), (1.0, 1.3), (0.0, 0.5)),
                                  x0, TubeSynthesis("closed-form", poles=(-1.5, -1.5, -1.5),
                                                    lipschitz=0.0)))
    return ScenarioConfig(
        name="two-agent", agents=tuple(agents),
        leader=LeaderConfig(DriftSpec("custom-polynomial",
                                      {"coefficients": [[0.0, -0.5], [0.0, -1.0], [0.0, -2.0]]},
                                      n, d), np.array([2.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
        graph=Graph(np.array([[0.0, 1.0], [1.0, 0.0]]), np.ones(2), True),
        formation=FormationSpec.from_positions([(0.0, 0.6), (0.0, -0.6)], n),
        d_min=0.4,
        obstacles=(ObstacleBarrier((0.0, -0.3), 0.3, 0.1),),
        kappa=EcbfGains((30.0, 38.0, 3.0)),
        lam=(100.0, 50.0, 1.0), nu=(1.0, 1.0),
        ocp=OcpConfig(H=5, ts=0.1, state_box=(np.full(6, -50.0), np.full(6, 50.0)),
                      input_box=(np.full(d, -200.0), np.full(d, 200.0))),
        steps=100, substeps=10, seed=0)


PRESETS = {
    "paper-5agent": lambda: _five_agent("poles"),
    "paper-5agent-gains": lambda: _five_agent("vector"),
    "two-agent": _two_agent,
}


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {preset_names()}")
    cfg = PRESETS[name]()
    cfg.validate()
    return cfg
