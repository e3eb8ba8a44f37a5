"""Closed-loop simulation of the leader-follower team under tube MPC.

Every sampling instant the followers broadcast their shifted previous plans,
solve their own OCPs against those frozen plans, and apply
``u = u_bar - K (x - x_bar)`` to the disturbed plant.  The true state ``x`` and
the nominal state ``x_bar`` are integrated in lockstep with the same RK4
substeps, so with ``w = 0`` and ``x(0) = x_bar(0)`` the two stay bitwise equal.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .barrier import EcbfGains, ObstacleBarrier, PairBarrier, lie_stack_obstacle, lie_stack_pair
from .errors import ConfigurationError, NumericError
from .model import (DisturbanceSignal, DriftSpec, disturbance_bound, disturbance_eval,
                    drift_eval, input_matrix, lipschitz_estimate, rk4)
from .planner import (NeighborInfo, OcpConfig, Plan, build_ocp, rk4_nominal, shift_plan,
                      solve_ocp)
from .topology import FormationSpec, Graph, stability_error
from .tube import (TubeParams, ancillary_gains, gains_from_vector, sprocedure_tube,
                   synthesize_tube)

__all__ = [
    "TubeSynthesis",
    "AgentConfig",
    "LeaderConfig",
    "ScenarioConfig",
    "TrajectoryLog",
    "SafetyMetrics",
    "ancillary_input",
    "synthesize_tubes",
    "leader_prediction",
    "run",
    "metrics",
]


@dataclass(frozen=True)
class TubeSynthesis:
    """How an agent's tube is built.

    Exactly one of ``poles`` (per-axis real poles) or ``gain_vector`` (flat
    companion gains read with ``gain_convention``) must be given.  ``lipschitz``
    overrides the sampled estimate over ``lipschitz_box``.
    """

    certificate: str = "s-procedure"
    poles: Optional[tuple] = None
    gain_vector: Optional[tuple] = None
    gain_convention: str = "axis-major"
    q_scale: float = 1.0
    lipschitz_box: Optional[tuple] = None
    lipschitz_samples: int = 4000
    lipschitz_inflation: float = 1.2
    lipschitz: Optional[float] = None
    rho_inflation: float = 1.0

    def __post_init__(self):
        if (self.poles is None) == (self.gain_vector is None):
            raise ConfigurationError("give exactly one of poles or gain_vector")
        if self.certificate not in ("closed-form", "s-procedure"):
            raise ConfigurationError(f"unknown certificate {self.certificate!r}")
        if self.lipschitz is None and self.lipschitz_box is None:
            raise ConfigurationError("need a Lipschitz box or an explicit Lipschitz constant")
        if self.rho_inflation < 1:
            raise ConfigurationError("rho_inflation must be >= 1")
        if not self.q_scale > 0:
            raise ConfigurationError("q_scale must be positive")


@dataclass(frozen=True)
class AgentConfig:
    drift: DriftSpec
    disturbance: DisturbanceSignal
    x0: np.ndarray
    tube: TubeSynthesis
    x_bar0: Optional[np.ndarray] = None
    state_box: Optional[tuple] = None

    def __post_init__(self):
        m = self.drift.n * self.drift.d
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.size != m:
            raise ConfigurationError(f"initial state needs {m} entries")
        xb = x0.copy() if self.x_bar0 is None else np.array(self.x_bar0, dtype=float).reshape(-1)
        if xb.size != m:
            raise ConfigurationError(f"initial nominal state needs {m} entries")
        if self.disturbance.d != self.drift.d:
            raise ConfigurationError("disturbance dimension does not match d")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x_bar0", xb)


@dataclass(frozen=True)
class LeaderConfig:
    drift: DriftSpec
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", np.array(self.x0, dtype=float).reshape(-1))


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a closed-loop run needs."""

    name: str
    agents: tuple
    leader: LeaderConfig
    graph: Graph
    formation: FormationSpec
    d_min: Optional[float]
    obstacles: tuple
    kappa: EcbfGains
    lam: tuple
    nu: tuple
    ocp: OcpConfig
    steps: int = 300
    substeps: int = 10
    seed: int = 0
    tighten: bool = True
    disturbances: bool = True
    reset_nominal: bool = False
    activation_radius: Optional[float] = None

    @property
    def n(self) -> int:
        return self.leader.drift.n

    @property
    def d(self) -> int:
        return self.leader.drift.d

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def validate(self) -> None:
        n, d, N = self.n, self.d, self.n_agents
        for i, a in enumerate(self.agents):
            if (a.drift.n, a.drift.d) != (n, d):
                raise ConfigurationError(f"agent {i}: (n, d) differs from the leader's")
        if self.graph.n_agents != N:
            raise ConfigurationError("graph size does not match the number of agents")
        if self.formation.shape != (N, n, d):
            raise ConfigurationError(f"formation offsets must have shape ({N}, {n}, {d})")
        if self.kappa.r != n:
            raise ConfigurationError(f"need {n} eCBF gains (relative degree {n})")
        if len(self.lam) != n or len(self.nu) != 2:
            raise ConfigurationError(f"need {n} lambda values and two nu values")
        for ob in self.obstacles:
            if len(ob.center) != d:
                raise ConfigurationError("obstacle centre dimension does not match d")
        if self.steps < 1 or self.substeps < 1:
            raise ConfigurationError("steps and substeps must be positive")


# --------------------------------------------------------------------------
# tubes

_TUBE_CACHE: dict = {}


def _agent_gain(a: AgentConfig, n: int, d: int) -> np.ndarray:
    ts = a.tube
    if ts.poles is not None:
        return ancillary_gains(ts.poles, n, d)
    return gains_from_vector(ts.gain_vector, n, d, ts.gain_convention)


def _agent_lipschitz(a: AgentConfig, seed: int) -> float:
    ts = a.tube
    if ts.lipschitz is not None:
        return float(ts.lipschitz)
    return lipschitz_estimate(a.drift, ts.lipschitz_box, ts.lipschitz_samples,
                              ts.lipschitz_inflation, seed=seed)


def synthesize_tubes(cfg: ScenarioConfig) -> list[TubeParams]:
    """Gains, Lipschitz bounds and certified tubes of every agent (cached)."""
    n, d = cfg.n, cfg.d
    out = []
    for i, a in enumerate(cfg.agents):
        K = _agent_gain(a, n, d)
        L = _agent_lipschitz(a, cfg.seed + i)
        w_bar = disturbance_bound(a.disturbance)
        key = (a.tube.certificate, K.tobytes(), L, w_bar, a.tube.q_scale)
        if key not in _TUBE_CACHE:
            if a.tube.certificate == "closed-form":
                tube = synthesize_tube(K, n, d, L, w_bar, a.tube.q_scale * np.eye(n * d))
            else:
                tube = sprocedure_tube(K, n, d, L, w_bar)
            tube.validate(n, d)
            _TUBE_CACHE[key] = tube
        tube = _TUBE_CACHE[key]
        if a.tube.rho_inflation != 1.0:
            tube = tube.with_rho(tube.rho * a.tube.rho_inflation)
        out.append(tube)
    return out


# --------------------------------------------------------------------------
# log

@dataclass
class TrajectoryLog:
    """Per-step record of a run (arrays indexed by step first).

    ``*_min``/``V_max`` entries cover every RK4 substep of the interval
    ``[t_k, t_{k+1}]``, endpoints included.
    """

    t: np.ndarray
    x: np.ndarray
    x_bar: np.ndarray
    leader: np.ndarray
    u_bar: np.ndarray
    u: np.ndarray
    V: np.ndarray
    V_max: np.ndarray
    rho: np.ndarray
    h_pair: np.ndarray
    h_pair_min: np.ndarray
    h_obs: np.ndarray
    h_obs_min: np.ndarray
    stability_error: np.ndarray
    formation_error: np.ndarray
    status: np.ndarray
    iterations: np.ndarray
    fallback: np.ndarray
    max_violation: np.ndarray
    pairs: list
    initial_pair_stacks: np.ndarray
    initial_obstacle_stacks: np.ndarray
    final_x: Optional[np.ndarray] = None
    final_x_bar: Optional[np.ndarray] = None
    solve_seconds: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return int(self.t.size)

    def slice(self, start: int, stop: int) -> "TrajectoryLog":
        """Rows ``start:stop`` (initial stacks and finals are kept as they are)."""
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if name in ("pairs", "rho", "initial_pair_stacks", "initial_obstacle_stacks",
                        "final_x", "final_x_bar"):
                kw[name] = val
            elif isinstance(val, np.ndarray):
                kw[name] = val[start:stop]
            else:
                kw[name] = val
        return TrajectoryLog(**kw)

    def table(self) -> np.ndarray:
        """Long table rows ``(t, agent, block, component, true, nominal, input)``.

        Agent ``-1`` is the leader (its input column is zero).  The input column
        repeats the applied ``u`` on every block of the agent.
        """
        K, N, m = self.x.shape
        d = self.u.shape[-1]
        n = m // d
        rows = []
        for k in range(K):
            for i in range(-1, N):
                for p in range(n):
                    for c in range(d):
                        if i < 0:
                            xv = self.leader[k, p * d + c]
                            rows.append((self.t[k], i, p, c, xv, xv, 0.0))
                        else:
                            rows.append((self.t[k], i, p, c, self.x[k, i, p * d + c],
                                         self.x_bar[k, i, p * d + c], self.u[k, i, c]))
        return np.array(rows, dtype=float).reshape(-1, 7)

    def digest(self) -> str:
        """SHA-256 over the trajectory table (bitwise determinism check)."""
        return hashlib.sha256(np.ascontiguousarray(self.table()).tobytes()).hexdigest()

    def save(self, path) -> None:
        """Write every field to a ``.npz`` archive."""
        data = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if val is None:
                continue
            if name == "status":
                val = np.asarray(val, dtype=str)
            elif name == "pairs":
                val = np.asarray(val, dtype=int).reshape(-1, 2)
            data[name] = val
        np.savez(path, **data)

    @classmethod
    def load(cls, path) -> "TrajectoryLog":
        with np.load(path, allow_pickle=False) as f:
            kw = {k: f[k] for k in f.files}
        kw["status"] = kw["status"].astype(object)
        kw["pairs"] = [tuple(int(v) for v in p) for p in kw["pairs"]]
        return cls(**kw)


@dataclass
class SafetyMetrics:
    min_h_pair: np.ndarray
    min_h_obs: np.ndarray
    max_tube_ratio: np.ndarray
    formation_mean: np.ndarray
    formation_max: np.ndarray
    formation_final: np.ndarray
    infeasible_count: int
    fallback_count: int

    @property
    def min_h(self) -> float:
        vals = [np.min(self.min_h_pair, initial=np.inf), np.min(self.min_h_obs, initial=np.inf)]
        return float(min(vals))

    def as_dict(self) -> dict:
        return {
            "min_h": self.min_h,
            "min_h_pair": self.min_h_pair.tolist(),
            "min_h_obs": self.min_h_obs.tolist(),
            "max_tube_ratio": self.max_tube_ratio.tolist(),
            "formation_mean": self.formation_mean.tolist(),
            "formation_max": self.formation_max.tolist(),
            "formation_final": self.formation_final.tolist(),
            "infeasible_count": int(self.infeasible_count),
            "fallback_count": int(self.fallback_count),
        }


def _tube_ratio(V, rho):
    rho2 = np.asarray(rho) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rho2 > 0, V / np.where(rho2 > 0, rho2, 1.0), np.where(V > 0, np.inf, 0.0))
    return r


def metrics(log: TrajectoryLog) -> SafetyMetrics:
    """Exact aggregates over a nonempty log."""
    if log.steps == 0:
        raise ConfigurationError("empty log")
    hp = np.minimum(log.h_pair, log.h_pair_min).min(axis=0) if log.h_pair.size else np.zeros(0)
    ho = (np.minimum(log.h_obs, log.h_obs_min).min(axis=0) if log.h_obs.size
          else np.zeros(log.h_obs.shape[1:]))
    ratio = _tube_ratio(np.maximum(log.V, log.V_max), log.rho).max(axis=0)
    fe = log.formation_error
    return SafetyMetrics(hp, ho, ratio, fe.mean(axis=0), fe.max(axis=0), fe[-1],
                         int(np.sum(log.status == "infeasible")), int(np.sum(log.fallback)))


# --------------------------------------------------------------------------
# loop

def ancillary_input(u_bar, x, x_bar, K):
    """``u = u_bar - K (x - x_bar)``."""
    return np.asarray(u_bar) - np.asarray(K) @ (np.asarray(x) - np.asarray(x_bar))


def leader_prediction(cfg: ScenarioConfig, x0, t: float) -> Plan:
    """Leader states over the horizon by RK4 steps of length ``T_s``."""
    H, ts, d = cfg.ocp.H, cfg.ocp.ts, cfg.d
    X = [np.asarray(x0, dtype=float)]
    for k in range(H):
        X.append(rk4_nominal(cfg.leader.drift, X[-1], np.zeros(d), t + k * ts, ts))
    return Plan(np.array(X), np.zeros((H, d)), t, ts)


def _barrier_values(cfg, pairs, pair_b, X):
    d = cfg.d
    P = X[:, :d]
    hp = np.array([pair_b.value(P[i], P[j]) for i, j in pairs]) if pairs else np.zeros(0)
    ho = np.array([[ob.value(P[i]) for ob in cfg.obstacles] for i in range(len(X))])
    return hp, ho.reshape(len(X), len(cfg.obstacles))


def _formation_error(cfg, X, x0):
    d = cfg.d
    f = cfg.formation
    target = x0[:d] - f.leader_offsets[0] + f.offsets[:, 0, :]
    return np.linalg.norm(X[:, :d] - target, axis=1)


def _all_pairs(cfg) -> list:
    return list(combinations(range(cfg.n_agents), 2))


def run(cfg: ScenarioConfig, tubes: Optional[Sequence[TubeParams]] = None,
        record_time: bool = False) -> TrajectoryLog:
    """Simulate ``cfg.steps`` sampling periods; deterministic in ``cfg``."""
    import time as _time

    cfg.validate()
    N, n, d = cfg.n_agents, cfg.n, cfg.d
    m = n * d
    H, ts, sub = cfg.ocp.H, cfg.ocp.ts, cfg.substeps
    tubes = list(synthesize_tubes(cfg) if tubes is None else tubes)
    if not cfg.tighten:
        tubes = [tb.with_rho(0.0) for tb in tubes]
    rho = np.array([tb.rho for tb in tubes])
    Ks = [tb.K for tb in tubes]
    drifts = [a.drift for a in cfg.agents]
    dist = [a.disturbance if cfg.disturbances else a.disturbance.scaled(0.0) for a in cfg.agents]
    pair_b = PairBarrier(cfg.d_min) if cfg.d_min is not None else None
    pairs = _all_pairs(cfg) if pair_b is not None else []
    G = input_matrix(n, d)

    x = np.array([a.x0 for a in cfg.agents])
    xb = np.array([a.x_bar0 for a in cfg.agents])
    for i, tb in enumerate(tubes):
        z0 = x[i] - xb[i]
        if float(z0 @ tb.P @ z0) > tb.rho ** 2 * (1 + 1e-12):
            raise ConfigurationError(f"agent {i}: initial error lies outside its tube")
    x0 = cfg.leader.x0.copy()

    # hypothesis data at t0 (true states, no inputs)
    init_pair = np.array([np.array(lie_stack_pair(pair_b, x[i], x[j], drifts[i], drifts[j],
                                                  None, 0.0).values) for i, j in pairs]
                         ).reshape(len(pairs), n + 1)
    init_obs = np.array([[np.array(lie_stack_obstacle(ob, x[i], drifts[i], 0.0).values)
                          for ob in cfg.obstacles] for i in range(N)]).reshape(
                              N, len(cfg.obstacles), n + 1)

    K_steps = cfg.steps
    P_n, O_n = len(pairs), len(cfg.obstacles)
    log = TrajectoryLog(
        t=np.zeros(K_steps), x=np.zeros((K_steps, N, m)), x_bar=np.zeros((K_steps, N, m)),
        leader=np.zeros((K_steps, m)), u_bar=np.zeros((K_steps, N, d)),
        u=np.zeros((K_steps, N, d)), V=np.zeros((K_steps, N)), V_max=np.zeros((K_steps, N)),
        rho=rho, h_pair=np.zeros((K_steps, P_n)), h_pair_min=np.zeros((K_steps, P_n)),
        h_obs=np.zeros((K_steps, N, O_n)), h_obs_min=np.zeros((K_steps, N, O_n)),
        stability_error=np.zeros((K_steps, N, d)), formation_error=np.zeros((K_steps, N)),
        status=np.empty((K_steps, N), dtype=object), iterations=np.zeros((K_steps, N), int),
        fallback=np.zeros((K_steps, N), bool), max_violation=np.zeros((K_steps, N)),
        pairs=pairs, initial_pair_stacks=init_pair, initial_obstacle_stacks=init_obs,
        solve_seconds=np.zeros((K_steps, N)) if record_time else None)

    prev: list[Optional[Plan]] = [None] * N
    u_prev = np.zeros((N, d))
    ells = [tb.ellipsoid for tb in tubes]
    ocps = [replace(cfg.ocp, state_box=a.state_box) if a.state_box is not None else cfg.ocp
            for a in cfg.agents]
    for k in range(K_steps):
        t = k * ts
        if cfg.reset_nominal and k > 0:
            xb = x.copy()
        lplan = leader_prediction(cfg, x0, t)
        broadcast = [shift_plan(prev[i], drifts[i]) if prev[i] is not None
                     else Plan.hold(xb[i], H, ts, t, d) for i in range(N)]
        ubar = np.zeros((N, d))
        for i in range(N):
            nbrs = {j: NeighborInfo(broadcast[j], drifts[j], ells[j])
                    for j in cfg.graph.neighbors(i)}
            tic = _time.perf_counter()
            prob = build_ocp(i, xb[i], nbrs, lplan, cfg.obstacles, tubes[i], pair_b, cfg.kappa,
                             cfg.graph, cfg.formation, ocps[i], drifts[i], cfg.lam, cfg.nu,
                             t0=t, u_prev=u_prev[i], activation_radius=cfg.activation_radius)
            res = solve_ocp(prob, warm=broadcast[i] if prev[i] is not None else None)
            if record_time:
                log.solve_seconds[k, i] = _time.perf_counter() - tic
            log.status[k, i] = res.status
            log.iterations[k, i] = res.iterations
            log.max_violation[k, i] = res.max_violation
            if res.ok:
                prev[i] = res.plan
            else:
                log.fallback[k, i] = True
                prev[i] = broadcast[i] if prev[i] is not None else res.plan
            ubar[i] = prev[i].inputs[0]

        # log the state at t_k
        log.t[k] = t
        log.x[k], log.x_bar[k], log.leader[k] = x, xb, x0
        log.u_bar[k] = ubar
        log.u[k] = [ancillary_input(ubar[i], x[i], xb[i], Ks[i]) for i in range(N)]
        zk = x - xb
        log.V[k] = [zk[i] @ tubes[i].P @ zk[i] for i in range(N)]
        hp, ho = _barrier_values(cfg, pairs, pair_b, x)
        log.h_pair[k], log.h_obs[k] = hp, ho
        log.stability_error[k] = [stability_error(i, x, x0, cfg.formation, cfg.lam, cfg.nu,
                                                  cfg.graph) for i in range(N)]
        log.formation_error[k] = _formation_error(cfg, x, x0)

        # integrate [t_k, t_k + T_s] in lockstep
        hp_min, ho_min, v_max = hp.copy(), ho.copy(), log.V[k].copy()
        dt = ts / sub
        for s in range(sub):
            ts_ = t + s * dt
            x0 = rk4(lambda y, tt: drift_eval(cfg.leader.drift, y, tt), x0, ts_, dt)
            for i in range(N):
                w = disturbance_eval(dist[i], ts_)
                ub, Ki, dr = ubar[i], Ks[i], drifts[i]

                def fun(Y, tt, ub=ub, Ki=Ki, dr=dr, w=w):
                    uu = np.stack([ub, (ub - Ki @ (Y[1] - Y[0])) + w])
                    return drift_eval(dr, Y, tt) + uu @ G.T

                Y = rk4(fun, np.stack([xb[i], x[i]]), ts_, dt)
                xb[i], x[i] = Y[0], Y[1]
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xb)) and np.all(np.isfinite(x0))):
                raise NumericError(f"non-finite state at t = {ts_ + dt:.3f}")
            hp_s, ho_s = _barrier_values(cfg, pairs, pair_b, x)
            hp_min = np.minimum(hp_min, hp_s)
            ho_min = np.minimum(ho_min, ho_s)
            zs = x - xb
            v_max = np.maximum(v_max, [zs[i] @ tubes[i].P @ zs[i] for i in range(N)])
        log.h_pair_min[k], log.h_obs_min[k], log.V_max[k] = hp_min, ho_min, v_max
        u_prev = ubar
    log.final_x, log.final_x_bar = x.copy(), xb.copy()
    return log


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    """``dataclasses.replace`` that also accepts ``ecbf_mode``."""
    mode = kw.pop("ecbf_mode", None)
    if mode is not None:
        kw["ocp"] = replace(cfg.ocp, ecbf_mode=mode)
    return replace(cfg, **kw)
