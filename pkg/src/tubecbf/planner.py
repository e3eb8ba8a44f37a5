"""Per-agent tube MPC problem: RK4 multiple shooting solved by SQP.

Decision vector, for horizon ``H``, state size ``m`` and input size ``d``::

    z = [x_0, ..., x_H, u_0, ..., u_{H-1}, u_f]

``u_f`` is the auxiliary input that certifies the terminal safe set.  Each SQP
iteration linearizes the RK4 defects and the tightened eCBF rows about the
current iterate, solves a sparse convex QP with Clarabel and backtracks on an
l1 merit function.  The accepted plan is finally re-rolled through RK4 from
``x_0`` so the dynamics hold to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .barrier import (EcbfGains, ObstacleBarrier, PairBarrier, TightenedConstraint,
                      hurwitz_check, lie_stack_obstacle, lie_stack_pair, phi_tight_obstacle,
                      phi_tight_pair, relative_lie_values)
from .errors import ConfigurationError, InfeasibleTighteningError, SetupError
from .model import AgentState, DriftSpec, drift_eval, rk4
from .topology import FormationSpec, Graph, stability_error, stability_error_jacobian
from .tube import Ellipsoid, TubeParams, box_tighten

__all__ = [
    "SolverOptions",
    "OcpConfig",
    "Plan",
    "NeighborInfo",
    "OcpProblem",
    "SolveResult",
    "build_ocp",
    "solve_ocp",
    "shift_plan",
    "terminal_check",
    "active_obstacles",
    "rk4_nominal",
]

_CS = 1e-30  # complex-step size


@dataclass(frozen=True)
class SolverOptions:
    """SQP stopping rules and line-search constants."""

    max_iter: int = 30
    constraint_tol: float = 1e-6
    step_tol: float = 1e-9
    decrease_tol: float = 1e-10
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-8


def _as_matrix(w, d: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(d)
    if w.shape != (d, d):
        raise ConfigurationError(f"weight must be scalar or {d}x{d}")
    return w


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights, boxes and solver settings of the per-agent OCP.

    ``state_box``/``input_box`` are ``(lower, upper)`` pairs (infinite entries
    allowed); ``R`` and ``R_du`` are scalars or ``d x d`` matrices.
    """

    H: int = 5
    ts: float = 0.1
    q_r: float = 50.0
    p_r: float = 10.0
    R: object = 0.01
    R_du: object = 0.001
    state_box: Optional[tuple] = None
    input_box: Optional[tuple] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    ecbf_mode: str = "all-nodes"
    activation_margin: float = 3.0

    def __post_init__(self):
        if int(self.H) < 1:
            raise ConfigurationError("H must be >= 1")
        if not self.ts > 0:
            raise ConfigurationError("ts must be positive")
        if not (self.q_r > 0 and self.p_r > 0):
            raise ConfigurationError("q_r and p_r must be positive")
        if self.ecbf_mode not in ("all-nodes", "first-node"):
            raise ConfigurationError(f"unknown ecbf_mode {self.ecbf_mode!r}")
        for w in (self.R, self.R_du):
            w = np.atleast_2d(np.asarray(w, dtype=float))
            if np.linalg.eigvalsh(0.5 * (w + w.T)).min() < 0:
                raise ConfigurationError("input weights must be positive semidefinite")
        if not self.activation_margin > 0:
            raise ConfigurationError("activation_margin must be positive")


@dataclass(frozen=True)
class Plan:
    """Nominal trajectory: ``H + 1`` states and ``H`` inputs spaced ``ts`` apart."""

    states: np.ndarray
    inputs: np.ndarray
    timestamp: float
    ts: float
    terminal_input: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.array(self.states, dtype=float)
        U = np.array(self.inputs, dtype=float)
        if X.ndim != 2 or U.ndim != 2 or X.shape[0] != U.shape[0] + 1:
            raise ConfigurationError("plan needs H+1 states and H inputs")
        uf = U[-1].copy() if self.terminal_input is None else np.array(self.terminal_input, float)
        for a in (X, U, uf):
            a.setflags(write=False)
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "inputs", U)
        object.__setattr__(self, "terminal_input", uf)

    @property
    def H(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def hold(cls, x, H: int, ts: float, t: float, d: int) -> "Plan":
        """Constant state with zero inputs (used before any plan exists)."""
        x = np.asarray(x.flat if isinstance(x, AgentState) else x, dtype=float)
        return cls(np.tile(x, (H + 1, 1)), np.zeros((H, d)), t, ts)

    def input_at(self, k: int) -> np.ndarray:
        return self.inputs[k] if k < self.H else self.terminal_input


@dataclass(frozen=True)
class NeighborInfo:
    """What agent ``i`` knows about neighbour ``j``: its broadcast plan, model and tube."""

    plan: Plan
    drift: DriftSpec
    tube: Ellipsoid


def rk4_nominal(drift: DriftSpec, x, u, t: float, dt: float):
    """One nominal RK4 step (no disturbance); works on batches and complex inputs."""
    u = np.asarray(u)
    d = drift.d

    def fun(y, s):
        f = drift_eval(drift, y, s)
        return np.concatenate([f[..., :-d], f[..., -d:] + u], axis=-1)

    return rk4(fun, np.asarray(x), t, dt)


def shift_plan(p: Plan, drift: DriftSpec) -> Plan:
    """Drop node 0 and append one RK4 step under the held last input."""
    last_u = p.inputs[-1]
    t_end = p.timestamp + p.H * p.ts
    x_new = rk4_nominal(drift, p.states[-1], last_u, t_end, p.ts)
    states = np.vstack([p.states[1:], x_new[None]])
    inputs = np.vstack([p.inputs[1:], last_u[None]])
    return Plan(states, inputs, p.timestamp + p.ts, p.ts, last_u)


def active_obstacles(x_bar, obstacles: Sequence[ObstacleBarrier],
                     activation_radius: Optional[float] = None, margin: float = 3.0):
    """Obstacles whose centre lies within the activation radius of ``x_bar``'s position.

    Without an explicit radius each obstacle uses its effective radius plus
    ``margin``.  Returns the indices of the active obstacles.
    """
    x = np.asarray(x_bar.flat if isinstance(x_bar, AgentState) else x_bar, dtype=float)
    out = []
    for idx, ob in enumerate(obstacles):
        rad = ob.effective_radius + margin if activation_radius is None else activation_radius
        if rad <= ob.effective_radius:
            raise ConfigurationError("activation radius must exceed the effective obstacle radius")
        d = len(ob.center)
        if np.linalg.norm(x[:d] - np.asarray(ob.center)) <= rad:
            out.append(idx)
    return out


def terminal_check(rows: Sequence[TightenedConstraint], input_box, tol: float = 0.0):
    """Is there ``u_f`` in the box with every row ``>= 0``?

    Solves ``max s`` subject to ``c_r + a_r . u >= s`` over the box.  Returns
    ``(ok, u_f)``.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in input_box)
    d = lo.size
    if not rows:
        u = np.clip(np.zeros(d), lo, hi)
        return True, u
    A = np.array([np.concatenate([-np.asarray(r.input_coeff, float), [1.0]]) for r in rows])
    b = np.array([float(r.constant) for r in rows])
    res = linprog(np.concatenate([np.zeros(d), [-1.0]]), A_ub=A, b_ub=b,
                  bounds=[(l if np.isfinite(l) else None, h if np.isfinite(h) else None)
                          for l, h in zip(lo, hi)] + [(None, 1.0)], method="highs")
    if res.status != 0:
        return False, None
    return bool(res.x[-1] >= -tol), res.x[:d]


def _support_pos(E: Ellipsoid, dp):
    # support of the tube in direction (2 dp, 0, ..., 0); complex-safe
    d = dp.shape[-1]
    Pi = E.P_inv[:d, :d]
    q = np.einsum("...i,ij,...j->...", 2.0 * dp, Pi, 2.0 * dp)
    return E.rho * np.sqrt(q)


@dataclass
class _Row:
    k: int
    kind: str  # "pair" or "obstacle"
    ref: int   # neighbour id or obstacle index


class OcpProblem:
    """Assembled optimal control problem of one agent at one sampling instant."""

    def __init__(self, agent: int, x_now, t0: float, drift: DriftSpec, tube: Ellipsoid,
                 neighbors: Mapping[int, NeighborInfo], leader_plan: Plan,
                 obstacles: Sequence[ObstacleBarrier], active: Sequence[int],
                 pair: Optional[PairBarrier], gains: EcbfGains, graph: Graph,
                 formation: FormationSpec, lam, nu, cfg: OcpConfig, K: np.ndarray,
                 u_prev=None):
        self.agent = agent
        self.drift = drift
        self.n, self.d = drift.n, drift.d
        self.m = self.n * self.d
        self.H = int(cfg.H)
        self.cfg = cfg
        self.t0 = float(t0)
        self.x_now = np.asarray(x_now.flat if isinstance(x_now, AgentState) else x_now,
                                dtype=float).copy()
        if self.x_now.shape != (self.m,):
            raise SetupError(f"initial state must have length {self.m}")
        if not hurwitz_check(gains):
            raise SetupError("eCBF gains are not Hurwitz")
        self.tube = tube
        self.neighbors = dict(neighbors)
        self.leader_plan = leader_plan
        self.obstacles = list(obstacles)
        self.active = list(active)
        self.pair = pair
        self.gains = gains
        self.u_prev = np.zeros(self.d) if u_prev is None else np.asarray(u_prev, dtype=float)

        graph_nbrs = graph.neighbors(agent)
        missing = [j for j in graph_nbrs if j not in self.neighbors]
        if missing:
            raise SetupError(f"agent {agent}: missing neighbour plans {missing}")
        for j in graph_nbrs:
            if self.neighbors[j].plan.H != self.H:
                raise SetupError(f"neighbour {j} plan horizon differs from H")
        if leader_plan.H != self.H:
            raise SetupError("leader plan horizon differs from H")
        self.pair_nbrs = graph_nbrs if pair is not None else []

        # tightened boxes
        m, d = self.m, self.d
        sbox = cfg.state_box or (np.full(m, -np.inf), np.full(m, np.inf))
        ibox = cfg.input_box or (np.full(d, -np.inf), np.full(d, np.inf))
        try:
            self.state_box = box_tighten(sbox, tube)
            self.input_box = box_tighten(ibox, tube, np.asarray(K, dtype=float))
        except InfeasibleTighteningError as exc:
            raise SetupError(f"agent {agent}: {exc}") from exc

        # stability error r_k = J x_k + b_k
        self.J = stability_error_jacobian(agent, formation, lam, nu, graph)
        N = formation.shape[0]
        self.r_const = np.zeros((self.H + 1, d))
        for k in range(self.H + 1):
            X = np.zeros((N, m))
            for j in range(N):
                if j != agent and j in self.neighbors:
                    X[j] = self.neighbors[j].plan.states[k]
            self.r_const[k] = stability_error(agent, X, leader_plan.states[k], formation,
                                              lam, nu, graph)

        nodes = range(self.H) if cfg.ecbf_mode == "all-nodes" else range(1)
        self.rows: list[_Row] = []
        for k in list(nodes) + [self.H]:
            for j in self.pair_nbrs:
                self.rows.append(_Row(k, "pair", j))
            for o in self.active:
                self.rows.append(_Row(k, "obstacle", o))
        self.row_scale = np.ones(len(self.rows))
        self._prepare_rows()
        self._build_cost()

    def _prepare_rows(self):
        # everything a row needs from the frozen neighbour plans / obstacles
        n, d, R = self.n, self.d, len(self.rows)
        self._rk = np.array([r.k for r in self.rows], dtype=int)
        self._other = np.zeros((R, n, d))
        self._f_other = np.zeros((R, d))
        self._u_other = np.zeros((R, d))
        self._offset = np.zeros(R)
        self._Pi_other = np.zeros((R, d, d))
        self._rho_other = np.zeros(R)
        for idx, r in enumerate(self.rows):
            if r.kind == "pair":
                nb = self.neighbors[r.ref]
                xj = nb.plan.states[r.k]
                self._other[idx] = xj.reshape(n, d)
                self._f_other[idx] = nb.drift.jerk(xj, self.node_time(r.k))
                self._u_other[idx] = nb.plan.input_at(r.k)
                self._offset[idx] = self.pair.d_min
                self._Pi_other[idx] = nb.tube.P_inv[:d, :d]
                self._rho_other[idx] = nb.tube.rho
            else:
                ob = self.obstacles[r.ref]
                self._other[idx, 0] = ob.center
                self._offset[idx] = ob.effective_radius

    # -- layout ---------------------------------------------------------
    @property
    def nvar(self) -> int:
        return (self.H + 1) * self.m + (self.H + 1) * self.d

    def ix(self, k: int) -> slice:
        return slice(k * self.m, (k + 1) * self.m)

    def iu(self, k: int) -> slice:
        """Input slot ``k``; ``k = H`` is the terminal input ``u_f``."""
        base = (self.H + 1) * self.m
        return slice(base + k * self.d, base + (k + 1) * self.d)

    @property
    def n_ecbf_rows(self) -> int:
        """Stage rows (terminal rows excluded)."""
        return sum(1 for r in self.rows if r.k < self.H)

    @property
    def n_terminal_rows(self) -> int:
        return sum(1 for r in self.rows if r.k == self.H)

    def node_time(self, k: int) -> float:
        return self.t0 + k * self.cfg.ts

    def pack(self, X, U, uf) -> np.ndarray:
        return np.concatenate([np.asarray(X).reshape(-1), np.asarray(U).reshape(-1),
                               np.asarray(uf).reshape(-1)])

    def unpack(self, z):
        X = z[: (self.H + 1) * self.m].reshape(self.H + 1, self.m)
        U = z[(self.H + 1) * self.m: (self.H + 1) * self.m + self.H * self.d].reshape(self.H, self.d)
        return X, U, z[self.iu(self.H)]

    # -- cost -----------------------------------------------------------
    def _build_cost(self):
        cfg, d, H = self.cfg, self.d, self.H
        R = _as_matrix(cfg.R, d)
        Rd = _as_matrix(cfg.R_du, d)
        nv = self.nvar
        Hm = np.zeros((nv, nv))
        c = np.zeros(nv)
        const = 0.0
        JtJ = self.J.T @ self.J
        for k in range(H + 1):
            w = cfg.q_r if k < H else cfg.p_r
            sx = self.ix(k)
            Hm[sx, sx] += 2 * w * JtJ
            c[sx] += 2 * w * self.J.T @ self.r_const[k]
            const += w * float(self.r_const[k] @ self.r_const[k])
        for k in range(H):
            su = self.iu(k)
            Hm[su, su] += 2 * R + 2 * Rd
            if k == 0:
                c[su] += -2 * Rd @ self.u_prev
                const += float(self.u_prev @ Rd @ self.u_prev)
            else:
                sp_ = self.iu(k - 1)
                Hm[sp_, sp_] += 2 * Rd
                Hm[su, sp_] += -2 * Rd
                Hm[sp_, su] += -2 * Rd.T
        # u_f carries the input weight so the problem stays strictly convex in it
        suf = self.iu(H)
        Hm[suf, suf] += 2 * R
        self.cost_hess, self.cost_lin, self.cost_const = Hm, c, const

    def objective(self, z) -> float:
        return float(0.5 * z @ self.cost_hess @ z + self.cost_lin @ z + self.cost_const)

    def objective_grad(self, z) -> np.ndarray:
        return self.cost_hess @ z + self.cost_lin

    def stage_errors(self, z) -> np.ndarray:
        """``r_bar_k`` for ``k = 0..H``."""
        X, _, _ = self.unpack(z)
        return X @ self.J.T + self.r_const

    # -- dynamics -------------------------------------------------------
    def defects(self, z) -> np.ndarray:
        X, U, _ = self.unpack(z)
        out = [X[0] - self.x_now]
        for k in range(self.H):
            out.append(rk4_nominal(self.drift, X[k], U[k], self.node_time(k), self.cfg.ts) - X[k + 1])
        return np.concatenate(out)

    def _defect_jac(self, z):
        X, U, _ = self.unpack(z)
        m, d, H = self.m, self.d, self.H
        J = np.zeros((m * (H + 1), self.nvar))
        J[:m, self.ix(0)] = np.eye(m)
        res = [X[0] - self.x_now]
        for k in range(H):
            base = np.concatenate([X[k], U[k]])
            pert = base + 1j * _CS * np.eye(m + d)
            f = rk4_nominal(self.drift, pert[:, :m], pert[:, m:], self.node_time(k), self.cfg.ts)
            jac = (f.imag / _CS).T  # (m, m+d)
            r0 = slice((k + 1) * m, (k + 2) * m)
            J[r0, self.ix(k)] = jac[:, :m]
            J[r0, self.iu(k)] = jac[:, m:]
            J[r0, self.ix(k + 1)] = -np.eye(m)
            res.append(f[0].real - X[k + 1])
        return np.concatenate(res), J

    # -- eCBF rows ------------------------------------------------------
    def _row_value(self, row: _Row, x, u):
        """Tightened row at node ``row.k``; ``x`` may be a complex batch."""
        t = self.node_time(row.k)
        if row.kind == "pair":
            nb = self.neighbors[row.ref]
            xj = nb.plan.states[row.k]
            uj = nb.plan.input_at(row.k)
            stack = lie_stack_pair(self.pair, x, xj, self.drift, nb.drift, uj, t)
            dp = x[..., :self.d] - xj[:self.d]
            delta = _support_pos(self.tube, dp) + _support_pos(nb.tube, -dp)
            con = phi_tight_pair(stack, self.gains, delta)
        else:
            ob = self.obstacles[row.ref]
            stack = lie_stack_obstacle(ob, x, self.drift, t)
            dp = x[..., :self.d] - np.asarray(ob.center)
            con = phi_tight_obstacle(stack, self.gains, _support_pos(self.tube, dp))
        return con.constant + np.sum(con.input_coeff * u, axis=-1), con

    def row_constraints(self, z) -> list[TightenedConstraint]:
        """Unscaled tightened rows evaluated at the iterate (affine in the node input)."""
        X, U, uf = self.unpack(z)
        return [self._row_value(r, X[r.k], U[r.k] if r.k < self.H else uf)[1] for r in self.rows]

    def _rows_batch(self, X, Ur):
        """All row values for node states ``X (..., H+1, m)`` and row inputs ``Ur (..., R, d)``.

        Same arithmetic as :meth:`_row_value`, vectorized over rows.
        """
        n, d, rk = self.n, self.d, self._rk
        f = np.stack([self.drift.jerk(X[..., k, :], self.node_time(k))
                      for k in range(self.H + 1)], axis=-2)
        blocks = X[..., rk, :].reshape(X.shape[:-2] + (len(rk), n, d))
        rel = blocks - self._other
        rate = f[..., rk, :] - self._f_other - self._u_other
        vals = relative_lie_values(rel, rate, self._offset)
        dp = rel[..., 0, :]
        q_other = np.einsum("...ri,rij,...rj->...r", -2.0 * dp, self._Pi_other, -2.0 * dp)
        delta = _support_pos(self.tube, dp) + self._rho_other * np.sqrt(q_other)
        k, r = self.gains.kappa, self.gains.r
        out = vals[..., r]
        for q in range(1, r):
            out = out + k[q] * vals[..., q]
        out = out + k[0] * (vals[..., 0] - delta)
        return out + np.sum(2.0 * dp * Ur, axis=-1), 2.0 * dp

    def _row_inputs(self, U, uf):
        Uall = np.vstack([U, uf[None]])
        return Uall[self._rk]

    def ecbf_values(self, z) -> np.ndarray:
        """Unscaled row values (must be ``>= 0``)."""
        if not self.rows:
            return np.zeros(0)
        X, U, uf = self.unpack(z)
        return self._rows_batch(X, self._row_inputs(U, uf))[0]

    def _ecbf_jac(self, z):
        X, U, uf = self.unpack(z)
        m, R = self.m, len(self.rows)
        J = np.zeros((R, self.nvar))
        if not R:
            return np.zeros(0), J
        Ur = self._row_inputs(U, uf)
        # each row sees one node only, so one perturbation per state component suffices
        pert = X[None, :, :] + 1j * _CS * np.eye(m)[:, None, :]
        v, _ = self._rows_batch(pert, Ur)
        vals, row = self._rows_batch(X, Ur)
        dx = (v.imag / _CS).T  # (R, m)
        for idx, k in enumerate(self._rk):
            J[idx, self.ix(k)] = dx[idx]
            J[idx, self.iu(k)] = row[idx]
        return vals, J

    # -- boxes ----------------------------------------------------------
    def bounds(self):
        """Variable bounds (``x_0`` is left free; the defects pin it)."""
        lo = np.full(self.nvar, -np.inf)
        hi = np.full(self.nvar, np.inf)
        for k in range(1, self.H + 1):
            lo[self.ix(k)], hi[self.ix(k)] = self.state_box
        for k in range(self.H + 1):
            lo[self.iu(k)], hi[self.iu(k)] = self.input_box
        return lo, hi

    # -- helpers --------------------------------------------------------
    def rollout(self, U, uf=None) -> np.ndarray:
        X = [self.x_now]
        for k in range(self.H):
            X.append(rk4_nominal(self.drift, X[-1], U[k], self.node_time(k), self.cfg.ts))
        uf = U[-1] if uf is None else uf
        return self.pack(np.array(X), U, uf)

    def initial_guess(self, warm: Optional[Plan]) -> np.ndarray:
        lo, hi = self.input_box
        if warm is not None:
            U = np.array(warm.inputs, dtype=float)
            uf = np.array(warm.terminal_input, dtype=float)
        else:
            hold = -self.drift.jerk(self.x_now, self.t0)
            U = np.tile(hold, (self.H, 1))
            uf = hold
        U = np.clip(U, lo, hi)
        return self.rollout(U, np.clip(uf, lo, hi))

    def to_plan(self, z) -> Plan:
        X, U, uf = self.unpack(z)
        return Plan(X.copy(), U.copy(), self.t0, self.cfg.ts, uf.copy())


def build_ocp(agent: int, x_now, neighbors: Mapping[int, NeighborInfo], leader_plan: Plan,
              obstacles: Sequence[ObstacleBarrier], tube, pair: Optional[PairBarrier],
              gains: EcbfGains, graph: Graph, formation: FormationSpec, cfg: OcpConfig,
              drift: DriftSpec, lam, nu, t0: float = 0.0, u_prev=None,
              activation_radius: Optional[float] = None) -> OcpProblem:
    """Assemble the OCP of ``agent`` at time ``t0`` from frozen neighbour plans.

    ``tube`` is the agent's :class:`TubeParams` (its ``K`` tightens the input
    box).  Obstacles are activated once, from ``x_now``.
    """
    if not isinstance(tube, TubeParams):
        raise SetupError("tube must be a TubeParams (its gain tightens the input box)")
    active = active_obstacles(x_now, obstacles, activation_radius, cfg.activation_margin)
    return OcpProblem(agent, x_now, t0, drift, tube.ellipsoid, neighbors, leader_plan, obstacles,
                      active, pair, gains, graph, formation, lam, nu, cfg, tube.K, u_prev)


@dataclass
class SolveResult:
    """Plan plus solver diagnostics."""

    plan: Plan
    status: str
    iterations: int
    kkt_residual: float
    max_violation: float
    step_norm: float
    merit_history: list = field(default_factory=list)
    qp_failures: int = 0

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def _qp(Hm, g, A_eq, b_eq, A_in, b_in, box_lo, box_hi, elastic: Optional[float] = None):
    """min 0.5 p'Hp + g'p  s.t. A_eq p = b_eq, A_in p <= b_in, box_lo <= p <= box_hi.

    With ``elastic = c`` the rows ``A_in`` get nonnegative slacks priced at
    ``c`` per unit, so the QP is always feasible.  Returns ``(p, y, A, status,
    slack)``; ``p is None`` when Clarabel fails.
    """
    nv = Hm.shape[0]
    n_s = A_in.shape[0] if elastic is not None else 0
    A_eq = sp.hstack([sp.csr_matrix(A_eq), sp.csr_matrix((A_eq.shape[0], n_s))])
    A_in = sp.csr_matrix(A_in)
    if n_s:
        A_in = sp.vstack([sp.hstack([A_in, -sp.identity(n_s)]),
                          sp.hstack([sp.csr_matrix((n_s, nv)), -sp.identity(n_s)])])
        b_in = np.concatenate([b_in, np.zeros(n_s)])
    else:
        A_in = sp.hstack([A_in, sp.csr_matrix((A_in.shape[0], 0))])
    fin_hi = np.isfinite(box_hi)
    fin_lo = np.isfinite(box_lo)
    I = sp.hstack([sp.identity(nv), sp.csr_matrix((nv, n_s))], format="csr")
    ineq = [A_in, I[fin_hi], -I[fin_lo]]
    ineq_rhs = [b_in, box_hi[fin_hi], -box_lo[fin_lo]]
    A = sp.vstack([A_eq] + ineq, format="csc")
    b = np.concatenate([b_eq] + ineq_rhs)
    n_in = sum(a.shape[0] for a in ineq)
    P = sp.block_diag([sp.csc_matrix(Hm), sp.csc_matrix((n_s, n_s))])
    q = np.concatenate([g, np.full(n_s, elastic if n_s else 0.0)])
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_iter = 200
    solver = clarabel.DefaultSolver(sp.triu(P, format="csc"), q, A, b,
                                    [clarabel.ZeroConeT(A_eq.shape[0]),
                                     clarabel.NonnegativeConeT(n_in)], settings)
    sol = solver.solve()
    status = str(sol.status)
    if status not in ("Solved", "AlmostSolved"):
        return None, None, A, status, 0.0
    x = np.asarray(sol.x)
    y = np.asarray(sol.z)
    slack = x[nv:]
    if n_s:
        # drop the slack columns and slack-sign rows so callers see the plain layout
        keep = np.r_[np.arange(A_eq.shape[0] + n_s),
                     np.arange(A_eq.shape[0] + 2 * n_s, A.shape[0])]
        A = A[keep][:, :nv]
        y = y[keep]
    else:
        A = A[:, :nv]
    return x[:nv], y, A, status, float(slack.sum())


def solve_ocp(p: OcpProblem, warm: Optional[Plan] = None) -> SolveResult:
    """SQP with an l1 merit line search; see the module docstring."""
    opt = p.cfg.solver
    z = p.initial_guess(warm)
    lo, hi = p.bounds()
    z = np.clip(z, lo, hi)
    # fixed row scaling from the first linearization keeps the merit consistent
    g0, Jg0 = p._ecbf_jac(z)
    if len(p.rows):
        p.row_scale = 1.0 / np.maximum(1.0, np.abs(Jg0).max(axis=1))
    obj_scale = 1.0 / max(1.0, np.abs(np.diag(p.cost_hess)).max())

    def violation(ceq, g):
        return float(np.abs(ceq).sum() + np.maximum(0.0, -g).sum())

    def merit(zz, mu):
        ceq = p.defects(zz)
        g = p.ecbf_values(zz) * p.row_scale if len(p.rows) else np.zeros(0)
        return obj_scale * p.objective(zz) + mu * violation(ceq, g)

    mu = 1.0
    history, iterations, qp_fail = [], 0, 0
    step_norm, kkt = np.inf, np.inf
    converged = False
    y = None
    for _ in range(opt.max_iter):
        ceq, Jeq = p._defect_jac(z)
        if len(p.rows):
            g, Jg = p._ecbf_jac(z)
            g, Jg = g * p.row_scale, Jg * p.row_scale[:, None]
        else:
            g, Jg = np.zeros(0), np.zeros((0, p.nvar))
        Hm = obj_scale * p.cost_hess
        grad = obj_scale * p.objective_grad(z)
        step, y, A, status, slack = _qp(Hm, grad, Jeq, -ceq, -Jg, g, lo - z, hi - z)
        if step is None:
            # inconsistent linearization: take the least-violating (elastic) step
            qp_fail += 1
            mu = max(mu, 1e4)
            step, y, A, status, slack = _qp(Hm, grad, Jeq, -ceq, -Jg, g, lo - z, hi - z,
                                            elastic=mu)
            if step is None:
                break
        step_norm = float(np.abs(step).max())
        kkt = float(np.abs(Hm @ step + grad + A.T @ y).max())
        mu = max(mu, 1.5 * float(np.abs(y[: Jeq.shape[0] + Jg.shape[0]]).max(initial=0.0)))
        phi0 = merit(z, mu)
        if not history:
            history.append(phi0)
        dphi = float(grad @ step) - mu * (violation(ceq, g) - slack)
        # stop on a tiny step or once the model predicts no relative merit decrease
        small = (step_norm <= opt.step_tol * (1.0 + np.abs(z).max())
                 or -dphi <= opt.decrease_tol * (1.0 + abs(phi0)))
        if small and violation(ceq, g) <= opt.constraint_tol:
            converged = True
            break
        alpha = 1.0
        while True:
            cand = np.clip(z + alpha * step, lo, hi)
            phi = merit(cand, mu)
            if phi <= phi0 + opt.armijo * alpha * min(dphi, 0.0) or alpha < opt.min_step:
                break
            alpha *= opt.backtrack
        if alpha < opt.min_step:
            break
        z = cand
        history.append(phi)
        if step_norm > opt.step_tol * (1.0 + np.abs(z).max()):
            iterations += 1

    # polish: inputs inside the box exactly, states re-rolled through RK4
    X, U, uf = p.unpack(z)
    ilo, ihi = p.input_box
    z = p.rollout(np.clip(U, ilo, ihi), np.clip(uf, ilo, ihi))
    vals = p.ecbf_values(z) if len(p.rows) else np.zeros(0)
    Xp, _, _ = p.unpack(z)
    slo, shi = p.state_box
    box_v = float(np.maximum(0, np.maximum(slo - Xp[1:], Xp[1:] - shi)).max(initial=0.0))
    worst = max(float(np.maximum(0.0, -vals).max(initial=0.0)), box_v,
                float(np.abs(p.defects(z)).max()))
    feasible = worst <= opt.constraint_tol
    status = "optimal" if (feasible and converged) else ("feasible" if feasible else "infeasible")
    return SolveResult(p.to_plan(z), status, iterations, kkt, worst, step_norm, history, qp_fail)
