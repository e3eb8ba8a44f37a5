"""Independent numerical oracles for the tube, barrier and safety claims.

The oracles avoid the closed forms they check: support values come from
sampling the ellipsoid through an eigendecomposition of ``P``, Lie
derivatives from finite differences along flows integrated by SciPy, and
tightening margins from direct evaluation of the barrier at perturbed
states.  Every oracle is deterministic for a given seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.integrate import solve_ivp

from .barrier import ObstacleBarrier, PairBarrier
from .errors import ConfigurationError, NumericError
from .model import DriftSpec
from .tube import Ellipsoid, TubeParams

__all__ = [
    "OracleReport",
    "support_oracle",
    "rpi_monte_carlo",
    "lie_fd_oracle",
    "tighten_bound_check",
    "forward_invariance_report",
    "tube_containment_report",
]


@dataclass
class OracleReport:
    """Outcome of one oracle; ``worst`` is a signed slack (negative = violated)."""

    name: str
    trials: int
    worst: float
    tolerance: float
    passed: bool
    seed: Optional[int] = None
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: trials={self.trials} worst={self.worst:.3e} "
                f"tol={self.tolerance:.1e}")

    def as_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials, "worst": self.worst,
                "tolerance": self.tolerance, "passed": self.passed, "seed": self.seed,
                "details": self.details}


def _report(name, trials, worst, tol, seed=None, **details) -> OracleReport:
    worst = float(worst)
    return OracleReport(name, int(trials), worst, float(tol), bool(worst >= -tol), seed, details)


def _ell(t) -> Ellipsoid:
    return t.ellipsoid if isinstance(t, TubeParams) else t


def _inv_sqrt(P):
    w, V = np.linalg.eigh(P)
    return (V / np.sqrt(w)) @ V.T


# --------------------------------------------------------------------------
# support function

def support_oracle(e, g, samples: int = 1000, seed: int = 0,
                   include_maximizer: bool = True) -> float:
    """Sampled ``max g^T z`` over the boundary of ``e``.

    Boundary points are ``rho P^{-1/2} s`` for uniformly distributed unit
    vectors ``s``.  With ``include_maximizer`` the analytic maximizer is added
    to the sample set.
    """
    e = _ell(e)
    g = np.asarray(g, dtype=float)
    if samples < 1:
        raise ConfigurationError("samples must be positive")
    if not np.any(g) or e.rho == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((samples, g.size))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    Z = e.rho * S @ _inv_sqrt(e.P)
    best = float(np.max(Z @ g))
    if include_maximizer:
        y = np.linalg.solve(e.P, g)
        z_star = e.rho * y / np.sqrt(g @ y)
        best = max(best, float(g @ z_star))
    return best


# --------------------------------------------------------------------------
# RPI Monte Carlo

def rpi_monte_carlo(tube: TubeParams, drift: DriftSpec, nominal=None, trials: int = 1000,
                    horizon: float = 1.0, dt: Optional[float] = None, seed: int = 0,
                    box=None, w_bar: Optional[float] = None,
                    tolerance: float = 1e-6) -> OracleReport:
    """Worst ``V(z(t)) / rho^2`` of boundary-initialized error trajectories.

    The error obeys ``z' = A0 z + G (f(x_bar + z) - f(x_bar) - K z + w)``.  Half
    of the trials use the worst-case direction ``w = w_bar G^T P z / |G^T P z|``,
    the other half sinusoids of norm ``w_bar``.

    Parameters
    ----------
    nominal
        ``None`` (a frozen ``x_bar`` drawn uniformly from ``box`` per trial), a
        fixed state, or a callable ``t -> x_bar`` (batched in ``t`` not needed).
    box
        ``(lower, upper)`` for the frozen-nominal draw; defaults to a unit box.
    w_bar
        Disturbance bound; defaults to the tube's.
    """
    n, d = drift.n, drift.d
    m = n * d
    if tube.P.shape != (m, m):
        raise ConfigurationError("tube and drift dimensions differ")
    rng = np.random.default_rng(seed)
    rho = float(tube.rho)
    wb = float(tube.w_bar if w_bar is None else w_bar)
    K = np.asarray(tube.K, dtype=float)
    P = np.asarray(tube.P, dtype=float)
    if rho == 0.0:
        # the degenerate tube is only invariant without disturbance
        return _report("rpi_monte_carlo", trials, 0.0 if wb == 0 else -np.inf, tolerance, seed,
                       max_ratio=0.0)
    if dt is None:
        A_K = np.asarray(tube.A_K, dtype=float)
        dt = min(1e-3, 0.05 / max(1.0, float(np.abs(np.linalg.eigvals(A_K)).max())))
    steps = int(np.ceil(horizon / dt))

    S = rng.standard_normal((trials, m))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    z = rho * S @ _inv_sqrt(P)
    if nominal is None:
        lo, hi = (np.full(m, -1.0), np.full(m, 1.0)) if box is None else map(np.asarray, box)
        lo = np.where(np.isfinite(lo), lo, -1.0)
        hi = np.where(np.isfinite(hi), hi, 1.0)
        xbar_fixed = lo + (hi - lo) * rng.random((trials, m))
        xbar = lambda t: xbar_fixed
    elif callable(nominal):
        xbar = lambda t: np.broadcast_to(np.asarray(nominal(t), dtype=float), (trials, m))
    else:
        xbar_fixed = np.broadcast_to(np.asarray(nominal, dtype=float), (trials, m))
        xbar = lambda t: xbar_fixed

    adversarial = np.arange(trials) % 2 == 0
    amp = rng.random((trials, d))
    amp *= wb / np.maximum(np.linalg.norm(amp, axis=1, keepdims=True), 1e-300)
    freq = rng.uniform(0.2, 5.0, (trials, d))
    phase = rng.uniform(0.0, 2 * np.pi, (trials, d))
    PG = P[:, -d:]  # P G, since G selects the last block

    def w_of(zz, t):
        v = zz @ PG
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        w_adv = wb * v / np.where(nv > 0, nv, 1.0)
        w_sin = amp * np.sin(freq * t + phase)
        return np.where(adversarial[:, None], w_adv, w_sin)

    def rhs(zz, t):
        xb = xbar(t)
        df = drift.jerk(xb + zz, t) - drift.jerk(xb, t)
        out = np.empty_like(zz)
        out[:, :-d] = zz[:, d:]
        out[:, -d:] = df - zz @ K.T + w_of(zz, t)
        return out

    def ratio(zz):
        return np.einsum("ti,ij,tj->t", zz, P, zz) / rho ** 2

    worst = ratio(z)
    t = 0.0
    for _ in range(steps):
        k1 = rhs(z, t)
        k2 = rhs(z + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(z + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(z + dt * k3, t + dt)
        z = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt
        if not np.all(np.isfinite(z)):
            raise NumericError("error trajectory diverged")
        worst = np.maximum(worst, ratio(z))
    max_ratio = float(worst.max())
    return _report("rpi_monte_carlo", trials, 1.0 - max_ratio, tolerance, seed,
                   max_ratio=max_ratio, dt=dt, horizon=horizon)


# --------------------------------------------------------------------------
# Lie derivatives by finite differences

# central stencils: offsets (in units of tau) and weights, divided by tau^q
_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
}


def lie_fd_oracle(barrier: Union[PairBarrier, ObstacleBarrier], states, drifts, q: int,
                  h: float = 2e-2, t: float = 0.0, u_other=None) -> float:
    """``d^q/dt^q`` of the barrier along the drift flow by central differences.

    ``states``/``drifts`` are ``(x_i, x_j)``/``(f_i, f_j)`` for a pair barrier
    and a single state/drift for an obstacle.  Agent ``i`` has no input; the
    other agent may carry a constant input ``u_other``.  The difference is
    Richardson-extrapolated once (steps ``h`` and ``h / 2``).
    """
    if q not in _STENCILS:
        raise ConfigurationError("orders 1..3 are supported")
    if not h > 1e-6:
        raise NumericError(f"finite-difference step {h} underflows")
    pair = isinstance(barrier, PairBarrier)
    if pair:
        xs = [np.asarray(s, dtype=float) for s in states]
        fs = list(drifts)
    else:
        xs = [np.asarray(states, dtype=float)]
        fs = [drifts]
    n, d = fs[0].n, fs[0].d
    m = n * d
    inputs = [np.zeros(d) for _ in xs]
    if pair and u_other is not None:
        inputs[1] = np.asarray(u_other, dtype=float)
    y0 = np.concatenate(xs)

    def rhs(s, y):
        out = np.empty_like(y)
        for a, (f, u) in enumerate(zip(fs, inputs)):
            x = y[a * m:(a + 1) * m]
            out[a * m:a * m + m - d] = x[d:]
            out[a * m + m - d:(a + 1) * m] = f.jerk(x, s) + u
        return out

    def hval(y):
        if pair:
            dp = y[:d] - y[m:m + d]
            return float(dp @ dp - barrier.d_min ** 2)
        dp = y[:d] - np.asarray(barrier.center)
        return float(dp @ dp - barrier.effective_radius ** 2)

    def flow(tau):
        if tau == 0.0:
            return y0
        sol = solve_ivp(rhs, (t, t + tau), y0, method="DOP853", rtol=1e-13, atol=1e-13)
        if not sol.success:
            raise NumericError(sol.message)
        return sol.y[:, -1]

    offsets, weights = _STENCILS[q]

    def diff(tau):
        return sum(w * hval(flow(o * tau)) for o, w in zip(offsets, weights)) / tau ** q

    return (4.0 * diff(h / 2) - diff(h)) / 3.0


# --------------------------------------------------------------------------
# tightening soundness

def tighten_bound_check(barrier: Union[PairBarrier, ObstacleBarrier], tubes, samples: int = 10000,
                        seed: int = 0, d: int = 2, spread: float = 3.0,
                        tolerance: float = 1e-9) -> OracleReport:
    """Worst ``h(true) - (h(nominal) - delta)`` over sampled nominals and tube errors.

    A third of the errors sit on the tube boundary, a third inside, and a
    third at the boundary point that minimizes the linearized barrier (the
    case in which the bound is tight).
    """
    pair = isinstance(barrier, PairBarrier)
    ells = [_ell(t) for t in (tubes if isinstance(tubes, (list, tuple)) else [tubes])]
    if pair and len(ells) != 2:
        raise ConfigurationError("pair barriers need two tubes")
    if not pair:
        ells = ells[:1]
        d = len(barrier.center)
    rng = np.random.default_rng(seed)

    def h(p_i, p_j):
        if pair:
            dp = p_i - p_j
            return np.sum(dp * dp, axis=-1) - barrier.d_min ** 2
        dp = p_i - np.asarray(barrier.center)
        return np.sum(dp * dp, axis=-1) - barrier.effective_radius ** 2

    nominal = [spread * rng.uniform(-1, 1, (samples, d)) for _ in ells]
    if pair:
        g = [2.0 * (nominal[0] - nominal[1]), -2.0 * (nominal[0] - nominal[1])]
    else:
        g = [2.0 * (nominal[0] - np.asarray(barrier.center))]
    mode = np.arange(samples) % 3
    errs, delta = [], np.zeros(samples)
    for e, gi in zip(ells, g):
        mdim = e.P.shape[0]
        gfull = np.zeros((samples, mdim))
        gfull[:, :d] = gi
        Pinv_g = np.linalg.solve(e.P, gfull.T).T
        quad = np.einsum("si,si->s", gfull, Pinv_g)
        delta += e.rho * np.sqrt(quad)
        S = rng.standard_normal((samples, mdim))
        S /= np.linalg.norm(S, axis=1, keepdims=True)
        z = e.rho * S @ _inv_sqrt(e.P)
        z[mode == 1] *= rng.random((int(np.sum(mode == 1)), 1)) ** (1.0 / mdim)
        safe = np.where(quad > 0, quad, 1.0)
        z_min = -e.rho * Pinv_g / np.sqrt(safe)[:, None]
        z = np.where((mode == 2)[:, None] & (quad > 0)[:, None], z_min, z)
        errs.append(z[:, :d])
    if pair:
        h_nom = h(nominal[0], nominal[1])
        h_true = h(nominal[0] + errs[0], nominal[1] + errs[1])
    else:
        h_nom = h(nominal[0], None)
        h_true = h(nominal[0] + errs[0], None)
    slack = h_true - (h_nom - delta)
    # rounding of the (large) barrier values is not a violation of the bound
    scale = np.maximum(1.0, np.abs(h_nom) + delta)
    worst_idx = int(np.argmin(slack / scale))
    return _report("tighten_bound_check", samples, float(slack.min()), tolerance, seed,
                   worst_index=worst_idx, worst_relative=float((slack / scale).min()))


# --------------------------------------------------------------------------
# closed-loop logs

def forward_invariance_report(log, tolerance: float = 1e-9) -> OracleReport:
    """Worst barrier value over a log, with the initial-condition hypothesis.

    ``details["hypothesis_ok"]`` is False when some barrier or one of its
    Lie derivatives below the relative degree is negative at ``t_0``; in that
    case the safety guarantee does not apply, which is reported separately
    from the conclusion.
    """
    if log.steps == 0:
        raise ConfigurationError("empty log")
    candidates = []
    if log.h_pair.size:
        hp = np.minimum(log.h_pair, log.h_pair_min)
        k, j = np.unravel_index(np.argmin(hp), hp.shape)
        candidates.append((float(hp[k, j]), {"kind": "pair", "pair": list(log.pairs[j]),
                                             "step": int(k)}))
    if log.h_obs.size:
        ho = np.minimum(log.h_obs, log.h_obs_min)
        k, i, o = np.unravel_index(np.argmin(ho), ho.shape)
        candidates.append((float(ho[k, i, o]), {"kind": "obstacle", "agent": int(i),
                                                "obstacle": int(o), "step": int(k)}))
    if not candidates:
        return _report("forward_invariance", log.steps, np.inf, tolerance)
    worst, where = min(candidates, key=lambda c: c[0])
    bad = []
    if log.initial_pair_stacks.size:
        for j, stack in enumerate(log.initial_pair_stacks):
            if np.any(stack[:-1] < -tolerance):
                bad.append({"kind": "pair", "pair": list(log.pairs[j])})
    if log.initial_obstacle_stacks.size:
        for i, per_agent in enumerate(log.initial_obstacle_stacks):
            for o, stack in enumerate(per_agent):
                if np.any(stack[:-1] < -tolerance):
                    bad.append({"kind": "obstacle", "agent": i, "obstacle": o})
    return _report("forward_invariance", log.steps, worst, tolerance, None, worst_at=where,
                   hypothesis_ok=not bad, hypothesis_violations=bad)


def tube_containment_report(log, tolerance: float = 1e-6) -> OracleReport:
    """Worst ``V(z) / rho^2`` over a log, substeps included."""
    V = np.maximum(log.V, log.V_max)
    rho2 = np.asarray(log.rho, dtype=float) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rho2 > 0, V / np.where(rho2 > 0, rho2, 1.0),
                         np.where(V > 0, np.inf, 0.0))
    k, i = np.unravel_index(np.argmax(ratio), ratio.shape)
    max_ratio = float(ratio[k, i])
    return _report("tube_containment", log.steps, 1.0 - max_ratio, tolerance, None,
                   max_ratio=max_ratio, agent=int(i), step=int(k),
                   per_agent=ratio.max(axis=0).tolist())
