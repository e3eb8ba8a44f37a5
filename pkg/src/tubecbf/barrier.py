"""Distance barriers, Lie-derivative stacks and tightened eCBF rows.

Both barrier families are squared distances, ``h = |dp|^2 - r^2``, where
``dp`` is the relative position.  Along an integrator chain of length ``n``
the q-th time derivative follows from the Leibniz rule,

    d^q/dt^q |dp|^2 = sum_m C(q, m) dp^(m) . dp^(q-m),

with ``dp^(m)`` the relative block ``m`` for ``m < n`` and the relative last
block rate ``f_i - f_j - u_j`` for ``m = n``.  The input of agent ``i`` only
reaches order ``n``, through ``2 dp . u_i``.

All helpers are written with plain array arithmetic so they also accept
complex arguments (complex-step derivatives in the planner).
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError
from .model import AgentState, DriftSpec
from .tube import Ellipsoid, TubeParams, support

__all__ = [
    "PairBarrier",
    "ObstacleBarrier",
    "EcbfGains",
    "LieStack",
    "TightenedConstraint",
    "hurwitz_check",
    "lie_stack_pair",
    "lie_stack_obstacle",
    "relative_lie_values",
    "grad_full",
    "margin_pair",
    "margin_obstacle",
    "phi_tight_pair",
    "phi_tight_obstacle",
    "phi_standard",
]


@dataclass(frozen=True)
class PairBarrier:
    """``h_ij = |p_i - p_j|^2 - d_min^2``."""

    d_min: float

    def __post_init__(self):
        if not self.d_min > 0:
            raise ConfigurationError(f"d_min must be positive, got {self.d_min}")

    def value(self, p_i, p_j):
        dp = np.asarray(p_i) - np.asarray(p_j)
        return np.sum(dp * dp, axis=-1) - self.d_min ** 2


@dataclass(frozen=True)
class ObstacleBarrier:
    """``h_iO = |p_i - c|^2 - (radius + inflation)^2``."""

    center: tuple
    radius: float
    inflation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.inflation < 0:
            raise ConfigurationError("inflation must be nonnegative")
        if not self.effective_radius > 0:
            raise ConfigurationError("effective obstacle radius must be positive")

    @property
    def effective_radius(self) -> float:
        return float(self.radius + self.inflation)

    def value(self, p):
        dp = np.asarray(p) - np.asarray(self.center)
        return np.sum(dp * dp, axis=-1) - self.effective_radius ** 2


def hurwitz_check(gains) -> bool:
    """True iff ``s^r + k_{r-1} s^{r-1} + ... + k_0`` has all roots in Re < 0."""
    kappa = gains.kappa if isinstance(gains, EcbfGains) else tuple(gains)
    if len(kappa) == 0:
        return True
    roots = np.roots(np.concatenate([[1.0], np.asarray(kappa, dtype=float)[::-1]]))
    return bool(np.all(roots.real < 0))


@dataclass(frozen=True)
class EcbfGains:
    """Comparison-system gains ``(kappa_0, ..., kappa_{r-1})``."""

    kappa: tuple

    def __post_init__(self):
        kappa = tuple(float(k) for k in self.kappa)
        object.__setattr__(self, "kappa", kappa)
        if not kappa:
            raise ConfigurationError("need at least one eCBF gain")
        if not hurwitz_check(kappa):
            raise ConfigurationError(f"eCBF gains {kappa} do not give a Hurwitz polynomial")

    @property
    def r(self) -> int:
        return len(self.kappa)


@dataclass(frozen=True)
class LieStack:
    """``values = (h, L^1 h, ..., L^{r-1} h, L^r h)``; the last one excludes ``u_i``."""

    values: tuple
    input_row: np.ndarray

    @property
    def r(self) -> int:
        return len(self.values) - 1

    @property
    def h(self):
        return self.values[0]


@dataclass(frozen=True)
class TightenedConstraint:
    """Affine row ``constant + input_coeff . u >= 0``."""

    constant: float
    input_coeff: np.ndarray

    def evaluate(self, u) -> float:
        return float(self.constant + np.dot(self.input_coeff, u))


def relative_lie_values(dblocks, drate, r_offset: float):
    """Lie stack of ``|dp|^2 - r_offset^2`` from relative blocks.

    ``dblocks`` has shape ``(..., n, d)`` and ``drate`` (the relative rate of the
    last block, inputs of agent ``i`` excluded) shape ``(..., d)``.  Returns an
    array ``(..., n + 1)`` of ``h, L^1 h, ..., L^n h``.
    """
    n = dblocks.shape[-2]
    deriv = [dblocks[..., m, :] for m in range(n)] + [drate]
    out = []
    for q in range(n + 1):
        acc = 0.0
        for m in range(q + 1):
            acc = acc + comb(q, m) * np.sum(deriv[m] * deriv[q - m], axis=-1)
        out.append(acc)
    out[0] = out[0] - r_offset ** 2
    return np.stack(out, axis=-1)


def _blocks(x, drift: DriftSpec):
    flat = x.flat if isinstance(x, AgentState) else np.asarray(x)
    if flat.shape[-1] != drift.n * drift.d:
        raise ConfigurationError(
            f"state length {flat.shape[-1]} does not match the drift's n*d = {drift.n * drift.d}")
    return flat, flat.reshape(flat.shape[:-1] + (drift.n, drift.d))


def lie_stack_pair(b: PairBarrier, x_i, x_j, drift_i: DriftSpec, drift_j: DriftSpec,
                   u_j=None, t: float = 0.0) -> LieStack:
    """Lie stack of a pair barrier; ``u_j`` is the neighbour's (planned) input."""
    if (drift_i.n, drift_i.d) != (drift_j.n, drift_j.d):
        raise ConfigurationError("agents of a pair must share (n, d)")
    fi, bi = _blocks(x_i, drift_i)
    fj, bj = _blocks(x_j, drift_j)
    rate = drift_i.jerk(fi, t) - drift_j.jerk(fj, t)
    if u_j is not None:
        rate = rate - np.asarray(u_j)
    vals = relative_lie_values(bi - bj, rate, b.d_min)
    dp = bi[..., 0, :] - bj[..., 0, :]
    return LieStack(tuple(vals[..., q] for q in range(vals.shape[-1])), 2.0 * dp)


def lie_stack_obstacle(b: ObstacleBarrier, x_i, drift_i: DriftSpec, t: float = 0.0) -> LieStack:
    """Lie stack of a static obstacle barrier."""
    fi, bi = _blocks(x_i, drift_i)
    if len(b.center) != drift_i.d:
        raise ConfigurationError("obstacle centre dimension does not match d")
    rel = bi + 0.0
    rel[..., 0, :] = rel[..., 0, :] - np.asarray(b.center)
    vals = relative_lie_values(rel, drift_i.jerk(fi, t), b.effective_radius)
    return LieStack(tuple(vals[..., q] for q in range(vals.shape[-1])), 2.0 * rel[..., 0, :])


def grad_full(b: Union[PairBarrier, ObstacleBarrier], x_i, x_j=None, n: Optional[int] = None,
              d: Optional[int] = None):
    """Gradient of ``h`` with respect to the full stacked state(s).

    Only the position block is nonzero.  For pair barriers ``(g_i, g_j)`` with
    ``g_j = -g_i`` is returned; for obstacles ``(g_i, None)``.
    """
    xi = x_i.flat if isinstance(x_i, AgentState) else np.asarray(x_i)
    if isinstance(x_i, AgentState):
        n, d = x_i.n, x_i.d
    if d is None:
        if isinstance(b, ObstacleBarrier):
            d = len(b.center)
        else:
            raise ConfigurationError("pass d (or AgentState inputs) for pair barriers")
    if isinstance(b, PairBarrier):
        if x_j is None:
            raise ConfigurationError("pair barrier needs both states")
        xj = x_j.flat if isinstance(x_j, AgentState) else np.asarray(x_j)
        dp = xi[..., :d] - xj[..., :d]
    else:
        dp = xi[..., :d] - np.asarray(b.center)
    g = np.zeros(xi.shape, dtype=np.result_type(xi, float))
    g[..., :d] = 2.0 * dp
    if isinstance(b, PairBarrier):
        return g, -g
    return g, None


def _ellipsoid(t) -> Ellipsoid:
    return t.ellipsoid if isinstance(t, TubeParams) else t


def margin_pair(g_i, g_j, tube_i, tube_j) -> float:
    """``delta_ij = sigma_i(g_i) + sigma_j(g_j)``."""
    return support(_ellipsoid(tube_i), g_i) + support(_ellipsoid(tube_j), g_j)


def margin_obstacle(g_io, tube_i) -> float:
    """``delta_iO = sigma_i(g_iO)``."""
    return support(_ellipsoid(tube_i), g_io)


def _phi(stack: LieStack, gains: EcbfGains, delta) -> TightenedConstraint:
    r = gains.r
    if stack.r != r:
        raise ConfigurationError(f"stack has order {stack.r} but gains have r = {r}")
    k = gains.kappa
    constant = stack.values[r]
    for q in range(1, r):
        constant = constant + k[q] * stack.values[q]
    constant = constant + k[0] * (stack.values[0] - delta)
    return TightenedConstraint(constant, np.asarray(stack.input_row))


def phi_tight_pair(stack: LieStack, gains: EcbfGains, delta) -> TightenedConstraint:
    """``L^r h + sum_{q>=1} kappa_q L^q h + kappa_0 (h - delta_ij)`` with row ``2 dp``."""
    return _phi(stack, gains, delta)


def phi_tight_obstacle(stack: LieStack, gains: EcbfGains, delta) -> TightenedConstraint:
    """Obstacle counterpart of :func:`phi_tight_pair`."""
    return _phi(stack, gains, delta)


def phi_standard(stack: LieStack, gains: EcbfGains) -> TightenedConstraint:
    """Untightened eCBF row ``L^r h + sum_q kappa_q L^q h``."""
    r = gains.r
    if stack.r != r:
        raise ConfigurationError(f"stack has order {stack.r} but gains have r = {r}")
    k = gains.kappa
    constant = stack.values[r]
    for q in range(1, r):
        constant = constant + k[q] * stack.values[q]
    constant = constant + k[0] * stack.values[0]
    return TightenedConstraint(constant, np.asarray(stack.input_row))
