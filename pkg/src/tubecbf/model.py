"""Brunovsky-form agent dynamics, disturbance signals and fixed-step integration.

States are stored flat and block-major: ``[x_1, x_2, ..., x_n]`` with every
block in ``R^d`` (position, velocity, acceleration, ...).  Only the last block
carries the nonlinearity, the input and the disturbance.

All drift functions accept arrays of shape ``(..., n*d)`` and also work on
complex arrays, which is what :func:`jerk_jacobian` relies on for
complex-step differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError

__all__ = [
    "AgentState",
    "DriftSpec",
    "DisturbanceSignal",
    "VectorField",
    "DRIFT_KINDS",
    "drift_eval",
    "jerk_jacobian",
    "disturbance_eval",
    "disturbance_bound",
    "rk4",
    "rk4_step",
    "lipschitz_estimate",
    "shift_matrix",
    "input_matrix",
]


@dataclass(frozen=True)
class AgentState:
    """Stacked state of one agent: ``n`` blocks of dimension ``d``."""

    flat: np.ndarray
    n: int
    d: int

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=float).reshape(-1)
        if self.n < 1 or self.d < 1:
            raise ConfigurationError(f"need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if flat.size != self.n * self.d:
            raise ConfigurationError(
                f"state has {flat.size} entries, expected n*d = {self.n * self.d}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[float]]) -> "AgentState":
        arr = np.asarray(blocks, dtype=float)
        if arr.ndim != 2:
            raise ConfigurationError("blocks must be a list of equal-length vectors")
        return cls(arr.reshape(-1), arr.shape[0], arr.shape[1])

    @classmethod
    def zeros(cls, n: int, d: int) -> "AgentState":
        return cls(np.zeros(n * d), n, d)

    @property
    def blocks(self) -> np.ndarray:
        return self.flat.reshape(self.n, self.d)

    def block(self, p: int) -> np.ndarray:
        """Block ``p`` (0-based: 0 is position)."""
        return self.blocks[p]

    @property
    def position(self) -> np.ndarray:
        return self.blocks[0]


def _flat(x, n=None, d=None) -> np.ndarray:
    if isinstance(x, AgentState):
        if (n is not None and x.n != n) or (d is not None and x.d != d):
            raise ConfigurationError(
                f"state is ({x.n}, {x.d}) blocks, expected ({n}, {d})")
        return x.flat
    return np.asarray(x)


# --------------------------------------------------------------------------
# drift library

def _chain_cubic(blocks, t, prm):
    # -k_a (acc + lin1 pos + lin2 vel + cubic pos^3 - tanh_amp tanh(tanh_gain pos)
    #       - sin_amp sin(freq t + phase))
    p, v, a = blocks[..., 0, :], blocks[..., 1, :], blocks[..., 2, :]
    inner = a + prm["lin1"] * p + prm["lin2"] * v + prm["cubic"] * p ** 3
    if prm.get("tanh_amp", 0.0):
        inner = inner - prm["tanh_amp"] * np.tanh(prm["tanh_gain"] * p)
    if prm.get("sin_amp", 0.0):
        freq = np.asarray(prm["sin_freq"], dtype=float)
        phase = np.asarray(prm["sin_phase"], dtype=float)
        inner = inner - prm["sin_amp"] * np.sin(freq * t + phase)
    return -prm["k_a"] * inner


def _follower2(blocks, t, prm):
    p, v, a = blocks[..., 0, :], blocks[..., 1, :], blocks[..., 2, :]
    base = a + prm["lin1"] * p + prm["lin2"] * v + prm["cubic"] * p ** 3
    other = p[..., ::-1]
    cross = prm["cross"] * other ** 2 * np.tanh(p)
    return -prm["k_a"] * (base - cross)


def _follower3(blocks, t, prm):
    p, v, a = blocks[..., 0, :], blocks[..., 1, :], blocks[..., 2, :]
    freq = np.asarray(prm["sin_freq"], dtype=float)
    phase = np.asarray(prm["sin_phase"], dtype=float)
    inner = (a + prm["tanh_pos"] * np.tanh(p) + prm["tanh_vel"] * np.tanh(v)
             - prm["sin_amp"] * np.sin(freq * t + phase))
    return -prm["k_a"] * inner


def _follower4(blocks, t, prm):
    p, v, a = blocks[..., 0, :], blocks[..., 1, :], blocks[..., 2, :]
    px, py = p[..., 0], p[..., 1]
    coupling = np.stack([(px + py) ** 3, -(px - py) ** 3], axis=-1)
    inner = a + prm["lin1"] * p + prm["lin2"] * v + prm["coupling"] * coupling
    return -prm["k_a"] * inner


def _polynomial(blocks, t, prm):
    out = 0.0 * blocks[..., 0, :]
    for p, coeffs in enumerate(prm["coefficients"]):
        x = blocks[..., p, :]
        term = 0.0 * x
        for c in reversed(coeffs):
            term = term * x + c
        out = out + term
    return out


@dataclass(frozen=True)
class _DriftKind:
    func: Callable
    defaults: Mapping[str, object]
    n: Optional[int] = 3
    d: Optional[int] = 2
    time_varying: bool = False


# Follower k_a values are not listed in the source example; they default to the leader's 5.
DRIFT_KINDS: dict[str, _DriftKind] = {
    "leader": _DriftKind(_chain_cubic, {
        "k_a": 5.0, "lin1": 0.36, "lin2": 0.84, "cubic": 0.15,
        "sin_amp": 0.4, "sin_freq": [0.8, 0.8], "sin_phase": [0.0, np.pi / 2]},
        time_varying=True),
    "follower1": _DriftKind(_chain_cubic, {
        "k_a": 5.0, "lin1": 0.49, "lin2": 1.12, "cubic": 0.12,
        "tanh_amp": 0.25, "tanh_gain": 0.6}),
    "follower2": _DriftKind(_follower2, {
        "k_a": 5.0, "lin1": 0.36, "lin2": 0.84, "cubic": 0.18, "cross": 0.15}),
    "follower3": _DriftKind(_follower3, {
        "k_a": 5.0, "tanh_pos": 0.25, "tanh_vel": 0.9, "sin_amp": 0.20,
        "sin_freq": [0.7, 0.9], "sin_phase": [0.0, np.pi / 3]}, time_varying=True),
    "follower4": _DriftKind(_follower4, {
        "k_a": 5.0, "lin1": 0.4225, "lin2": 0.975, "coupling": 0.08}),
    "follower5": _DriftKind(_chain_cubic, {
        "k_a": 5.0, "lin1": 0.3025, "lin2": 0.88, "cubic": 0.15,
        "tanh_amp": 0.20, "tanh_gain": 0.5}),
    "custom-polynomial": _DriftKind(_polynomial, {"coefficients": [[0.0]]},
                                    n=None, d=None),
}


@dataclass(frozen=True)
class DriftSpec:
    """Nonlinearity ``f(x, t)`` of the last block.

    ``kind`` selects a family from :data:`DRIFT_KINDS`; ``params`` overrides its
    coefficients.  ``custom-polynomial`` takes ``coefficients``: one list of
    polynomial coefficients (constant term first) per block, applied axis-wise.
    """

    kind: str
    params: Mapping[str, object] = field(default_factory=dict)
    n: int = 3
    d: int = 2

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ConfigurationError(
                f"unknown drift kind {self.kind!r}; choose from {sorted(DRIFT_KINDS)}")
        entry = DRIFT_KINDS[self.kind]
        unknown = set(self.params) - set(entry.defaults)
        if unknown:
            raise ConfigurationError(
                f"unknown parameters {sorted(unknown)} for drift kind {self.kind!r}")
        if entry.n is not None and (self.n, self.d) != (entry.n, entry.d):
            raise ConfigurationError(
                f"drift kind {self.kind!r} needs n={entry.n}, d={entry.d}")
        merged = {**entry.defaults, **dict(self.params)}
        if self.kind == "custom-polynomial":
            coeffs = [list(map(float, c)) for c in merged["coefficients"]]
            if len(coeffs) > self.n:
                raise ConfigurationError("more coefficient lists than blocks")
            merged["coefficients"] = coeffs
        object.__setattr__(self, "_resolved", merged)

    @property
    def resolved_params(self) -> dict:
        return dict(self._resolved)

    @property
    def time_varying(self) -> bool:
        return DRIFT_KINDS[self.kind].time_varying

    def jerk(self, x, t: float = 0.0):
        """Evaluate ``f(x, t)`` for flat states of shape ``(..., n*d)``."""
        x = _flat(x, self.n, self.d)
        if x.shape[-1] != self.n * self.d:
            raise ConfigurationError(
                f"state length {x.shape[-1]} does not match n*d = {self.n * self.d}")
        blocks = x.reshape(x.shape[:-1] + (self.n, self.d))
        return DRIFT_KINDS[self.kind].func(blocks, t, self._resolved)


def drift_eval(spec: DriftSpec, x, t: float = 0.0):
    """Input-free vector field ``F_x``: shifted blocks plus ``f`` in the last one."""
    x = _flat(x, spec.n, spec.d)
    f = spec.jerk(x, t)
    return np.concatenate([x[..., spec.d:], f], axis=-1)


def jerk_jacobian(spec: DriftSpec, x, t: float = 0.0, step: float = 1e-30):
    """Jacobian of ``f`` with respect to the flat state, shape ``(..., d, n*d)``.

    Uses complex-step differentiation, so it is exact to rounding.
    """
    x = np.asarray(_flat(x, spec.n, spec.d), dtype=float)
    m = spec.n * spec.d
    xc = x[..., None, :] + 1j * step * np.eye(m)
    jac = spec.jerk(xc, t).imag / step
    return np.swapaxes(jac, -1, -2)


# --------------------------------------------------------------------------
# disturbances

@dataclass(frozen=True)
class DisturbanceSignal:
    """Per-channel sinusoids ``A_c sin(omega_c t + phi_c)``."""

    amplitude: tuple
    frequency: tuple
    phase: tuple

    def __post_init__(self):
        amp = tuple(float(a) for a in self.amplitude)
        freq = tuple(float(w) for w in self.frequency)
        phase = tuple(float(p) for p in self.phase)
        if not (len(amp) == len(freq) == len(phase)):
            raise ConfigurationError("amplitude, frequency and phase lengths differ")
        if any(a < 0 for a in amp):
            raise ConfigurationError("disturbance amplitudes must be nonnegative")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "frequency", freq)
        object.__setattr__(self, "phase", phase)

    @classmethod
    def zero(cls, d: int) -> "DisturbanceSignal":
        return cls((0.0,) * d, (0.0,) * d, (0.0,) * d)

    @property
    def d(self) -> int:
        return len(self.amplitude)

    def scaled(self, factor: float) -> "DisturbanceSignal":
        return DisturbanceSignal(tuple(factor * a for a in self.amplitude),
                                 self.frequency, self.phase)

    def __call__(self, t):
        return disturbance_eval(self, t)


def disturbance_eval(sig: DisturbanceSignal, t):
    """Disturbance vector at time ``t`` (scalar ``t`` gives shape ``(d,)``)."""
    t = np.asarray(t, dtype=float)[..., None]
    amp = np.asarray(sig.amplitude)
    return amp * np.sin(np.asarray(sig.frequency) * t + np.asarray(sig.phase))


def disturbance_bound(sig: DisturbanceSignal) -> float:
    """Euclidean norm of the amplitude vector, an upper bound on ``||w(t)||``."""
    return float(np.linalg.norm(sig.amplitude))


# --------------------------------------------------------------------------
# integration

def shift_matrix(n: int, d: int) -> np.ndarray:
    """``A_0``: identity blocks on the first block super-diagonal."""
    return np.kron(np.eye(n, k=1), np.eye(d))


def input_matrix(n: int, d: int) -> np.ndarray:
    """``G``: injects an ``R^d`` signal into the last block."""
    e = np.zeros((n, 1))
    e[-1, 0] = 1.0
    return np.kron(e, np.eye(d))


class VectorField:
    """``x' = F_x(x, t) + G (u + w(t))`` for one agent."""

    def __init__(self, drift: DriftSpec, disturbance: Optional[DisturbanceSignal] = None):
        self.drift = drift
        self.disturbance = disturbance
        self.n, self.d = drift.n, drift.d

    def disturbance_at(self, t: float):
        if self.disturbance is None:
            return None
        return disturbance_eval(self.disturbance, t)

    def __call__(self, x, u=None, t: float = 0.0, w=None):
        out = drift_eval(self.drift, x, t)
        extra = 0.0
        if u is not None:
            extra = extra + u
        if w is not None:
            extra = extra + w
        if u is None and w is None:
            return out
        return np.concatenate([out[..., :-self.d], out[..., -self.d:] + extra], axis=-1)


def rk4(fun: Callable, y, t: float, dt: float):
    """One classical Runge-Kutta step of ``y' = fun(y, t)``."""
    k1 = fun(y, t)
    k2 = fun(y + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = fun(y + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = fun(y + dt * k3, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(field, x, u=None, t: float = 0.0, dt: float = 0.1):
    """RK4 step with ``u`` and the disturbance held at their values at ``t``."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    x = _flat(x)
    w = field.disturbance_at(t) if hasattr(field, "disturbance_at") else None
    if w is None:
        fun = lambda y, s: field(y, u, s)  # noqa: E731
    else:
        fun = lambda y, s: field(y, u, s, w)  # noqa: E731
    out = rk4(fun, x, t, dt)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"RK4 step produced non-finite state at t={t}")
    return out


def lipschitz_estimate(spec: DriftSpec, box, samples: int = 4000, inflation: float = 1.2,
                       seed: int = 0, t_range: tuple = (0.0, 100.0)) -> float:
    """Estimate ``L_f`` over an axis-aligned box by sampling Jacobian norms.

    ``box`` is ``(lower, upper)`` over the flat state.  The sampled points are
    uniform draws plus the box corners (when there are at most 4096) and the
    centre; the largest spectral norm of ``df/dx`` is multiplied by
    ``inflation``.
    """
    lower, upper = (np.asarray(b, dtype=float) for b in box)
    m = spec.n * spec.d
    if lower.shape != (m,) or upper.shape != (m,):
        raise ConfigurationError(f"box bounds must have length {m}")
    if np.any(upper < lower):
        raise ConfigurationError("box is empty")
    if samples < 2:
        raise ConfigurationError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    pts = [lower + (upper - lower) * rng.random((samples, m)), 0.5 * (lower + upper)[None]]
    if m <= 12:
        corners = np.array(np.meshgrid(*[[lo, hi] for lo, hi in zip(lower, upper)],
                                       indexing="ij")).reshape(m, -1).T
        pts.append(corners)
    pts = np.concatenate(pts)
    times = [0.0]
    if spec.time_varying:
        times = [0.0] + list(rng.uniform(*t_range, size=7))
    best = 0.0
    for t in times:
        jac = jerk_jacobian(spec, pts, t)
        best = max(best, float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))))
    return inflation * best
