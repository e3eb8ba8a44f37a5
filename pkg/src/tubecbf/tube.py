"""Ancillary feedback synthesis, Lyapunov tubes and ellipsoid geometry.

The error ``z = x - x_bar`` of an agent obeys ``z' = A_K z + G (df + w)`` under
the ancillary law ``u = u_bar - K z``.  A tube is an ellipsoid
``{z : z^T P z <= rho^2}`` that ``z`` cannot leave.  Two certificates are
available:

``"closed-form"``
    ``P`` solves ``A_K^T P + P A_K = -Q`` and ``rho`` is the closed-form radius
    ``2 w_bar lmax(P) / (lmin(Q) - 2 L_f lmax(P))``.  It exists only when
    ``lmin(Q) > 2 L_f lmax(P)``.
``"s-procedure"``
    ``P`` comes from a small semidefinite program that bounds ``df`` by
    ``L_f ||z||`` through a multiplier instead of a norm inequality.  It covers
    high-gain designs for which the closed-form radius does not exist.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (ConfigurationError, InfeasibleTighteningError, NoSolutionError,
                     SynthesisError, TubeInfeasibleError)
from .model import input_matrix, shift_matrix

__all__ = [
    "Ellipsoid",
    "TubeParams",
    "ancillary_gains",
    "gains_from_vector",
    "closed_loop",
    "lyapunov_solve",
    "lyapunov_residual",
    "decay_margin",
    "rpi_radius",
    "synthesize_tube",
    "sprocedure_tube",
    "best_decay_margin",
    "support",
    "support_maximizer",
    "contains",
    "box_tighten",
]


# --------------------------------------------------------------------------
# gains

def closed_loop(K: np.ndarray, n: int, d: int) -> np.ndarray:
    """``A_K = A_0 - G K``."""
    K = np.asarray(K, dtype=float)
    if K.shape != (d, n * d):
        raise ConfigurationError(f"K must be {d}x{n * d}, got {K.shape}")
    return shift_matrix(n, d) - input_matrix(n, d) @ K


def _check_hurwitz(A: np.ndarray, what: str = "A_K") -> None:
    eig = np.linalg.eigvals(A)
    bad = eig[eig.real >= 0]
    if bad.size:
        raise SynthesisError(f"{what} is not Hurwitz; eigenvalues with Re >= 0: {bad}")


def ancillary_gains(poles, n: int, d: int) -> np.ndarray:
    """Companion-form gains placing each axis' closed-loop poles.

    ``poles`` holds ``n`` negative reals used on every axis, or a ``(d, n)``
    array with one set per axis.  Entry ``K[c, p*d + c]`` multiplies block
    ``p`` of axis ``c``, so ``s^n + k_n s^{n-1} + ... + k_1`` has the given roots.
    """
    poles = np.asarray(poles, dtype=complex)
    if poles.ndim == 1:
        poles = np.tile(poles, (d, 1))
    if poles.shape != (d, n):
        raise ConfigurationError(f"expected {n} poles per axis for {d} axes, got {poles.shape}")
    if np.any(np.abs(poles.imag) > 0):
        raise ConfigurationError("only real poles are supported")
    if np.any(poles.real >= 0):
        raise ConfigurationError(f"poles must be negative, got {poles.real}")
    K = np.zeros((d, n * d))
    for c in range(d):
        coeffs = np.real(np.poly(poles[c]))  # leading 1, then k_n ... k_1
        for p in range(n):
            K[c, p * d + c] = coeffs[n - p]
    _check_hurwitz(closed_loop(K, n, d))
    return K


def gains_from_vector(flat: Sequence[float], n: int, d: int,
                      convention: str = "axis-major") -> np.ndarray:
    """Build ``K`` from a flat list of per-axis companion gains.

    ``"axis-major"`` reads ``[k_1^x, ..., k_n^x, k_1^y, ..., k_n^y, ...]``;
    ``"position-major"`` reads ``[k_1^x, k_1^y, k_2^x, k_2^y, ...]``.  Values
    are the gains of ``u = u_bar - K z``, so a vector quoted for
    ``u = u_bar + K_p z`` is passed without its leading minus sign.
    """
    flat = np.asarray(flat, dtype=float).reshape(-1)
    if flat.size != n * d:
        raise ConfigurationError(f"need {n * d} gains, got {flat.size}")
    K = np.zeros((d, n * d))
    for c in range(d):
        for p in range(n):
            if convention == "axis-major":
                K[c, p * d + c] = flat[c * n + p]
            elif convention == "position-major":
                K[c, p * d + c] = flat[p * d + c]
            else:
                raise ConfigurationError(f"unknown gain convention {convention!r}")
    _check_hurwitz(closed_loop(K, n, d))
    return K


# --------------------------------------------------------------------------
# Lyapunov

def lyapunov_solve(A_K: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``A_K^T P + P A_K = -Q`` through its Kronecker form."""
    A = np.asarray(A_K, dtype=float)
    Q = np.asarray(Q, dtype=float)
    m = A.shape[0]
    if A.shape != (m, m) or Q.shape != (m, m):
        raise ConfigurationError("A_K and Q must be square and of equal size")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
        raise ConfigurationError("Q must be symmetric")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() <= 0:
        raise ConfigurationError("Q must be positive definite")
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0):
        raise NoSolutionError(f"A_K is not Hurwitz (eigenvalues {eig}); no positive-definite P")
    eye = np.eye(m)
    # row-major vec: vec(A^T P) = (A^T kron I) vec P, vec(P A) = (I kron A^T) vec P
    lhs = np.kron(A.T, eye) + np.kron(eye, A.T)
    P = np.linalg.solve(lhs, -Q.reshape(-1)).reshape(m, m)
    return 0.5 * (P + P.T)


def lyapunov_residual(A_K, P, Q) -> float:
    """Relative Frobenius residual of the Lyapunov equation."""
    A_K, P, Q = (np.asarray(a, dtype=float) for a in (A_K, P, Q))
    res = A_K.T @ P + P @ A_K + Q
    return float(np.linalg.norm(res) / max(np.linalg.norm(Q), np.finfo(float).tiny))


def decay_margin(P, Q) -> float:
    """Decay margin ``lmin(Q) / (2 lmax(P))`` that ``L_f`` must stay below."""
    return float(np.linalg.eigvalsh(Q).min() / (2.0 * np.linalg.eigvalsh(P).max()))


def rpi_radius(P, Q, L_f: float, w_bar: float) -> float:
    """Smallest radius of the closed-form Lyapunov tube.

    Raises :class:`TubeInfeasibleError` carrying the decay margin and ``L_f``
    when ``lmin(Q) <= 2 L_f lmax(P)``.
    """
    if L_f < 0 or w_bar < 0:
        raise ConfigurationError("L_f and w_bar must be nonnegative")
    lmax = float(np.linalg.eigvalsh(P).max())
    lmin_q = float(np.linalg.eigvalsh(Q).min())
    denom = lmin_q - 2.0 * L_f * lmax
    if denom <= 0:
        margin = lmin_q / (2.0 * lmax)
        raise TubeInfeasibleError(
            f"no RPI radius: decay margin lmin(Q)/(2 lmax(P)) = {margin:.6g} does not "
            f"exceed L_f = {L_f:.6g} (gap {margin - L_f:.6g})",
            decay_margin=margin, lipschitz=float(L_f))
    return 2.0 * w_bar * lmax / denom


def best_decay_margin(A_K: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Largest ``lmin(Q)/(2 lmax(P))`` reachable over all ``Q`` for a fixed ``A_K``.

    The ratio is invariant to scaling ``(P, Q)``, so the problem is normalized to
    ``P <= I`` and ``Q >= 2 t I`` and ``t`` is maximized.  Returns ``(t, P, Q)``.
    """
    import cvxpy as cp

    A = np.asarray(A_K, dtype=float)
    m = A.shape[0]
    P = cp.Variable((m, m), symmetric=True)
    t = cp.Variable()
    Q = -(A.T @ P + P @ A)
    prob = cp.Problem(cp.Maximize(t), [P << np.eye(m), P >> 1e-9 * np.eye(m),
                                       0.5 * (Q + Q.T) >> 2 * t * np.eye(m)])
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise NoSolutionError(f"margin program ended with status {prob.status}")
    Pv = 0.5 * (P.value + P.value.T)
    Qv = -(A.T @ Pv + Pv @ A)
    return decay_margin(Pv, Qv), Pv, 0.5 * (Qv + Qv.T)


# --------------------------------------------------------------------------
# ellipsoids

@dataclass(frozen=True)
class Ellipsoid:
    """``{z : z^T P z <= rho^2}``.

    ``P_inv`` may be supplied when it is known more accurately than
    ``inv(P)`` (badly scaled high-gain tubes).
    """

    P: np.ndarray
    rho: float
    P_inv: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ConfigurationError("P must be square")
        scale = max(1.0, float(np.abs(P).max()))
        if np.abs(P - P.T).max() > 1e-12 * scale:
            raise ConfigurationError("P must be symmetric")
        P = 0.5 * (P + P.T)
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("P must be positive definite") from exc
        if not self.rho >= 0:
            raise ConfigurationError(f"rho must be nonnegative, got {self.rho}")
        P_inv = np.linalg.inv(P) if self.P_inv is None else np.array(self.P_inv, dtype=float)
        P_inv = 0.5 * (P_inv + P_inv.T)
        for a in (P, P_inv):
            a.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "P_inv", P_inv)
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def value(self, z) -> np.ndarray:
        """``z^T P z`` for ``z`` of shape ``(..., m)``."""
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, self.P, z)


def support(e: Ellipsoid, g) -> float:
    """``sup_{z in e} g^T z = rho sqrt(g^T P^{-1} g)``."""
    g = np.asarray(g, dtype=float)
    if e.rho == 0.0:
        return 0.0
    q = float(g @ e.P_inv @ g)
    return e.rho * np.sqrt(max(q, 0.0))


def support_maximizer(e: Ellipsoid, g) -> np.ndarray:
    """Boundary point attaining :func:`support` (zero for ``g = 0``)."""
    g = np.asarray(g, dtype=float)
    Pg = e.P_inv @ g
    q = float(g @ Pg)
    if q <= 0.0:
        return np.zeros_like(g)
    return e.rho * Pg / np.sqrt(q)


def contains(e: Ellipsoid, z) -> bool:
    """Membership with a ``1e-12`` relative allowance on the boundary."""
    return bool(e.value(z) <= e.rho ** 2 * (1.0 + 1e-12))


def box_tighten(box, e: Ellipsoid, M: Optional[np.ndarray] = None):
    """Pontryagin difference of a box and the linear image ``M e``.

    ``box`` is ``(lower, upper)``.  Each finite bound moves inward by
    ``support(e, M^T e_k)``; infinite bounds are left alone.
    """
    lower, upper = (np.array(b, dtype=float) for b in box)
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ConfigurationError("box bounds must be 1-D arrays of equal length")
    M = np.eye(e.dim) if M is None else np.asarray(M, dtype=float)
    if M.shape != (lower.size, e.dim):
        raise ConfigurationError(f"map must be {lower.size}x{e.dim}, got {M.shape}")
    shrink = np.array([support(e, M[k]) for k in range(lower.size)])
    new_lo = np.where(np.isfinite(lower), lower + shrink, lower)
    new_hi = np.where(np.isfinite(upper), upper - shrink, upper)
    bad = np.nonzero(new_lo > new_hi)[0]
    if bad.size:
        k = int(bad[0])
        raise InfeasibleTighteningError(
            f"coordinate {k}: tube extent {shrink[k]:.6g} exceeds the half-width of "
            f"[{lower[k]:.6g}, {upper[k]:.6g}]")
    return new_lo, new_hi


# --------------------------------------------------------------------------
# tube bundles

@dataclass(frozen=True)
class TubeParams:
    """Ancillary gains, Lyapunov pair and radius of one agent's tube.

    ``certificate`` names the argument that makes the ellipsoid invariant.  For
    ``"s-procedure"`` the multipliers ``alpha``, ``lam_f``, ``lam_w`` and the
    coordinate scale are kept in ``multipliers`` so the certificate can be
    re-checked.
    """

    K: np.ndarray
    A_K: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    rho: float
    L_f: float
    w_bar: float
    certificate: str = "closed-form"
    multipliers: dict = field(default_factory=dict)
    P_inv: Optional[np.ndarray] = None

    @property
    def n_state(self) -> int:
        return self.P.shape[0]

    @property
    def ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(self.P, self.rho, self.P_inv)

    def with_rho(self, rho: float) -> "TubeParams":
        """Same tube with another radius (``0`` switches tightening off)."""
        return TubeParams(self.K, self.A_K, self.P, self.Q, float(rho), self.L_f, self.w_bar,
                          self.certificate, dict(self.multipliers), self.P_inv)

    def value(self, z) -> np.ndarray:
        """Lyapunov value ``V(z) = z^T P z``."""
        z = np.asarray(z, dtype=float)
        return np.einsum("...i,ij,...j->...", z, self.P, z)

    def validate(self, n: int, d: int) -> None:
        """Check every structural invariant; raise on the first violation."""
        A_K = closed_loop(self.K, n, d)
        if np.abs(A_K - self.A_K).max() > 1e-9 * max(1.0, np.abs(A_K).max()):
            raise ConfigurationError("A_K does not equal A_0 - G K")
        _check_hurwitz(self.A_K)
        res = lyapunov_residual(self.A_K, self.P, self.Q)
        if res > 1e-8:
            raise ConfigurationError(f"Lyapunov residual {res:.3g} exceeds 1e-8")
        if np.linalg.eigvalsh(self.Q).min() <= 0:
            raise ConfigurationError("Q is not positive definite")
        if self.certificate == "closed-form":
            bound = rpi_radius(self.P, self.Q, self.L_f, self.w_bar)
            if self.rho < bound * (1 - 1e-12):
                raise ConfigurationError(f"rho {self.rho:.6g} below the minimal radius {bound:.6g}")
        elif self.certificate == "s-procedure":
            worst = _sproc_worst_eig(self, n, d)
            if worst >= 0:
                raise ConfigurationError(f"S-procedure certificate fails (max eig {worst:.3g})")
            m = self.multipliers
            need = np.sqrt(m["lam_w"] * self.w_bar ** 2 / m["alpha"]) if self.w_bar else 0.0
            if self.rho < need * (1 - 1e-9):
                raise ConfigurationError(f"rho {self.rho:.6g} below certified radius {need:.6g}")
        elif self.certificate != "none":
            raise ConfigurationError(f"unknown certificate {self.certificate!r}")


def synthesize_tube(K: np.ndarray, n: int, d: int, L_f: float, w_bar: float,
                    Q: Optional[np.ndarray] = None, rho_inflation: float = 1.0) -> TubeParams:
    """Closed-form Lyapunov tube for gains ``K`` (``Q`` defaults to identity).

    Raises :class:`TubeInfeasibleError` when the decay margin does not exceed
    ``L_f``.  Scaling ``Q`` scales ``P`` by the same factor, so the margin does
    not depend on the magnitude of ``Q``.
    """
    if rho_inflation < 1:
        raise ConfigurationError("rho_inflation must be >= 1")
    A_K = closed_loop(K, n, d)
    _check_hurwitz(A_K)
    Q = np.eye(n * d) if Q is None else np.asarray(Q, dtype=float)
    P = lyapunov_solve(A_K, Q)
    rho = rpi_radius(P, Q, L_f, w_bar) * rho_inflation
    return TubeParams(np.asarray(K, dtype=float), A_K, P, Q, rho, float(L_f), float(w_bar))


def _scaling(a: float, n: int, d: int) -> np.ndarray:
    # z_hat_p = a^{(n-1)/2 - p} z_p makes the scaled chain a unit shift in time a t
    return np.kron(np.diag([a ** ((n - 1) / 2.0 - p) for p in range(n)]), np.eye(d))


def _sproc_blocks(A_K, n, d, a):
    T = np.diag(_scaling(a, n, d))
    A_hat = (T[:, None] * A_K / T[None, :]) / a
    G_hat = T[:, None] * input_matrix(n, d) / a
    W = np.diag(1.0 / T ** 2)
    return T, A_hat, G_hat, W


def _sproc_matrix(P_hat, A_hat, G_hat, W, alpha, lam_f, lam_w, L_f):
    m, d = G_hat.shape
    PG = P_hat @ G_hat
    top = A_hat.T @ P_hat + P_hat @ A_hat + alpha * P_hat + lam_f * L_f ** 2 * W
    return np.block([
        [top, PG, PG],
        [PG.T, -lam_f * np.eye(d), np.zeros((d, d))],
        [PG.T, np.zeros((d, d)), -lam_w * np.eye(d)],
    ])


def _sproc_worst_eig(tube: TubeParams, n: int, d: int) -> float:
    m = tube.multipliers
    T, A_hat, G_hat, W = _sproc_blocks(tube.A_K, n, d, m["scale"])
    P_hat = tube.P / T[:, None] / T[None, :]
    M = _sproc_matrix(P_hat, A_hat, G_hat, W, m["alpha"], m["lam_f"], m["lam_w"], tube.L_f)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).max() / max(1.0, np.abs(P_hat).max()))


def sprocedure_tube(K: np.ndarray, n: int, d: int, L_f: float, w_bar: float,
                    scale: Optional[float] = None, alphas: Optional[Sequence[float]] = None,
                    margin: float = 1e-7) -> TubeParams:
    """Invariant ellipsoid certified by an S-procedure inequality.

    With ``V = z^T P z`` the program asks that
    ``V' + alpha V + lam_f (L_f^2 |z|^2 - |df|^2) - lam_w |w|^2 < 0`` for all
    ``(z, df, w)``, which gives ``V' < 0`` on ``V = lam_w w_bar^2 / alpha``.
    Coordinates and time are rescaled by ``scale`` (the closed-loop bandwidth,
    by default the largest gain root) to keep the program well conditioned.
    For each ``alpha`` on a log grid the position extent of the tube is
    minimized; the smallest certified extent wins.
    """
    import cvxpy as cp

    K = np.asarray(K, dtype=float)
    A_K = closed_loop(K, n, d)
    _check_hurwitz(A_K)
    if scale is None:
        scale = float(np.abs(np.linalg.eigvals(A_K)).max())
    alphas = np.geomspace(1e-4, 1.0, 13) if alphas is None else np.asarray(alphas, dtype=float)
    T, A_hat, G_hat, W = _sproc_blocks(A_K, n, d, scale)
    m = n * d
    pos = np.zeros((m, d))
    pos[:d, :d] = np.diag(1.0 / T[:d])

    best = None
    for alpha in alphas:
        P = cp.Variable((m, m), symmetric=True)
        lam_f = cp.Variable(nonneg=True)
        S = cp.Variable((d, d), symmetric=True)
        lam_w = alpha / w_bar ** 2 if w_bar > 0 else alpha  # normalizes rho to 1
        PG = P @ G_hat
        top = A_hat.T @ P + P @ A_hat + alpha * P + lam_f * (L_f ** 2) * W
        M = cp.bmat([[top, PG, PG],
                     [PG.T, -lam_f * np.eye(d), np.zeros((d, d))],
                     [PG.T, np.zeros((d, d)), -lam_w * np.eye(d)]])
        cons = [0.5 * (M + M.T) << -margin * np.eye(m + 2 * d), P >> margin * np.eye(m),
                cp.bmat([[P, pos], [pos.T, S]]) >> 0]
        prob = cp.Problem(cp.Minimize(cp.trace(S)), cons)
        try:
            prob.solve(solver=cp.CLARABEL)
        except cp.SolverError:
            continue
        if prob.status != "optimal" or P.value is None:
            continue
        P_hat = 0.5 * (P.value + P.value.T)
        Mv = _sproc_matrix(P_hat, A_hat, G_hat, W, alpha, lam_f.value, lam_w, L_f)
        if np.linalg.eigvalsh(Mv).max() >= 0 or np.linalg.eigvalsh(P_hat).min() <= 0:
            continue
        P_hat_inv = np.linalg.inv(P_hat)
        extent = float(np.trace(pos.T @ P_hat_inv @ pos))
        if best is None or extent < best[0]:
            best = (extent, alpha, float(lam_f.value), lam_w, P_hat, P_hat_inv)
    if best is None:
        raise TubeInfeasibleError(
            f"S-procedure program infeasible for L_f = {L_f:.6g} with bandwidth {scale:.6g}",
            lipschitz=float(L_f))
    _, alpha, lam_f, lam_w, P_hat, P_hat_inv = best
    P = T[:, None] * P_hat * T[None, :]
    P = 0.5 * (P + P.T)
    P_inv = P_hat_inv / T[:, None] / T[None, :]
    Q = -(A_K.T @ P + P @ A_K)
    Q = 0.5 * (Q + Q.T)
    rho = 1.0 if w_bar > 0 else 0.0
    return TubeParams(K, A_K, P, Q, rho, float(L_f), float(w_bar), "s-procedure",
                      {"alpha": float(alpha), "lam_f": lam_f, "lam_w": float(lam_w),
                       "scale": float(scale)}, 0.5 * (P_inv + P_inv.T))
