"""Communication graphs, Laplacians and the weighted formation stability error.

Edge convention: ``a_ij > 0`` means agent ``i`` receives information from
agent ``j``; ``b_i0 > 0`` means agent ``i`` hears the leader.  Agents are
indexed ``0..N-1`` and the leader is separate.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "Graph",
    "FormationSpec",
    "laplacian",
    "augmented",
    "spanning_tree_check",
    "proximity_augment",
    "stability_error",
    "stability_gain_map",
    "stability_error_jacobian",
]


@dataclass(frozen=True)
class Graph:
    """Weighted follower graph plus leader pinning weights."""

    weights: np.ndarray
    leader_weights: np.ndarray
    undirected: bool = True

    def __post_init__(self):
        A = np.array(self.weights, dtype=float)
        b = np.array(self.leader_weights, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError("adjacency must be square")
        if b.size != A.shape[0]:
            raise ConfigurationError("need one leader weight per agent")
        if np.any(A < 0) or np.any(b < 0):
            raise ConfigurationError("weights must be nonnegative")
        if np.any(np.diag(A) != 0):
            raise ConfigurationError("adjacency diagonal must be zero")
        if self.undirected and not np.array_equal(A, A.T):
            raise ConfigurationError("undirected graph needs a symmetric adjacency")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", A)
        object.__setattr__(self, "leader_weights", b)

    @property
    def n_agents(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_edges(cls, n_agents: int, edges: Sequence, leader_links: Sequence,
                   undirected: bool = True) -> "Graph":
        """Build from ``(i, j[, weight])`` edges and ``(i[, weight])`` leader links."""
        A = np.zeros((n_agents, n_agents))
        b = np.zeros(n_agents)
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            A[i, j] = w
            if undirected:
                A[j, i] = w
        for link in leader_links:
            i, w = (link, 1.0) if np.isscalar(link) else (int(link[0]),
                                                           float(link[1]) if len(link) > 1 else 1.0)
            b[int(i)] = w
        return cls(A, b, undirected)

    def neighbors(self, i: int) -> list[int]:
        """Agents ``j`` with ``a_ij > 0``."""
        return [int(j) for j in np.nonzero(self.weights[i])[0]]

    def edges(self) -> list[tuple[int, int]]:
        """Edge list; each undirected edge appears once as ``(i, j)`` with ``i < j``."""
        idx = np.argwhere(self.weights > 0)
        if self.undirected:
            idx = idx[idx[:, 0] < idx[:, 1]]
        return [(int(i), int(j)) for i, j in idx]


def laplacian(g: Graph) -> np.ndarray:
    """``L = D - A`` with ``D`` the diagonal of row sums."""
    A = g.weights
    return np.diag(A.sum(axis=1)) - A


def augmented(g: Graph) -> np.ndarray:
    """``L + B_0``."""
    return laplacian(g) + np.diag(g.leader_weights)


def spanning_tree_check(g: Graph) -> bool:
    """True iff every agent is reachable from the leader along directed edges."""
    reached = np.asarray(g.leader_weights > 0)
    queue = deque(np.nonzero(reached)[0])
    reached = reached.copy()
    while queue:
        j = queue.popleft()
        for i in np.nonzero(g.weights[:, j] > 0)[0]:
            if not reached[i]:
                reached[i] = True
                queue.append(i)
    return bool(np.all(reached))


def proximity_augment(g: Graph, positions, phi: float) -> Graph:
    """Add unit-weight symmetric edges between unconnected agents closer than ``phi``."""
    if not phi > 0:
        raise ConfigurationError("phi must be positive")
    pos = np.asarray(positions, dtype=float)
    if pos.shape[0] != g.n_agents:
        raise ConfigurationError("need one position per agent")
    A = g.weights.copy()
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    close = (dist <= phi) & ~np.eye(g.n_agents, dtype=bool)
    new = close & (A == 0) & (A.T == 0)
    A[new] = 1.0
    return Graph(A, g.leader_weights.copy(), g.undirected and np.array_equal(A, A.T))


@dataclass(frozen=True)
class FormationSpec:
    """Desired offsets ``psi_p^i`` per agent and block, plus the leader's."""

    offsets: np.ndarray
    leader_offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        psi = np.array(self.offsets, dtype=float)
        if psi.ndim != 3:
            raise ConfigurationError("offsets must have shape (N, n, d)")
        lead = (np.zeros(psi.shape[1:]) if self.leader_offsets is None
                else np.array(self.leader_offsets, dtype=float))
        if lead.shape != psi.shape[1:]:
            raise ConfigurationError("leader offsets must have shape (n, d)")
        psi.setflags(write=False)
        lead.setflags(write=False)
        object.__setattr__(self, "offsets", psi)
        object.__setattr__(self, "leader_offsets", lead)

    @classmethod
    def from_positions(cls, positions, n: int) -> "FormationSpec":
        """Position offsets only; higher blocks get zero offsets."""
        pos = np.asarray(positions, dtype=float)
        psi = np.zeros((pos.shape[0], n, pos.shape[1]))
        psi[:, 0, :] = pos
        return cls(psi)

    @property
    def shape(self) -> tuple:
        return self.offsets.shape


def _check_lambda(lam, n):
    lam = np.asarray(lam, dtype=float)
    if lam.size != n:
        raise ConfigurationError(f"need {n} lambda coefficients, got {lam.size}")
    if n > 1:
        roots = np.roots(lam[::-1])
        if lam[-1] == 0 or np.any(roots.real >= 0):
            raise ConfigurationError(f"lambda {tuple(lam)} does not define a Hurwitz polynomial")
    elif lam[0] <= 0:
        raise ConfigurationError("lambda_1 must be positive")
    return lam


def stability_gain_map(lam, n: int, d: int) -> np.ndarray:
    """``Lambda`` with ``Lambda x = sum_p lambda_p x_p`` (shape ``d x n*d``)."""
    lam = np.asarray(lam, dtype=float)
    return np.kron(lam[None, :], np.eye(d))


def stability_error(i: int, states, leader_state, f: FormationSpec, lam, nu, g: Graph):
    """Local weighted stability error ``r^i`` in ``R^d``.

    ``states`` is ``(N, n*d)`` (true or nominal states of every agent) and
    ``leader_state`` is ``(n*d,)``.
    """
    N, n, d = f.shape
    X = np.asarray(states)
    x0 = np.asarray(leader_state)
    if X.shape != (N, n * d) or x0.shape != (n * d,):
        raise ConfigurationError(f"states must be ({N}, {n * d}) and leader ({n * d},)")
    if g.n_agents != N:
        raise ConfigurationError("graph and formation disagree on the number of agents")
    lam = _check_lambda(lam, n)
    nu1, nu2 = nu
    Lam = stability_gain_map(lam, n, d)
    e = X - f.offsets.reshape(N, n * d)
    e0 = x0 - f.leader_offsets.reshape(n * d)
    a = g.weights[i]
    rel = a.sum() * e[i] - a @ e
    return -nu1 * (Lam @ rel) - nu2 * g.leader_weights[i] * (Lam @ (e[i] - e0))


def stability_error_jacobian(i: int, f: FormationSpec, lam, nu, g: Graph) -> np.ndarray:
    """Derivative of ``r^i`` with respect to ``x^i`` (shape ``d x n*d``)."""
    N, n, d = f.shape
    lam = _check_lambda(lam, n)
    c = nu[0] * g.weights[i].sum() + nu[1] * g.leader_weights[i]
    return -c * stability_gain_map(lam, n, d)
