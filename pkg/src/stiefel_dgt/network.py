"""Communication graphs and their doubly stochastic mixing matrices."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .manifold import DimensionError, ParameterError

SYM_TOL = 1e-12
STOCH_TOL = 1e-12


class InvariantError(ValueError):
    pass


class ConnectivityError(ValueError):
    pass


@dataclass(frozen=True)
class MixingMatrix:
    """Validated symmetric doubly stochastic matrix with cached ``sigma_W``."""

    W: np.ndarray
    edges: tuple[tuple[int, int], ...] | None = None
    sigma_W: float = field(init=False)

    def __post_init__(self):
        W = np.array(self.W, dtype=float)
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        validate_mixing(W, self.edges)
        object.__setattr__(self, "sigma_W", second_singular_value(W))
        if self.sigma_W >= 1.0 - 1e-12:
            raise ConnectivityError(f"graph is disconnected (sigma_W = {self.sigma_W:.6f})")

    @property
    def n(self) -> int:
        return self.W.shape[0]


def validate_mixing(W: np.ndarray, edges=None) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InvariantError(f"mixing matrix must be square, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvariantError("mixing matrix has non-finite entries")
    if np.max(np.abs(W - W.T)) > SYM_TOL:
        raise InvariantError("mixing matrix is not symmetric")
    if np.min(W) < 0:
        raise InvariantError("mixing matrix has negative entries")
    if np.max(np.abs(W.sum(axis=1) - 1.0)) > STOCH_TOL:
        raise InvariantError("rows of the mixing matrix do not sum to 1")
    if edges is not None:
        allowed = np.eye(W.shape[0], dtype=bool)
        for i, j in edges:
            allowed[i, j] = allowed[j, i] = True
        if np.any((W > 0) & ~allowed):
            raise InvariantError("mixing matrix has weight on a non-edge")


def second_singular_value(W) -> float:
    """Largest ``|eigenvalue|`` of a symmetric ``W`` once the all-ones direction is removed."""
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    if n == 1:
        return 0.0
    validate_mixing(W)
    deflated = W - np.full((n, n), 1.0 / n)
    eig = np.linalg.eigvalsh(0.5 * (deflated + deflated.T))
    return float(np.max(np.abs(eig)))


def ring_edges(n: int) -> list[tuple[int, int]]:
    return sorted({tuple(sorted((i, (i + 1) % n))) for i in range(n)})


def star_edges(n: int) -> list[tuple[int, int]]:
    return [(0, i) for i in range(1, n)]


def path_edges(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def complete_edges(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def build_ring(n: int, self_weight: float = 0.8) -> MixingMatrix:
    if n < 3:
        raise ParameterError(f"a ring needs n >= 3, got {n}")
    if not 0.0 < self_weight < 1.0:
        raise ParameterError(f"self_weight must lie in (0, 1), got {self_weight}")
    W = np.zeros((n, n))
    off = 0.5 * (1.0 - self_weight)
    for i in range(n):
        W[i, (i + 1) % n] += off
        W[i, (i - 1) % n] += off
    np.fill_diagonal(W, self_weight)
    return MixingMatrix(W, tuple(ring_edges(n)))


def build_complete(n: int) -> MixingMatrix:
    if n < 1:
        raise ParameterError("n must be positive")
    return MixingMatrix(np.full((n, n), 1.0 / n), tuple(complete_edges(n)))


def is_connected(edges, n: int) -> bool:
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        for j in adj[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == n


def build_metropolis(edges, n: int) -> MixingMatrix:
    """Metropolis constant weights ``1 / (1 + max(deg_i, deg_j))``."""
    edges = sorted({tuple(sorted((int(i), int(j)))) for i, j in edges if i != j})
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ParameterError(f"edge {(i, j)} out of range for n={n}")
    if not is_connected(edges, n):
        raise ConnectivityError("graph is not connected")
    deg = np.zeros(n, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    W = np.zeros((n, n))
    for i, j in edges:
        W[i, j] = W[j, i] = 1.0 / (1 + max(deg[i], deg[j]))
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return MixingMatrix(W, tuple(edges))


def build_topology(name: str, n: int, self_weight: float | None = None) -> MixingMatrix:
    """Named topology. ``ring`` uses constant weights when ``self_weight`` is given,
    Metropolis weights otherwise; the rest always use Metropolis weights."""
    if name == "complete":
        return build_complete(n)
    if name == "ring" and self_weight is not None:
        return build_ring(n, self_weight)
    makers = {"ring": ring_edges, "star": star_edges, "path": path_edges}
    if name not in makers:
        raise ParameterError(f"unknown topology {name!r}")
    return build_metropolis(makers[name](n), n)


def mix(W: MixingMatrix | np.ndarray, stacked: np.ndarray) -> np.ndarray:
    """One gossip round: block ``i`` of the output is ``sum_j W_ij * block_j``."""
    Wm = W.W if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)
    stacked = np.asarray(stacked, dtype=float)
    n = Wm.shape[0]
    if stacked.shape[0] != n:
        raise DimensionError(f"expected {n} blocks, got {stacked.shape[0]}")
    flat = stacked.reshape(n, -1)
    return (Wm @ flat).reshape(stacked.shape)


def consensus_deviation(stacked: np.ndarray) -> np.ndarray:
    return stacked - stacked.mean(axis=0, keepdims=True)
