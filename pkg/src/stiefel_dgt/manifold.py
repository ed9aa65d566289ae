"""Stiefel-manifold primitives.

Everything here works on plain ``(d, r)`` arrays and, where it is cheap to do
so, on stacks of them with shape ``(..., d, r)``. Off-manifold inputs are
allowed everywhere except :func:`qr_retraction`, which expects a feasible
base point.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

FEASIBILITY_TOL = 1e-12
RANK_TOL = 1e-12


class DimensionError(ValueError):
    pass


class SingularityError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class _OpCounter(threading.local):
    """Per-thread tally of QR/SVD calls.

    ``qr_svd`` counts factorizations made by the optimization path itself,
    ``metric_svd`` those made only to report feasibility.
    """

    def __init__(self):
        self.qr_svd = 0
        self.metric_svd = 0

    def snapshot(self) -> tuple[int, int]:
        return self.qr_svd, self.metric_svd


op_counter = _OpCounter()


@dataclass(frozen=True)
class LandingParams:
    lam: float
    epsilon: float = 0.5

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        check_epsilon(self.epsilon)


@dataclass
class StiefelIterate:
    """A ``d x r`` matrix that may sit off the manifold.

    The feasibility residual is cached on first access; assigning a new
    ``data`` array drops the cache.
    """

    data: np.ndarray
    _residual: float | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.data = _as_frame(self.data)

    def __setattr__(self, name, value):
        if name == "data":
            value = _as_frame(value)
            object.__setattr__(self, "_residual", None)
        object.__setattr__(self, name, value)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def r(self) -> int:
        return self.data.shape[1]

    @property
    def residual(self) -> float:
        if self._residual is None:
            object.__setattr__(self, "_residual", feasibility_residual(self.data))
        return self._residual


def _as_frame(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-d frame, got shape {x.shape}")
    d, r = x.shape
    if r < 1 or r > d:
        raise DimensionError(f"need 1 <= r <= d, got d={d}, r={r}")
    if not np.all(np.isfinite(x)):
        raise ValueError("frame has non-finite entries")
    return x


def check_epsilon(epsilon: float) -> float:
    if not 0.0 < epsilon < 0.75:
        raise ParameterError(f"epsilon must lie in (0, 3/4), got {epsilon}")
    return epsilon


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {a.shape}")
    return a


def _pair(x, g) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if x.shape != g.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {g.shape}")
    return x, g


def skew(a) -> np.ndarray:
    a = _square(a)
    return 0.5 * (a - np.swapaxes(a, -1, -2))


def sym(a) -> np.ndarray:
    a = _square(a)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def gram_residual(x) -> np.ndarray:
    """``x^T x - I``, batched over leading axes."""
    x = np.asarray(x, dtype=float)
    return np.swapaxes(x, -1, -2) @ x - np.eye(x.shape[-1])


def feasibility_residual(x) -> float | np.ndarray:
    return np.linalg.norm(gram_residual(x), axis=(-2, -1))


def relative_gradient(x, euclid_grad) -> np.ndarray:
    """``skew(G x^T) x`` evaluated as ``(G (x^T x) - x (G^T x)) / 2``.

    The factored form never builds a ``d x d`` matrix.
    """
    x, g = _pair(x, euclid_grad)
    xt = np.swapaxes(x, -1, -2)
    gt = np.swapaxes(g, -1, -2)
    return 0.5 * (g @ (xt @ x) - x @ (gt @ x))


def penalty(x) -> float | np.ndarray:
    return 0.25 * np.sum(gram_residual(x) ** 2, axis=(-2, -1))


def penalty_gradient(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x @ gram_residual(x)


def landing_field(x, euclid_grad, params: LandingParams) -> np.ndarray:
    x, g = _pair(x, euclid_grad)
    return relative_gradient(x, g) + params.lam * penalty_gradient(x)


def tangent_projection(x, v) -> np.ndarray:
    """Euclidean-metric projection of ``v`` onto the tangent space at ``x``."""
    x, v = _pair(x, v)
    return v - x @ sym(np.swapaxes(x, -1, -2) @ v)


def _batch(x: np.ndarray) -> int:
    return int(np.prod(x.shape[:-2], dtype=int))


def project_to_stiefel(x, metric: bool = False) -> np.ndarray:
    """Closest feasible frame in Frobenius norm (``U V^T`` of the thin SVD).

    ``metric=True`` books the SVD as reporting work rather than as part of an
    optimisation step.
    """
    x = np.asarray(x, dtype=float)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if metric:
        op_counter.metric_svd += _batch(x)
    else:
        op_counter.qr_svd += _batch(x)
    if s.min() < RANK_TOL:
        raise SingularityError(f"rank-deficient frame, smallest singular value {s.min():.3e}")
    return u @ vt


def distance_to_stiefel(x) -> float | np.ndarray:
    """``||x - Proj_St(x)||_F``, batched; counted as a metric-only SVD."""
    x = np.asarray(x, dtype=float)
    s = np.linalg.svd(x, compute_uv=False)
    op_counter.metric_svd += _batch(x)
    return np.sqrt(np.sum((s - 1.0) ** 2, axis=-1))


def qr_retraction(x, tangent_step) -> np.ndarray:
    x, v = _pair(x, tangent_step)
    q, r = np.linalg.qr(x + v)
    op_counter.qr_svd += _batch(x)
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    if np.min(np.abs(diag)) < RANK_TOL:
        raise SingularityError("retraction target is rank-deficient")
    signs = np.where(diag < 0, -1.0, 1.0)
    return q * signs[..., None, :]


def in_safety_region(x, epsilon: float) -> bool:
    check_epsilon(epsilon)
    return bool(feasibility_residual(x) <= epsilon)


def random_stiefel(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    return q * np.sign(np.diagonal(rr))


def random_in_safety_region(rng: np.random.Generator, d: int, r: int, radius: float) -> np.ndarray:
    """Random frame whose residual ``||x^T x - I||_F`` is at most ``radius``.

    Draws a feasible frame, then rescales its singular values so that the
    residual is a uniform fraction of ``radius``.
    """
    q = random_stiefel(rng, d, r)
    w = random_stiefel(rng, r, r)
    target = radius * rng.uniform()
    direction = rng.standard_normal(r)
    direction /= np.linalg.norm(direction)
    # singular values s_j with sum_j (s_j^2 - 1)^2 = target^2
    sq = 1.0 + target * direction
    return (q * np.sqrt(sq)) @ w.T
