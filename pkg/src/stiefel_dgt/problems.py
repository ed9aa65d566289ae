"""Local objectives, decentralized PCA instances and dataset ingestion."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .manifold import DimensionError, ParameterError, relative_gradient

class DegenerateInstanceError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def central_difference(func: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function of a matrix."""
    x = np.array(x, dtype=float)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = func(x)
        x[idx] = orig - h
        fm = func(x)
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


@dataclass
class ProblemInstance:
    """``n`` local objectives ``f_i`` on ``d x r`` matrices.

    Subclasses override the batched hooks (``local_grads``, ``global_grad``)
    when there is a faster route than looping over the callables.
    """

    values: Sequence[Callable[[np.ndarray], float]]
    grads: Sequence[Callable[[np.ndarray], np.ndarray]]
    d: int
    r: int
    reference_solution: np.ndarray | None = None
    f_star: float | None = None
    smoothness_L: float | None = None
    grad_bound_G: float | None = None

    @property
    def n(self) -> int:
        return len(self.values)

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"agent index {i} out of range for n={self.n}")

    def local_value(self, i: int, x) -> float:
        self._check_index(i)
        return float(self.values[i](np.asarray(x, dtype=float)))

    def local_grad(self, i: int, x) -> np.ndarray:
        self._check_index(i)
        return np.asarray(self.grads[i](np.asarray(x, dtype=float)), dtype=float)

    def local_grads(self, X: np.ndarray) -> np.ndarray:
        return np.stack([self.local_grad(i, X[i]) for i in range(self.n)])

    def global_value(self, x) -> float:
        return float(np.mean([self.local_value(i, x) for i in range(self.n)]))

    def global_grad(self, x) -> np.ndarray:
        return np.mean([self.local_grad(i, x) for i in range(self.n)], axis=0)

    def distance_to_solutions(self, x) -> float:
        if self.reference_solution is None:
            raise DegenerateInstanceError("no reference solution attached")
        return float(np.linalg.norm(np.asarray(x) - self.reference_solution))

    def check_gradients(self, rng: np.random.Generator, points: int = 10, rtol: float = 1e-5) -> None:
        for i in range(self.n):
            for _ in range(points):
                x = rng.standard_normal((self.d, self.r))
                fd = central_difference(lambda z: self.local_value(i, z), x)
                g = self.local_grad(i, x)
                err = np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12)
                if err > rtol:
                    raise ValueError(f"gradient of agent {i} disagrees with finite differences (rel {err:.2e})")


@dataclass
class PcaInstance:
    """Per-agent covariances ``C_i`` with weight matrix ``D`` and objective sign.

    Agent ``i`` minimises ``sign * <C_i x, x D>``. ``sign=-1`` gives classical
    PCA (top eigenvectors); ``sign=+1`` is the literal minimisation and picks
    the bottom ones.
    """

    covariances: np.ndarray
    D: np.ndarray
    sign: int = -1

    def __post_init__(self):
        C = np.asarray(self.covariances, dtype=float)
        if C.ndim != 3 or C.shape[1] != C.shape[2]:
            raise DimensionError(f"covariances must have shape (n, d, d), got {C.shape}")
        if np.max(np.abs(C - np.swapaxes(C, 1, 2))) > 1e-9 * max(1.0, np.max(np.abs(C))):
            raise ParameterError("covariances must be symmetric")
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        if np.min(np.linalg.eigvalsh(C)) < -1e-10 * max(1.0, np.max(np.abs(C))):
            raise ParameterError("covariances must be positive semidefinite")
        D = np.asarray(self.D, dtype=float)
        if D.ndim == 2:
            D = np.diag(D)
        if np.any(D <= 0) or np.any(np.diff(D) >= 0):
            raise ParameterError("D must be a strictly decreasing positive diagonal")
        if self.sign not in (1, -1):
            raise ParameterError("sign must be +1 or -1")
        self.covariances = C
        self.D = D

    @property
    def n(self) -> int:
        return self.covariances.shape[0]

    @property
    def d(self) -> int:
        return self.covariances.shape[1]

    @property
    def r(self) -> int:
        return self.D.shape[0]

    @property
    def mean_covariance(self) -> np.ndarray:
        return self.covariances.mean(axis=0)


def pca_objective(inst: PcaInstance, i: int, x) -> float:
    if not 0 <= i < inst.n:
        raise IndexError(f"agent index {i} out of range for n={inst.n}")
    x = np.asarray(x, dtype=float)
    return float(inst.sign * np.sum((inst.covariances[i] @ x) * (x * inst.D)))


def pca_gradient(inst: PcaInstance, i: int, x) -> np.ndarray:
    if not 0 <= i < inst.n:
        raise IndexError(f"agent index {i} out of range for n={inst.n}")
    x = np.asarray(x, dtype=float)
    return 2.0 * inst.sign * (inst.covariances[i] @ x) * inst.D


class PcaProblem(ProblemInstance):
    """:class:`ProblemInstance` backed by a :class:`PcaInstance`, with batched gradients."""

    def __init__(self, inst: PcaInstance, with_reference: bool = True):
        self.inst = inst
        self._Cbar = inst.mean_covariance
        super().__init__(
            values=[lambda x, i=i: pca_objective(inst, i, x) for i in range(inst.n)],
            grads=[lambda x, i=i: pca_gradient(inst, i, x) for i in range(inst.n)],
            d=inst.d,
            r=inst.r,
        )
        bounds = pca_bounds(inst)
        self.smoothness_L = bounds["L"]
        self.grad_bound_G = bounds["G"]
        if with_reference:
            try:
                self.reference_solution, self.f_star = reference_solution_pca(inst)
            except DegenerateInstanceError:
                self.reference_solution, self.f_star = None, None

    def local_grads(self, X):
        return 2.0 * self.inst.sign * (self.inst.covariances @ X) * self.inst.D

    def global_value(self, x):
        x = np.asarray(x, dtype=float)
        return float(self.inst.sign * np.sum((self._Cbar @ x) * (x * self.inst.D)))

    def global_grad(self, x):
        return 2.0 * self.inst.sign * (self._Cbar @ np.asarray(x, dtype=float)) * self.inst.D

    def distance_to_solutions(self, x) -> float:
        """Distance to the nearest column-sign flip of the reference frame."""
        if self.reference_solution is None:
            raise DegenerateInstanceError("no reference solution attached")
        x = np.asarray(x, dtype=float)
        ref = self.reference_solution
        plus = np.sum((x - ref) ** 2, axis=0)
        minus = np.sum((x + ref) ** 2, axis=0)
        return float(np.sqrt(np.sum(np.minimum(plus, minus))))


def pca_bounds(inst: PcaInstance, epsilon: float = 0.5) -> dict:
    """Analytic spectral bounds for the quadratic PCA objectives on ``St^eps``.

    ``L``: smoothness of every local (and the global) objective.
    ``grad_sup``: bound on ``||grad_euclid f||`` for the global objective.
    ``s``: bound on ``||sym(x^T grad_euclid f)||``.
    ``G``: bound on the local relative gradients.
    """
    lam_local = np.array([np.linalg.eigvalsh(C)[-1] for C in inst.covariances])
    lam_bar = np.linalg.eigvalsh(inst.mean_covariance)[-1]
    dmax = inst.D.max()
    dnorm = np.linalg.norm(inst.D)
    e = epsilon
    return {
        "L": float(2.0 * lam_local.max() * dmax),
        "grad_sup": float(2.0 * lam_bar * np.sqrt(1 + e) * dnorm),
        "s": float(2.0 * lam_bar * (1 + e) * dnorm),
        "G": float(2.0 * lam_local.max() * (1 + e) ** 1.5 * dnorm),
    }


def reference_solution_pca(inst: PcaInstance, min_gap: float = 1e-8) -> tuple[np.ndarray, float]:
    """Eigenvector solution of the signed PCA objective and its optimal value."""
    evals, evecs = np.linalg.eigh(inst.mean_covariance)
    r, d = inst.r, inst.d
    if inst.sign < 0:
        idx = np.arange(d - 1, d - 1 - r, -1)
        gap = evals[d - r] - evals[d - r - 1] if r < d else np.inf
    else:
        idx = np.arange(r)
        gap = evals[r] - evals[r - 1] if r < d else np.inf
    chosen = evals[idx]
    inner = np.min(np.abs(np.diff(chosen))) if r > 1 else np.inf
    if min(gap, inner) < min_gap:
        raise DegenerateInstanceError(
            f"spectral gap {min(gap, inner):.3e} below {min_gap:.1e}; solution set is not isolated"
        )
    x = evecs[:, idx]
    value = float(inst.sign * np.sum(inst.D * chosen))
    return x, value


def spectral_gap(inst: PcaInstance) -> float:
    evals = np.linalg.eigvalsh(inst.mean_covariance)
    r, d = inst.r, inst.d
    if r == d:
        return np.inf
    return float(evals[d - r] - evals[d - r - 1]) if inst.sign < 0 else float(evals[r] - evals[r - 1])


def _default_D(r: int) -> np.ndarray:
    return np.arange(r, 0, -1, dtype=float)


def generate_synthetic_pca(
    n: int,
    d: int,
    r: int,
    m_per_agent: int,
    condition_target: float = 1.0,
    seed: int = 0,
    sign: int = -1,
    D=None,
) -> tuple[PcaInstance, PcaProblem]:
    """Gaussian data per agent, each covariance spectrum mapped affinely so that
    ``cond(C_i) == condition_target`` while keeping its top eigenvalue and
    eigenvectors."""
    if condition_target < 1:
        raise ParameterError("condition_target must be >= 1")
    if m_per_agent < d:
        warnings.warn(f"m_per_agent={m_per_agent} < d={d}: local covariances are rank-deficient")
    rng = np.random.default_rng(seed)
    covs = np.empty((n, d, d))
    for i in range(n):
        A = rng.standard_normal((m_per_agent, d))
        evals, evecs = np.linalg.eigh(A.T @ A)
        top, bottom = evals[-1], evals[0]
        floor = top / condition_target
        if top - bottom > 0:
            adjusted = floor + (evals - bottom) * (top - floor) / (top - bottom)
        else:
            adjusted = np.full(d, top)
        C = (evecs * adjusted) @ evecs.T
        covs[i] = 0.5 * (C + C.T)
    inst = PcaInstance(covs, _default_D(r) if D is None else D, sign)
    return inst, PcaProblem(inst)


def generate_planted_pca(
    n: int,
    d: int,
    r: int,
    m_per_agent: int,
    spectrum,
    seed: int = 0,
    sign: int = -1,
    D=None,
) -> tuple[PcaInstance, PcaProblem]:
    """Agents sample ``m`` points from ``N(0, Q diag(spectrum) Q^T)`` with a shared
    random basis ``Q``; ``C_i`` is the local sample covariance.

    Heterogeneity comes only from sampling, so the global covariance keeps the
    planted gaps when ``n * m`` is large.
    """
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.shape != (d,) or np.any(spectrum < 0):
        raise ParameterError("spectrum must be d non-negative values")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    root = Q * np.sqrt(spectrum)
    covs = np.empty((n, d, d))
    for i in range(n):
        A = rng.standard_normal((m_per_agent, d)) @ root.T
        C = A.T @ A / m_per_agent
        covs[i] = 0.5 * (C + C.T)
    inst = PcaInstance(covs, _default_D(r) if D is None else D, sign)
    return inst, PcaProblem(inst)


def default_spectrum(d: int, r: int, top: float = 4.0, bulk: tuple[float, float] = (0.1, 0.5)) -> np.ndarray:
    """``r`` well separated leading values ``top, top-1, ...`` above a flat bulk."""
    lead = top - np.arange(r, dtype=float)
    rest = np.linspace(bulk[1], bulk[0], d - r)
    return np.concatenate([lead, rest])


# -- dataset ingestion -------------------------------------------------------


def write_dmat(path, matrix) -> None:
    """Write u64 rows + u64 cols + row-major f64, all little-endian."""
    a = np.ascontiguousarray(np.asarray(matrix, dtype="<f8"))
    if a.ndim != 2:
        raise DimensionError("DMAT stores 2-d matrices only")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
        fh.write(a.tobytes(order="C"))


def _dmat_shape(raw: bytes) -> tuple[int, int] | None:
    """Header counts if the byte length is consistent with them."""
    if len(raw) < 16:
        return None
    rows, cols = struct.unpack("<QQ", raw[:16])
    return (rows, cols) if len(raw) == 16 + rows * cols * 8 else None


def read_dmat(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DatasetError(f"{path}: too short for a DMAT header")
    rows, cols = struct.unpack("<QQ", raw[:16])
    payload = raw[16:]
    if len(payload) != rows * cols * 8:
        raise DatasetError(f"{path}: expected {rows * cols * 8} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)


def read_csv_matrix(path, header: bool = False) -> np.ndarray:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2, dtype=float)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    return data


def partition_rows(rows: int, n: int, strategy: str = "contiguous") -> list[np.ndarray]:
    if n > rows:
        raise DatasetError(f"cannot split {rows} rows across {n} agents")
    if strategy == "contiguous":
        size = rows // n
        bounds = [i * size for i in range(n)] + [rows]
        return [np.arange(bounds[i], bounds[i + 1]) for i in range(n)]
    if strategy == "round_robin":
        return [np.arange(i, rows, n) for i in range(n)]
    raise ParameterError(f"unknown partition strategy {strategy!r}")


def load_dataset_matrix(
    path,
    n: int,
    r: int,
    row_partition: str = "contiguous",
    center: bool = False,
    header: bool = False,
    sign: int = -1,
    D=None,
) -> PcaInstance:
    """Read a dense samples-by-features matrix (CSV or DMAT) and split its rows.

    Contiguous partitioning gives every agent ``rows // n`` rows and the
    remainder to the last one.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: no such file")
    # CSV by extension; anything else is binary when its length matches the header
    is_dmat = path.suffix.lower() != ".csv" and _dmat_shape(path.read_bytes()) is not None
    data = read_dmat(path) if is_dmat else read_csv_matrix(path, header=header)
    if not np.all(np.isfinite(data)):
        raise DatasetError(f"{path}: non-finite entries")
    if center:
        data = data - data.mean(axis=0)
    parts = partition_rows(data.shape[0], n, row_partition)
    covs = np.stack([data[p].T @ data[p] for p in parts])
    return PcaInstance(covs, _default_D(r) if D is None else D, sign)


def agent_relative_gradients(problem: ProblemInstance, X: np.ndarray) -> np.ndarray:
    return relative_gradient(X, problem.local_grads(X))
