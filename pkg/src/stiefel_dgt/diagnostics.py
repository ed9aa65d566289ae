"""Per-iteration metrics, the linear-system matrices behind the stability and
local-rate results, spectral radii and empirical rate fits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .manifold import LandingParams, ParameterError, distance_to_stiefel, landing_field
from .merit import MeritConstants, merit_value
from .problems import ProblemInstance, agent_relative_gradients

GAP_FLOOR = 1e-14
MIN_FIT_POINTS = 20
POWER_TOL = 1e-12
POWER_SQUARINGS = 64
ERGODIC_TOL = 1e-6


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    k: int
    grad_norm_sum: float
    landing_norm_avg: float
    consensus_x: float
    consensus_y: float
    feasibility_avg: float
    merit_avg: float
    wall_time_s: float
    qr_svd_count: int

    def as_row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRecord))


def record(state, problem: ProblemInstance, consts: MeritConstants, params: LandingParams,
           qr_svd_count: int = 0, elapsed: float = 0.0) -> TraceRecord:
    """Metrics of a :class:`~stiefel_dgt.algorithms.NetworkState`.

    Feasibility uses singular values (counted as metric-only work), so the
    optimisation-path QR/SVD tally is untouched.
    """
    X = state.x
    n = X.shape[0]
    xbar = X.mean(axis=0)
    rel = agent_relative_gradients(problem, X) if n == problem.n else None
    if rel is None:
        # centralized runs keep one block; evaluate the global relative gradient there
        rel = agent_relative_gradients(problem, np.broadcast_to(xbar, (problem.n,) + xbar.shape))
    landing = landing_field(xbar, problem.global_grad(xbar), params)
    dx = (X - xbar).reshape(n, -1)
    dy = (state.y - state.y.mean(axis=0)).ravel()
    return TraceRecord(
        k=int(state.k),
        grad_norm_sum=float(np.linalg.norm(rel.sum(axis=0))),
        landing_norm_avg=float(np.linalg.norm(landing)),
        consensus_x=float(np.sum(np.linalg.norm(dx, axis=1))),
        consensus_y=float(np.linalg.norm(dy)),
        feasibility_avg=float(np.mean(distance_to_stiefel(X))),
        merit_avg=merit_value(xbar, problem, consts, warn=False),
        wall_time_s=float(elapsed),
        qr_svd_count=int(qr_svd_count),
    )


class TraceWriter:
    """Append-only CSV and/or JSON-lines sink for trace records."""

    def __init__(self, csv_path=None, jsonl_path=None):
        self._csv_fh = open(csv_path, "w", newline="") if csv_path else None
        self._jsonl_fh = open(jsonl_path, "w") if jsonl_path else None
        self._csv = None
        if self._csv_fh:
            self._csv = csv.writer(self._csv_fh)
            self._csv.writerow(TRACE_COLUMNS)
        self.records: list[TraceRecord] = []

    def write(self, rec: TraceRecord) -> None:
        self.records.append(rec)
        if self._csv:
            self._csv.writerow([repr(v) if isinstance(v, float) else v for v in rec.as_row()])
        if self._jsonl_fh:
            self._jsonl_fh.write(json.dumps(asdict(rec)) + "\n")

    def close(self) -> None:
        for fh in (self._csv_fh, self._jsonl_fh):
            if fh:
                fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace_csv(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        vals = {k: float(v) for k, v in row.items()}
        vals["k"] = int(vals["k"])
        vals["qr_svd_count"] = int(vals["qr_svd_count"])
        out.append(TraceRecord(**vals))
    return out


# -- linear-system matrices ------------------------------------------------------


def _theta(sigma_W: float) -> float:
    if not 0.0 <= sigma_W < 1.0:
        raise ParameterError(f"sigma_W must lie in [0, 1), got {sigma_W}")
    s2 = sigma_W**2
    return (1 + s2) / (1 - s2)


def build_Gtilde(alpha: float, L_prime: float, sigma_W: float) -> np.ndarray:
    if alpha < 0 or L_prime <= 0:
        raise ParameterError("need alpha >= 0 and L_prime > 0")
    th = _theta(sigma_W)
    half = (1 + sigma_W**2) / 2
    a2 = alpha**2 * L_prime**2
    return np.array([[half + 4 * a2 * th, 8 * th], [th * a2, half]])


def build_M(alpha: float, L_prime: float, sigma_W: float, rho: float, mu_prime: float, C: float) -> np.ndarray:
    for name, v in (("L_prime", L_prime), ("rho", rho), ("mu_prime", mu_prime), ("C", C)):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    th = _theta(sigma_W)
    half = (1 + sigma_W**2) / 2
    a2 = alpha**2 * L_prime**2
    return np.array(
        [
            [half + 4 * a2 * th, 8 * (1 + a2) * th, 96 * a2 * th / rho**2],
            [a2 * th, half, 0.0],
            [0.0, a2 + alpha * L_prime * C**2 / rho, 1 - alpha * rho * mu_prime / 4],
        ]
    )


def spectral_radius(A) -> float:
    """Perron root of a non-negative square matrix.

    Power iteration by repeated squaring: after ``j`` rounds ``v = A^(2^j) 1``
    (renormalised), and the Collatz-Wielandt bounds
    ``min (Av)_i / v_i <= rho <= max (Av)_i / v_i`` are checked for 1e-12
    relative agreement. Squaring passes the equivalent of 1e5 plain steps
    in about 17 rounds and keeps going to 2^64, which also covers
    Jordan-type blocks where plain power iteration creeps. Falls back to a dense
    eigendecomposition when the bracket does not close (reducible or periodic
    matrices).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {A.shape}")
    if np.any(A < 0):
        raise ParameterError("spectral_radius needs a non-negative matrix")
    top = A.max(initial=0.0)
    if top == 0.0:
        return 0.0
    P = A / top
    for _ in range(POWER_SQUARINGS):
        v = P.sum(axis=1)
        if np.all(v > 0):
            w = A @ v
            ratios = w / v
            lo, hi = ratios.min(), ratios.max()
            if hi - lo <= POWER_TOL * max(hi, 1.0):
                return float(0.5 * (lo + hi))
        P = P @ P
        scale = P.max()
        if not np.isfinite(scale) or scale == 0.0:
            break
        P /= scale
    return float(np.max(np.abs(np.linalg.eigvals(A))))


# -- empirical rates ---------------------------------------------------------------


@dataclass(frozen=True)
class RateReport:
    window: tuple[int, int]
    slope: float
    r_squared: float
    implied_rate: float


def fit_linear_rate(trace) -> RateReport:
    """Least-squares fit of ``ln gap`` against ``k`` on points with gap above 1e-14."""
    pts = [(float(k), float(g)) for k, g in trace if g > GAP_FLOOR]
    if len(pts) < MIN_FIT_POINTS:
        raise InsufficientDataError(f"need at least {MIN_FIT_POINTS} positive gaps, got {len(pts)}")
    k = np.array([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    kc = k - k.mean()
    slope = float(kc @ (y - y.mean()) / (kc @ kc))
    resid = y - (y.mean() + slope * kc)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 0.0 if ss_tot == 0.0 else max(0.0, 1.0 - float(resid @ resid) / ss_tot)
    return RateReport((int(k[0]), int(k[-1])), slope, r2, math.exp(slope))


@dataclass(frozen=True)
class ErgodicReport:
    K: int
    mean_sq_landing: float
    bound_constant: float
    ratio: float
    premises_met: bool
    passed: bool

    @property
    def flag(self) -> str:
        if self.passed:
            return "pass"
        return "bound-violation" if self.premises_met else "premise-violation"


def ergodic_check(trace, alpha: float, rho: float, K: int | None = None, premise_alpha: float | None = None) -> ErgodicReport:
    """Compare ``mean_{k<K} ||Lambda(xbar_k)||^2`` with ``4 (L(xbar_0) - L(xbar_K)) / (alpha rho K)``.

    ``trace`` must hold consecutive records starting at ``k = 0``. When
    ``premise_alpha`` is given and ``alpha`` exceeds it, a failure is reported
    as a premise violation instead of a bound violation.
    """
    recs = list(trace)
    if not recs:
        raise InsufficientDataError("empty trace")
    for name in ("landing_norm_avg", "merit_avg"):
        if not hasattr(recs[0], name):
            raise ValueError(f"trace records lack {name!r}")
    if K is None:
        K = max(len(recs) - 1, 1)
    if len(recs) < K + 1 and not (K == 1 and len(recs) == 1):
        raise InsufficientDataError(f"need {K + 1} records for K={K}, got {len(recs)}")
    if any(recs[j].k != recs[0].k + j for j in range(min(K + 1, len(recs)))):
        raise ValueError("ergodic_check needs one record per iteration")
    lhs = float(np.mean([r.landing_norm_avg**2 for r in recs[:K]]))
    end = recs[K] if len(recs) > K else recs[-1]
    bound = 4.0 * (recs[0].merit_avg - end.merit_avg) / (alpha * rho * K)
    ratio = lhs / bound if bound > 0 else (0.0 if lhs == 0 else math.inf)
    premises = premise_alpha is None or alpha <= premise_alpha
    return ErgodicReport(K, lhs, bound, ratio, premises, lhs <= bound * (1 + ERGODIC_TOL))


PL_SAFETY_FACTOR = 0.5


def fit_pl_constant(problem: ProblemInstance, delta: float, samples: int = 400, seed: int = 0,
                    factor: float = PL_SAFETY_FACTOR) -> float:
    """Empirical local PL factor ``mu`` around the reference solution.

    Samples feasible points within ``2 delta`` of the solution set, takes the
    smallest ratio ``||grad f||^2 / (2 |f - f*|)`` and scales it by ``factor``
    so the audits keep a margin against unsampled points.
    """
    from .manifold import project_to_stiefel, relative_gradient

    if problem.reference_solution is None or problem.f_star is None:
        raise ValueError("fit_pl_constant needs a reference solution")
    rng = np.random.default_rng(seed)
    ref = problem.reference_solution
    best = math.inf
    for _ in range(samples):
        z = rng.standard_normal(ref.shape)
        step = rng.uniform(0.0, 2.0 * delta) * z / np.linalg.norm(z)
        x = project_to_stiefel(ref + step, metric=True)
        if problem.distance_to_solutions(x) > 2.0 * delta:
            continue
        gap = abs(problem.global_value(x) - problem.f_star)
        if gap < 1e-12:
            continue
        g = relative_gradient(x, problem.global_grad(x))
        best = min(best, float(np.sum(g * g)) / (2.0 * gap))
    if not math.isfinite(best):
        raise InsufficientDataError("no usable samples inside the PL neighbourhood")
    return factor * best
