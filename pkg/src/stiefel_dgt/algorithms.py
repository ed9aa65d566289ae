"""DRFGT, the centralized landing baseline, a retraction-based tracking baseline,
and the step-size calculators."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .manifold import (
    LandingParams,
    ParameterError,
    check_epsilon,
    feasibility_residual,
    gram_residual,
    landing_field,
    op_counter,
    qr_retraction,
    relative_gradient,
    tangent_projection,
)
from .network import MixingMatrix, mix
from .problems import PcaProblem, ProblemInstance

DIVERGENCE_NORM = 1e6
ALGORITHMS = ("drfgt", "centralized_landing", "retraction_dgt")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, max_entry: float):
        super().__init__(f"iterates diverged at iteration {iteration} (max |entry| = {max_entry:.3e})")
        self.iteration = iteration
        self.max_entry = max_entry


class StepSizeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AlgorithmConfig:
    alpha: float
    lam: float
    epsilon: float = 0.5
    max_iters: int = 1000
    tol_grad: float = 1e-6
    tol_consensus: float = 1e-6
    consensus_rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.lam > 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        check_epsilon(self.epsilon)
        if self.consensus_rounds < 1:
            raise ParameterError("consensus_rounds must be >= 1")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")

    @property
    def params(self) -> LandingParams:
        return LandingParams(self.lam, self.epsilon)


@dataclass
class NetworkState:
    """Stacked per-agent iterates ``x``, trackers ``y`` and stored fields ``lam``.

    All three arrays have shape ``(n, d, r)``.
    """

    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    k: int = 0

    @classmethod
    def initial(cls, x0: np.ndarray, n: int) -> "NetworkState":
        x0 = np.asarray(x0, dtype=float)
        x = np.repeat(x0[None], n, axis=0)
        return cls(x, np.zeros_like(x), np.zeros_like(x), 0)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def xbar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    def copy(self) -> "NetworkState":
        return NetworkState(self.x.copy(), self.y.copy(), self.lam.copy(), self.k)


def local_landing_fields(X: np.ndarray, problem: ProblemInstance, lam: float) -> np.ndarray:
    """``Lambda_i(x_i)`` for every agent, batched."""
    G = problem.local_grads(X)
    return relative_gradient(X, G) + lam * (X @ gram_residual(X))


def _guard(x: np.ndarray, k: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(k, float("inf"))
    big = float(np.max(np.abs(x)))
    if np.linalg.norm(x.reshape(x.shape[0], -1), axis=1).max() > DIVERGENCE_NORM:
        raise DivergenceError(k, big)


def drfgt_step(state: NetworkState, problem: ProblemInstance, W: MixingMatrix, cfg: AlgorithmConfig) -> NetworkState:
    """One synchronous DRFGT round; every agent reads only iteration-``k`` values."""
    x_new = mix(W, state.x) - cfg.alpha * state.y
    _guard(x_new, state.k + 1)
    lam_new = local_landing_fields(x_new, problem, cfg.lam)
    # subtract before adding: with W = [1] this keeps y == Lambda bit for bit
    y_new = (mix(W, state.y) - state.lam) + lam_new
    return NetworkState(x_new, y_new, lam_new, state.k + 1)


def centralized_landing_step(x, problem: ProblemInstance, cfg: AlgorithmConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if feasibility_residual(x) > cfg.epsilon:
        warnings.warn("centralized landing step taken outside the safety region", StepSizeWarning, stacklevel=2)
    x_new = x - cfg.alpha * landing_field(x, problem.global_grad(x), cfg.params)
    _guard(x_new[None], 0)
    return x_new


def retraction_dgt_step(
    state: NetworkState, problem: ProblemInstance, W: MixingMatrix, cfg: AlgorithmConfig
) -> NetworkState:
    """Retraction-based gradient tracking with multi-round consensus.

    Each agent moves along the tangent projection of
    ``(x_i - (W^t x)_i) / alpha + y_i`` and is pulled back with a QR
    retraction, so iterates stay feasible. ``y`` tracks the mean of the
    local relative gradients.
    """
    res = feasibility_residual(state.x)
    if np.max(res) > 1e-10:
        raise ValueError(f"retraction_dgt needs feasible iterates (max residual {np.max(res):.2e})")
    xm, ym = state.x, state.y
    for _ in range(cfg.consensus_rounds):
        xm = mix(W, xm)
        ym = mix(W, ym)
    step = tangent_projection(state.x, (state.x - xm) + cfg.alpha * state.y)
    x_new = qr_retraction(state.x, -step)
    _guard(x_new, state.k + 1)
    g_new = relative_gradient(x_new, problem.local_grads(x_new))
    y_new = (ym - state.lam) + g_new
    return NetworkState(x_new, y_new, g_new, state.k + 1)


# -- step sizes ----------------------------------------------------------------


def _check_sigma(sigma_W: float) -> None:
    if not 0.0 <= sigma_W < 1.0:
        raise ParameterError(f"sigma_W must lie in [0, 1), got {sigma_W}")


def safe_step_size_terms(G, L_prime, lam, epsilon, sigma_W, n) -> tuple[float, float, float, float]:
    for name, v in (("G", G), ("L_prime", L_prime), ("lambda", lam), ("n", n)):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")
    check_epsilon(epsilon)
    _check_sigma(sigma_W)
    e, gap = epsilon, 1.0 - sigma_W
    field_bound = G + lam * e * (1 + e)
    return (
        gap**2 * e / (20.0 * math.sqrt(n) * field_bound),
        lam * e**2 * gap**2 / (16.0 * L_prime * field_bound),
        1.0 / (2.0 * lam),
        lam * e * (1 - e) / (2.0 * (G**2 + lam**2 * (1 + e) * e**2 + e**4 * lam**2 / 16.0)),
    )


def safe_step_size(G, L_prime, lam, epsilon, sigma_W, n) -> float:
    return min(safe_step_size_terms(G, L_prime, lam, epsilon, sigma_W, n))


def stable_step_size(L_prime: float, sigma_W: float) -> float:
    if not L_prime > 0:
        raise ParameterError("L_prime must be positive")
    _check_sigma(sigma_W)
    s2 = sigma_W**2
    return (1 - s2) ** 2 / ((1 + s2) * 16.0 * L_prime)


def ergodic_step_size(L_prime, sigma_W, rho, C) -> float:
    """Largest step (exclusive) allowed by the global-convergence premises,
    on top of the safe step size."""
    s2 = sigma_W**2
    return min(
        stable_step_size(L_prime, sigma_W),
        ((rho * (1 - s2) ** 4) / ((1 + s2) ** 2 * C**2)) ** (1.0 / 3.0) / (4.0 * L_prime),
        rho / (8.0 * L_prime),
    )


def linear_rate_step_size(L_prime, sigma_W, rho, C, mu_prime) -> float:
    """Step-size cap for local linear convergence under the PL condition."""
    s2 = sigma_W**2
    theta = (1 + s2) / (1 - s2)
    phi = 4 * L_prime / (rho * mu_prime) + 8 * L_prime * C**2 / (rho**2 * mu_prime)
    return min(
        rho / (2 * L_prime),
        (1 - s2) / (rho * mu_prime),
        math.sqrt(1 - s2) / (4 * L_prime * math.sqrt(theta) * (1 + 12 * phi / rho**2) ** 0.25),
        (1 - s2) / (16 * L_prime * theta),
    )


# -- run loop --------------------------------------------------------------------


@dataclass
class RunResult:
    state: NetworkState
    exit_reason: str
    iterations: int
    qr_svd_count: int
    wall_time_s: float
    error: DivergenceError | None = None


def _landing_at_mean(state: NetworkState, problem: ProblemInstance, lam: float) -> np.ndarray:
    xbar = state.xbar
    return landing_field(xbar, problem.global_grad(xbar), LandingParams(lam))


def run(
    algorithm: str,
    problem: ProblemInstance,
    W: MixingMatrix,
    cfg: AlgorithmConfig,
    x0: np.ndarray,
    trace_sink: Callable | None = None,
    record_every: int = 1,
    callback: Callable[[NetworkState], None] | None = None,
    step_bound: float | None = None,
    fast: bool | None = None,
) -> RunResult:
    """Iterate ``algorithm`` until convergence, ``max_iters`` or divergence.

    ``trace_sink(state, qr_svd_count, elapsed)`` is called for the initial
    state and then every ``record_every`` iterations (always at the last one).
    Convergence needs ``||Lambda(xbar)|| <= tol_grad`` and
    ``sum_i ||x_i - xbar|| <= tol_consensus``; an infinite ``tol_grad`` switches
    the test off so the run always uses ``max_iters``. ``centralized_landing`` keeps a
    single block in ``state.x`` and ignores ``W``.

    ``fast=None`` picks the compiled PCA kernels whenever they apply (PCA
    problem, no per-iteration ``callback``, not the centralized baseline);
    ``fast=False`` forces the numpy reference path.
    """
    if algorithm not in ALGORITHMS:
        raise ParameterError(f"unknown algorithm {algorithm!r}")
    if step_bound is not None and cfg.alpha > step_bound and algorithm == "drfgt":
        warnings.warn(
            f"alpha={cfg.alpha:.3e} exceeds the theoretical bound {step_bound:.3e}", StepSizeWarning, stacklevel=2
        )
    n = 1 if algorithm == "centralized_landing" else W.n
    state = NetworkState.initial(x0, n)
    if algorithm == "retraction_dgt" and feasibility_residual(state.x[0]) > 1e-10:
        raise ValueError("retraction_dgt must start from a feasible point")
    kernel_ok = isinstance(problem, PcaProblem) and callback is None and algorithm != "centralized_landing"
    if fast and not kernel_ok:
        raise ParameterError("the compiled path needs a PCA problem, no callback and a decentralized algorithm")
    if fast is None:
        fast = kernel_ok
    qr0 = op_counter.qr_svd
    start = time.perf_counter()
    if trace_sink is not None:
        trace_sink(state, 0, 0.0)
    if callback is not None:
        callback(state)
    if fast:
        state, reason, error, last_recorded = _run_compiled(
            algorithm, problem, W, cfg, state, trace_sink, record_every, qr0, start
        )
    else:
        state, reason, error, last_recorded = _run_reference(
            algorithm, problem, W, cfg, state, trace_sink, record_every, callback, qr0, start
        )
    elapsed = time.perf_counter() - start
    if trace_sink is not None and last_recorded != state.k and reason != "diverged":
        trace_sink(state, op_counter.qr_svd - qr0, elapsed)
    iterations = state.k if error is None else error.iteration
    return RunResult(state, reason, iterations, op_counter.qr_svd - qr0, elapsed, error)


def _run_reference(algorithm, problem, W, cfg, state, trace_sink, record_every, callback, qr0, start):
    reason, error, last_recorded = "max_iters", None, 0
    stopping = math.isfinite(cfg.tol_grad)
    for _ in range(cfg.max_iters):
        try:
            if algorithm == "drfgt":
                state = drfgt_step(state, problem, W, cfg)
            elif algorithm == "retraction_dgt":
                state = retraction_dgt_step(state, problem, W, cfg)
            else:
                x = centralized_landing_step(state.x[0], problem, cfg)
                state = NetworkState(x[None], state.y, state.lam, state.k + 1)
        except DivergenceError as exc:
            exc.iteration = state.k + 1
            reason, error = "diverged", exc
            break
        if callback is not None:
            callback(state)
        if not stopping:
            converged = False
        else:
            grad_ok = np.linalg.norm(_landing_at_mean(state, problem, cfg.lam)) <= cfg.tol_grad
            converged = grad_ok and (
                np.sum(np.linalg.norm((state.x - state.xbar).reshape(state.n, -1), axis=1)) <= cfg.tol_consensus
            )
        if converged:
            reason = "converged"
        if trace_sink is not None and (state.k % record_every == 0 or converged):
            trace_sink(state, op_counter.qr_svd - qr0, time.perf_counter() - start)
            last_recorded = state.k
        if converged:
            break
    return state, reason, error, last_recorded


def _run_compiled(algorithm, problem, W, cfg, state, trace_sink, record_every, qr0, start):
    from . import _kernels

    inst = problem.inst
    X = np.ascontiguousarray(state.x)
    Y = np.ascontiguousarray(state.y)
    S = np.ascontiguousarray(state.lam)
    Wm = np.ascontiguousarray(W.W)
    C = np.ascontiguousarray(inst.covariances)
    Cbar = np.ascontiguousarray(inst.mean_covariance)
    Dv = np.ascontiguousarray(inst.D)
    sign = float(inst.sign)
    k, reason, error, last_recorded = 0, "max_iters", None, 0
    tol_grad = cfg.tol_grad if math.isfinite(cfg.tol_grad) else -1.0
    stride = record_every if trace_sink is not None else cfg.max_iters
    while k < cfg.max_iters:
        chunk = min(stride - (k % stride), cfg.max_iters - k)
        if algorithm == "drfgt":
            done, status = _kernels.drfgt_pca_steps(
                X, Y, S, Wm, C, Cbar, Dv, sign, cfg.alpha, cfg.lam, chunk,
                tol_grad, cfg.tol_consensus, DIVERGENCE_NORM,
            )
        else:
            done, status = _kernels.retraction_pca_steps(
                X, Y, S, Wm, C, Cbar, Dv, sign, cfg.alpha, cfg.lam, cfg.consensus_rounds, chunk,
                tol_grad, cfg.tol_consensus, DIVERGENCE_NORM,
            )
            op_counter.qr_svd += done * X.shape[0]
        k += done
        state = NetworkState(X.copy(), Y.copy(), S.copy(), k)
        if status == _kernels.DIVERGED:
            reason, error = "diverged", DivergenceError(k, float(np.max(np.abs(X))))
            break
        if status == _kernels.CONVERGED:
            reason = "converged"
        if trace_sink is not None and (k % stride == 0 or status == _kernels.CONVERGED):
            trace_sink(state, op_counter.qr_svd - qr0, time.perf_counter() - start)
            last_recorded = k
        if status == _kernels.CONVERGED:
            break
    return state, reason, error, last_recorded


def with_alpha(cfg: AlgorithmConfig, alpha: float) -> AlgorithmConfig:
    return replace(cfg, alpha=alpha)
