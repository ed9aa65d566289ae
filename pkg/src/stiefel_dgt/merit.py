"""Smooth merit function ``L = f + h + gamma * p``, its constants and inequality audits."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .manifold import (
    LandingParams,
    ParameterError,
    feasibility_residual,
    gram_residual,
    landing_field,
    FEASIBILITY_TOL,
    penalty,
    penalty_gradient,
    project_to_stiefel,
    random_in_safety_region,
    relative_gradient,
    sym,
)
from .problems import PcaProblem, ProblemInstance, central_difference, pca_bounds

GAMMA_MARGIN = 1.05
SAMPLED_INFLATION = 1.5
AUDIT_TOL = 1e-10
L_HAT_FLOOR = 1e-12


class DomainWarning(UserWarning):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class MeritConstants:
    gamma: float
    rho: float
    C: float
    s: float
    L: float
    L_hat: float
    L_prime: float
    G: float
    lam: float
    epsilon: float
    mu: float | None = None
    mu_prime: float | None = None
    estimated: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def gamma_lower_bound(L: float, s: float, L_hat: float, lam: float, epsilon: float) -> float:
    e = epsilon
    return 2.0 / (3.0 - 4.0 * e) * (L * (1 - e) + 3 * s + L_hat**2 * (1 + e) ** 2 / (lam * (1 - e)))


def rho_from(gamma: float, lam: float, epsilon: float) -> float:
    return min(0.5, gamma / (4.0 * lam * (1 + epsilon)))


def C_from(L_prime: float, lam: float, epsilon: float) -> float:
    return 3.0 * L_prime / (lam * (1 - epsilon)) + 2.0


def mu_prime_from(mu: float, L_hat: float, L_prime: float, lam: float, epsilon: float) -> float:
    e = epsilon
    inv = max(1.0 / mu, (2 * (3 + 2 * e) ** 2 * L_hat**2 + mu * L_prime) / (2 * mu * lam**2 * (1 - e) ** 2))
    return 1.0 / inv


def build_constants(
    L: float,
    s: float,
    L_hat: float,
    G: float,
    params: LandingParams,
    mu: float | None = None,
    gamma: float | None = None,
    estimated: bool = False,
) -> MeritConstants:
    """Assemble every derived constant from the problem-level bounds.

    ``L'`` takes the largest of ``L_hat``, the merit smoothness bound
    ``L_{f+h} + (2 + 3 eps) gamma`` and the landing-field bound
    ``(3 + 3 eps) L_hat + (2 + 3 eps) lambda``, with ``L_{f+h} = (3 + 3 eps) L_hat``.
    """
    lam, e = params.lam, params.epsilon
    L_hat = max(L_hat, L_HAT_FLOOR)
    if gamma is None:
        gamma = GAMMA_MARGIN * gamma_lower_bound(L, s, L_hat, lam, e)
    L_fh = (3 + 3 * e) * L_hat
    L_prime = max(L_hat, L_fh + (2 + 3 * e) * gamma, L_fh + (2 + 3 * e) * lam)
    mu_p = None if mu is None else mu_prime_from(mu, L_hat, L_prime, lam, e)
    return MeritConstants(
        gamma=gamma,
        rho=rho_from(gamma, lam, e),
        C=C_from(L_prime, lam, e),
        s=s,
        L=L,
        L_hat=L_hat,
        L_prime=L_prime,
        G=G,
        lam=lam,
        epsilon=e,
        mu=mu,
        mu_prime=mu_p,
        estimated=estimated,
    )


def with_mu(consts: MeritConstants, mu: float) -> MeritConstants:
    return build_constants(
        consts.L, consts.s, consts.L_hat, consts.G,
        LandingParams(consts.lam, consts.epsilon), mu=mu, gamma=consts.gamma, estimated=consts.estimated,
    )


def with_gamma(consts: MeritConstants, gamma: float) -> MeritConstants:
    return build_constants(
        consts.L, consts.s, consts.L_hat, consts.G,
        LandingParams(consts.lam, consts.epsilon), mu=consts.mu, gamma=gamma, estimated=consts.estimated,
    )


def _sampled_suprema(problem: ProblemInstance, epsilon: float, count: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    grad_sup = s = G = 0.0
    for _ in range(count):
        x = random_in_safety_region(rng, problem.d, problem.r, epsilon)
        g = problem.global_grad(x)
        grad_sup = max(grad_sup, np.linalg.norm(g))
        s = max(s, np.linalg.norm(sym(x.T @ g)))
        for i in range(problem.n):
            G = max(G, np.linalg.norm(relative_gradient(x, problem.local_grad(i, x))))
    return {"grad_sup": grad_sup, "s": s, "G": G}


def estimate_constants(
    problem: ProblemInstance,
    params: LandingParams,
    sample_count: int = 200,
    seed: int = 0,
    mu: float | None = None,
) -> MeritConstants:
    """Constants for ``problem`` on ``St^eps``.

    PCA problems get analytic spectral bounds. Anything else is probed at
    ``sample_count`` random points of the safety region and the suprema are
    inflated by 1.5; the result is flagged ``estimated``. ``L`` must then come
    from ``problem.smoothness_L``.
    """
    if isinstance(problem, PcaProblem):
        b = pca_bounds(problem.inst, params.epsilon)
        return build_constants(b["L"], b["s"], max(b["L"], b["grad_sup"]), b["G"], params, mu=mu)
    if sample_count < 100:
        raise ParameterError("sample_count must be at least 100")
    sup = _sampled_suprema(problem, params.epsilon, sample_count, seed)
    L = problem.smoothness_L if problem.smoothness_L is not None else 0.0
    grad_sup = SAMPLED_INFLATION * sup["grad_sup"]
    s = SAMPLED_INFLATION * sup["s"]
    G = problem.grad_bound_G if problem.grad_bound_G is not None else SAMPLED_INFLATION * sup["G"]
    return build_constants(L, s, max(L, grad_sup), G, params, mu=mu, estimated=True)


def merit_terms(x, problem: ProblemInstance, gamma: float) -> tuple[float, float, float]:
    """``(f, h, gamma * p)`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = problem.global_grad(x)
    f = problem.global_value(x)
    h = -0.5 * float(np.sum(sym(x.T @ g) * gram_residual(x)))
    return f, h, gamma * float(penalty(x))


def merit_value(x, problem: ProblemInstance, consts: MeritConstants, warn: bool = True) -> float:
    """``f + h + gamma p``; exactly ``f`` once the residual is at machine level."""
    res = feasibility_residual(x)
    if warn and res > consts.epsilon:
        warnings.warn("merit evaluated outside the safety region", DomainWarning, stacklevel=2)
    if res <= FEASIBILITY_TOL:
        return problem.global_value(x)
    return float(sum(merit_terms(x, problem, consts.gamma)))


def merit_gradient_on_manifold(x, euclid_grad, tol: float = 1e-10) -> np.ndarray:
    """Closed form ``grad f - x sym(x^T grad f)``; valid only for feasible ``x``."""
    x = np.asarray(x, dtype=float)
    res = feasibility_residual(x)
    if res > tol:
        raise PreconditionError(f"closed-form merit gradient needs a feasible point (residual {res:.2e})")
    g = np.asarray(euclid_grad, dtype=float)
    return g - x @ sym(x.T @ g)


def _h_term(x, problem: ProblemInstance) -> float:
    return -0.5 * float(np.sum(sym(x.T @ problem.global_grad(x)) * gram_residual(x)))


def merit_gradient_offmanifold(x, problem: ProblemInstance, consts: MeritConstants, h: float = 1e-4) -> np.ndarray:
    """Euclidean gradient of the merit at any ``x``.

    ``grad f`` comes from the problem's oracle and ``grad p`` is analytic;
    only ``h``, which would need the Hessian of ``f``, is differentiated by
    central differences, with one Richardson step (steps ``h`` and ``2h``) so
    the cubic truncation term drops out; for quadratic ``f`` the result is
    exact up to rounding. ``h`` vanishes on the manifold, so its differences
    stay far above rounding even where ``f`` itself is large.
    """
    x = np.asarray(x, dtype=float)
    fn = lambda z: _h_term(z, problem)  # noqa: E731
    fd = (4.0 * central_difference(fn, x, h) - central_difference(fn, x, 2.0 * h)) / 3.0
    return problem.global_grad(x) + fd + consts.gamma * penalty_gradient(x)


# -- audits --------------------------------------------------------------------


@dataclass
class AuditCheck:
    name: str
    status: str  # "pass", "fail" or "not-applicable"
    lhs: float | None = None
    rhs: float | None = None
    slack: float | None = None
    note: str = ""

    @property
    def passed(self) -> bool | None:
        return None if self.status == "not-applicable" else self.status == "pass"


def _check(name: str, lhs: float, rhs: float, direction: str, note: str = "") -> AuditCheck:
    slack = rhs - lhs if direction == "<=" else lhs - rhs
    return AuditCheck(name, "pass" if slack >= -AUDIT_TOL else "fail", float(lhs), float(rhs), float(slack), note)


AUDIT_NAMES = ("gamma_premise", "merit_descent", "merit_grad_bound", "manifold_grad_bound", "pseudo_domination", "pl_quadratic_growth")


def audit_inequalities(
    x,
    problem: ProblemInstance,
    params: LandingParams,
    consts: MeritConstants,
    delta: float | None = None,
) -> dict[str, AuditCheck]:
    """Evaluate both sides of each merit/landing inequality at ``x``.

    The PL-dependent checks need ``consts.mu_prime``, a reference solution and
    ``dist(S, x) <= delta``; otherwise they are reported not-applicable.
    The manifold gradient bound holds only on St(d, r) and is evaluated at ``Proj_St(x)``.
    ``gamma_premise`` checks that ``consts.gamma`` still meets the lower
    bound the descent inequality assumes; it fails for a hand-lowered gamma
    even where the descent inequality itself happens to survive.
    """
    x = np.asarray(x, dtype=float)
    note = "estimated-constants" if consts.estimated else ""
    out: dict[str, AuditCheck] = {}
    bound = gamma_lower_bound(consts.L, consts.s, consts.L_hat, params.lam, params.epsilon)
    out["gamma_premise"] = _check("gamma_premise", consts.gamma, bound, ">=", note)
    if feasibility_residual(x) > params.epsilon:
        for name in AUDIT_NAMES[1:]:
            out[name] = AuditCheck(name, "not-applicable", note="outside safety region")
        return out

    Lam = landing_field(x, problem.global_grad(x), params)
    lam_norm = np.linalg.norm(Lam)
    gradL = merit_gradient_offmanifold(x, problem, consts)
    out["merit_descent"] = _check("merit_descent", float(np.sum(Lam * gradL)), consts.rho * lam_norm**2, ">=", note)
    out["merit_grad_bound"] = _check("merit_grad_bound", np.linalg.norm(gradL), consts.C * lam_norm, "<=", note)

    xp = x if feasibility_residual(x) <= 1e-10 else project_to_stiefel(x, metric=True)
    gp = problem.global_grad(xp)
    out["manifold_grad_bound"] = _check(
        "manifold_grad_bound",
        np.linalg.norm(merit_gradient_on_manifold(xp, gp)),
        2.0 * np.linalg.norm(landing_field(xp, gp, params)),
        "<=",
        "at projection" if xp is not x else "",
    )

    skip = None
    if consts.mu_prime is None:
        skip = "no PL constant"
    elif problem.reference_solution is None or problem.f_star is None:
        skip = "no reference solution"
    else:
        dist = problem.distance_to_solutions(x)
        if delta is not None and dist > delta:
            skip = f"dist {dist:.3g} > delta {delta:.3g}"
    if skip:
        for name in AUDIT_NAMES[4:]:
            out[name] = AuditCheck(name, "not-applicable", note=skip)
        return out
    gap = merit_value(x, problem, consts, warn=False) - problem.f_star
    out["pseudo_domination"] = _check(
        "pseudo_domination", gap, lam_norm**2 / consts.mu_prime, "<=", note
    )
    out["pl_quadratic_growth"] = _check(
        "pl_quadratic_growth", gap, consts.mu_prime * consts.rho**2 / 4.0 * dist**2, ">=", note
    )
    return out


def audit_records(iteration: int, report: dict[str, AuditCheck]) -> list[dict]:
    rows = []
    for check in report.values():
        rows.append(
            {
                "iteration": iteration,
                "check": check.name,
                "lhs": check.lhs,
                "rhs": check.rhs,
                "pass": check.passed,
                "slack": check.slack,
                "status": check.status,
                "note": check.note,
            }
        )
    return rows


def write_audit_jsonl(fh, iteration: int, report: dict[str, AuditCheck]) -> None:
    for row in audit_records(iteration, report):
        fh.write(json.dumps(row) + "\n")
