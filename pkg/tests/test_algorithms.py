import math
import warnings

import numpy as np
import pytest

from stiefel_dgt.algorithms import (
    AlgorithmConfig,
    DivergenceError,
    NetworkState,
    StepSizeWarning,
    centralized_landing_step,
    drfgt_step,
    local_landing_fields,
    retraction_dgt_step,
    run,
    safe_step_size,
    safe_step_size_terms,
    stable_step_size,
)
from stiefel_dgt.config import preset, resolve
from stiefel_dgt.diagnostics import build_Gtilde, spectral_radius
from stiefel_dgt.manifold import (
    LandingParams,
    ParameterError,
    feasibility_residual,
    landing_field,
    qr_retraction,
    random_stiefel,
    relative_gradient,
    tangent_projection,
)
from stiefel_dgt.merit import estimate_constants
from stiefel_dgt.network import build_complete, build_ring
from stiefel_dgt.problems import PcaInstance, PcaProblem

SINGLE = build_complete(1)


def single_agent(problem):
    inst = PcaInstance(problem.inst.mean_covariance[None], problem.inst.D, problem.inst.sign)
    return PcaProblem(inst)


def test_config_validation():
    with pytest.raises(ParameterError):
        AlgorithmConfig(alpha=0.0, lam=1.0)
    with pytest.raises(ParameterError):
        AlgorithmConfig(alpha=1e-3, lam=-1.0)
    with pytest.raises(ParameterError):
        AlgorithmConfig(alpha=1e-3, lam=1.0, epsilon=0.8)
    with pytest.raises(ParameterError):
        AlgorithmConfig(alpha=1e-3, lam=1.0, consensus_rounds=0)


def test_single_agent_drfgt_is_centralized_landing(rng, small_pca):
    prob = single_agent(small_pca)
    cfg = AlgorithmConfig(alpha=5e-3, lam=2.0)
    x0 = random_stiefel(rng, 10, 2)
    state = NetworkState.initial(x0, 1)
    state = drfgt_step(state, prob, SINGLE, cfg)
    # y_0 = 0, so the first round only evaluates the field; afterwards they coincide
    assert np.array_equal(state.x[0], x0)
    x = x0
    for _ in range(50):
        state = drfgt_step(state, prob, SINGLE, cfg)
        x = centralized_landing_step(x, prob, cfg)
        assert np.array_equal(state.x[0], x)


def test_complete_graph_identical_agents_follow_centralized(rng, small_pca):
    inst = PcaInstance(np.repeat(small_pca.inst.mean_covariance[None], 4, axis=0), small_pca.inst.D)
    prob = PcaProblem(inst)
    W = build_complete(4)
    cfg = AlgorithmConfig(alpha=5e-3, lam=2.0)
    x0 = random_stiefel(rng, 10, 2)
    state = drfgt_step(NetworkState.initial(x0, 4), prob, W, cfg)
    x = x0
    for _ in range(200):
        state = drfgt_step(state, prob, W, cfg)
        x = centralized_landing_step(x, prob, cfg)
        assert np.max(np.abs(state.x - state.x[0])) <= 1e-12
        assert np.max(np.abs(state.x[0] - x)) <= 1e-12


def test_full_scale_synthetic_preset():
    cfg = preset("paper-synthetic")
    assert (cfg.network.n, cfg.network.self_weight, cfg.problem.d, cfg.problem.r, cfg.problem.m) == (10, 0.8, 100, 10, 1000)
    res = resolve(cfg)
    assert res.alpha == pytest.approx(1e-4)
    assert res.lam == pytest.approx(1000.0)
    assert res.W.W[0, 1] == pytest.approx(0.1)


def test_centralized_fixed_point(small_pca):
    cfg = AlgorithmConfig(alpha=1e-2, lam=1.0)
    x = small_pca.reference_solution
    np.testing.assert_allclose(centralized_landing_step(x, small_pca, cfg), x, atol=1e-13)


def test_centralized_pure_penalty_flow(rng):
    prob = PcaProblem(PcaInstance(np.zeros((1, 6, 6)), np.array([2.0, 1.0])))
    cfg = AlgorithmConfig(alpha=0.05, lam=1.0)
    x = 1.15 * random_stiefel(rng, 6, 2)
    prev = feasibility_residual(x)
    for _ in range(100):
        x = centralized_landing_step(x, prob, cfg)
        cur = feasibility_residual(x)
        assert cur < prev
        prev = cur


def test_centralized_pca_reaches_tolerance(rng, small_pca):
    L_hat = estimate_constants(small_pca, LandingParams(1.0)).L_hat
    cfg = AlgorithmConfig(alpha=1 / (4 * L_hat), lam=1.0, max_iters=20000, tol_grad=1e-8, tol_consensus=1.0)
    res = run("centralized_landing", small_pca, SINGLE, cfg, random_stiefel(rng, 10, 2))
    x = res.state.x[0]
    assert res.exit_reason == "converged" and res.iterations <= 20000
    assert np.linalg.norm(landing_field(x, small_pca.global_grad(x), cfg.params)) <= 1e-8


def test_retraction_single_agent_is_riemannian_descent(rng, small_pca):
    prob = single_agent(small_pca)
    cfg = AlgorithmConfig(alpha=1e-2, lam=1.0)
    x0 = random_stiefel(rng, 10, 2)
    state = NetworkState.initial(x0, 1)
    state = retraction_dgt_step(state, prob, SINGLE, cfg)
    x = x0
    for _ in range(30):
        state = retraction_dgt_step(state, prob, SINGLE, cfg)
        g = relative_gradient(x, prob.global_grad(x))
        x = qr_retraction(x, -cfg.alpha * tangent_projection(x, g))
        np.testing.assert_allclose(state.x[0], x, atol=1e-13)


def test_retraction_zero_gradient_keeps_iterates(rng):
    prob = PcaProblem(PcaInstance(np.zeros((3, 5, 5)), np.array([2.0, 1.0])))
    x0 = random_stiefel(rng, 5, 2)
    state = NetworkState.initial(x0, 3)
    for _ in range(5):
        state = retraction_dgt_step(state, prob, build_ring(3, 0.5), AlgorithmConfig(alpha=0.1, lam=1.0))
    np.testing.assert_allclose(state.x, np.broadcast_to(x0, state.x.shape), atol=1e-14)


def test_retraction_requires_feasible_iterates(rng, small_pca):
    state = NetworkState.initial(1.1 * random_stiefel(rng, 10, 2), 4)
    with pytest.raises(ValueError):
        retraction_dgt_step(state, small_pca, build_ring(4, 0.5), AlgorithmConfig(alpha=1e-2, lam=1.0))


def test_retraction_keeps_feasibility(rng, small_pca):
    W = build_ring(4, 0.5)
    cfg = AlgorithmConfig(alpha=1e-2, lam=1.0, consensus_rounds=2)
    state = NetworkState.initial(random_stiefel(rng, 10, 2), 4)
    for _ in range(200):
        state = retraction_dgt_step(state, small_pca, W, cfg)
        assert np.max(feasibility_residual(state.x)) <= 1e-10


def test_tracking_identity_short_run(rng, small_pca):
    W = build_ring(4, 0.5)
    cfg = AlgorithmConfig(alpha=2e-3, lam=2.0)
    state = NetworkState.initial(random_stiefel(rng, 10, 2), 4)
    for _ in range(300):
        state = drfgt_step(state, small_pca, W, cfg)
        ybar = state.y.mean(axis=0)
        fields = local_landing_fields(state.x, small_pca, cfg.lam).mean(axis=0)
        assert np.linalg.norm(ybar - fields) <= 1e-10 * (1 + np.linalg.norm(ybar))


# -- step sizes ------------------------------------------------------------------


def test_safe_step_third_term_never_binds():
    # the first term is at most 1 / (20 lam (1 + eps)), so 1/(2 lam) can never be the minimum
    rng = np.random.default_rng(0)
    for _ in range(500):
        lam = 10 ** rng.uniform(-3, 4)
        e = rng.uniform(0.01, 0.74)
        terms = safe_step_size_terms(10 ** rng.uniform(-6, 3), 10 ** rng.uniform(-6, 4), lam, e,
                                     rng.uniform(0, 0.99), int(rng.integers(1, 100)))
        assert terms[2] == 1 / (2 * lam)
        assert terms[0] <= 1 / (20 * lam * (1 + e)) < terms[2]


def test_safe_step_first_term_scales_with_sqrt_n():
    args = dict(G=1.0, L_prime=1e-3, lam=1.0, epsilon=0.5, sigma_W=0.5)
    a = safe_step_size_terms(n=4, **args)
    b = safe_step_size_terms(n=16, **args)
    assert min(a) == a[0] and min(b) == b[0]
    assert safe_step_size(n=16, **args) == pytest.approx(safe_step_size(n=4, **args) / 2, rel=1e-14)


def test_safe_step_matches_term_by_term_oracle():
    G, Lp, lam, e, s, n = 40.0, 1500.0, 1000.0, 0.5, 0.8 + 0.2 * math.cos(2 * math.pi / 10), 10
    fb = G + lam * e * (1 + e)
    expected = min(
        (1 - s) ** 2 * e / (20 * math.sqrt(n) * fb),
        lam * e * e * (1 - s) ** 2 / (16 * Lp * fb),
        1 / (2 * lam),
        lam * e * (1 - e) / (2 * (G * G + lam * lam * (1 + e) * e * e + e**4 * lam * lam / 16)),
    )
    assert safe_step_size(G, Lp, lam, e, s, n) == pytest.approx(expected, rel=1e-15)


def test_safe_step_domain_errors():
    with pytest.raises(ParameterError):
        safe_step_size(1.0, 1.0, 1.0, 0.5, 1.0, 3)
    with pytest.raises(ParameterError):
        safe_step_size(-1.0, 1.0, 1.0, 0.5, 0.5, 3)
    with pytest.raises(ParameterError):
        safe_step_size(1.0, 1.0, 1.0, 0.9, 0.5, 3)


def test_stable_step_values():
    assert stable_step_size(3.0, 0.0) == pytest.approx(1 / 48)
    sig = 0.8 + 0.2 * math.cos(math.pi / 5)
    a = stable_step_size(4.0, sig)
    s2 = sig * sig
    assert a == pytest.approx((1 - s2) ** 2 / (1 + s2) / 64, rel=1e-14)
    assert a == pytest.approx(4.5576e-5, rel=1e-4)
    assert spectral_radius(build_Gtilde(0.999 * a, 4.0, sig)) < 1
    vals = [stable_step_size(1.0, s) for s in np.linspace(0, 0.999, 50)]
    assert all(b < c for c, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6
    with pytest.raises(ParameterError):
        stable_step_size(0.0, 0.5)


# -- run loop ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_small():
    return resolve(preset("desk-pca"))


@pytest.mark.parametrize("fast", [False, True])
def test_infinite_tolerance_runs_to_max_iters(desk_small, fast):
    cfg = AlgorithmConfig(alpha=1e-3, lam=desk_small.lam, max_iters=40, tol_grad=math.inf, tol_consensus=math.inf)
    res = run("drfgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=fast)
    assert (res.exit_reason, res.iterations) == ("max_iters", 40)


@pytest.mark.parametrize("algorithm", ["drfgt", "retraction_dgt"])
def test_compiled_path_agrees_with_reference(desk_small, algorithm):
    cfg = AlgorithmConfig(alpha=100 * desk_small.alpha, lam=desk_small.lam, max_iters=2000, consensus_rounds=2)
    a = run(algorithm, desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=False)
    b = run(algorithm, desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=True)
    assert a.iterations == b.iterations and a.qr_svd_count == b.qr_svd_count
    np.testing.assert_allclose(b.state.x, a.state.x, atol=1e-7)
    np.testing.assert_allclose(b.state.y, a.state.y, atol=1e-6)


def test_compiled_path_eligibility(small_pca):
    cfg = AlgorithmConfig(alpha=1e-3, lam=1.0, max_iters=3)
    with pytest.raises(ParameterError):
        run("centralized_landing", small_pca, SINGLE, cfg, small_pca.reference_solution, fast=True)
    with pytest.raises(ParameterError):
        run("drfgt", small_pca, build_ring(4, 0.5), cfg, small_pca.reference_solution, callback=lambda s: None, fast=True)


@pytest.mark.parametrize("fast", [False, True])
def test_divergence_reports_iteration(desk_small, fast):
    cfg = AlgorithmConfig(alpha=0.5, lam=desk_small.lam, max_iters=500)
    res = run("drfgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=fast)
    assert res.exit_reason == "diverged"
    assert isinstance(res.error, DivergenceError) and res.error.iteration == res.iterations >= 1


def test_centralized_divergence_raises(small_pca):
    cfg = AlgorithmConfig(alpha=1e4, lam=1e3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DivergenceError):
            x = 1.5 * small_pca.reference_solution
            for _ in range(10):
                x = centralized_landing_step(x, small_pca, cfg)


def test_step_bound_warning(desk_small):
    cfg = AlgorithmConfig(alpha=1e-3, lam=desk_small.lam, max_iters=1)
    with pytest.warns(StepSizeWarning):
        run("drfgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, step_bound=desk_small.safe_alpha)


def test_unknown_algorithm(desk_small):
    with pytest.raises(ParameterError):
        run("gossip", desk_small.problem, desk_small.W, AlgorithmConfig(alpha=1e-3, lam=1.0), desk_small.x0)


@pytest.mark.parametrize("fast", [False, True])
def test_runs_are_deterministic(desk_small, fast):
    cfg = AlgorithmConfig(alpha=desk_small.alpha, lam=desk_small.lam, max_iters=300)
    rows = []
    for _ in range(2):
        trace = []
        run("drfgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=fast,
            trace_sink=lambda s, q, t: trace.append(s.x.copy()), record_every=50)
        rows.append(trace)
    assert len(rows[0]) == 7
    assert all(np.array_equal(a, b) for a, b in zip(*rows))


def test_retraction_counts_one_factorisation_per_agent(desk_small):
    cfg = AlgorithmConfig(alpha=desk_small.alpha, lam=desk_small.lam, max_iters=25)
    for fast in (False, True):
        res = run("retraction_dgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=fast)
        assert res.qr_svd_count == 25 * desk_small.W.n
        res = run("drfgt", desk_small.problem, desk_small.W, cfg, desk_small.x0, fast=fast)
        assert res.qr_svd_count == 0
