from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stiefel_dgt.manifold import (
    DimensionError,
    LandingParams,
    ParameterError,
    SingularityError,
    StiefelIterate,
    distance_to_stiefel,
    feasibility_residual,
    in_safety_region,
    landing_field,
    op_counter,
    penalty,
    penalty_gradient,
    project_to_stiefel,
    qr_retraction,
    random_in_safety_region,
    random_stiefel,
    relative_gradient,
    skew,
    sym,
)
from stiefel_dgt.problems import central_difference

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def square_matrices(max_n=6):
    return st.integers(1, max_n).flatmap(lambda n: arrays(np.float64, (n, n), elements=finite))


def relgrad_loops(x, g):
    """``(g x^T - x g^T) x / 2`` by explicit summation."""
    d, r = x.shape
    a = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            for k in range(r):
                a[i, j] += 0.5 * (g[i, k] * x[j, k] - x[i, k] * g[j, k])
    out = np.zeros((d, r))
    for i in range(d):
        for k in range(r):
            for j in range(d):
                out[i, k] += a[i, j] * x[j, k]
    return out


# -- skew / sym --------------------------------------------------------------


def test_skew_sym_hand_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(skew(a), [[0.0, -0.5], [0.5, 0.0]])
    np.testing.assert_array_equal(sym(a), [[1.0, 2.5], [2.5, 4.0]])


def test_skew_sym_trivial_cases():
    eye = np.eye(4)
    np.testing.assert_array_equal(skew(eye), np.zeros((4, 4)))
    np.testing.assert_array_equal(sym(eye), eye)
    s = np.array([[1.0, 2.0], [2.0, 5.0]])
    np.testing.assert_array_equal(skew(s), 0)
    np.testing.assert_array_equal(sym(s - s.T + np.array([[0, 1.0], [-1.0, 0]])), 0)


@pytest.mark.parametrize("fn", [skew, sym])
def test_non_square_rejected(fn):
    with pytest.raises(DimensionError):
        fn(np.ones((2, 3)))


@given(square_matrices())
def test_skew_plus_sym_recovers_input(a):
    assert np.max(np.abs(skew(a) + sym(a) - a), initial=0.0) <= 1e-15 * max(1.0, np.max(np.abs(a)))
    np.testing.assert_array_equal(skew(a), -skew(a).T)
    np.testing.assert_array_equal(sym(a), sym(a).T)


# -- relative gradient, penalty, landing field --------------------------------


def test_relative_gradient_trivial(rng):
    x = random_stiefel(rng, 5, 2)
    np.testing.assert_allclose(relative_gradient(x, x), 0, atol=1e-15)
    np.testing.assert_array_equal(relative_gradient(x, np.zeros_like(x)), 0)


def test_relative_gradient_against_loops(rng):
    x = rng.standard_normal((4, 2))
    g = rng.standard_normal((4, 2))
    np.testing.assert_allclose(relative_gradient(x, g), relgrad_loops(x, g), rtol=1e-13, atol=1e-14)


def test_relative_gradient_shape_mismatch():
    with pytest.raises(DimensionError):
        relative_gradient(np.ones((4, 2)), np.ones((4, 3)))


def test_penalty_values(rng):
    q = random_stiefel(rng, 6, 3)
    assert penalty(q) == pytest.approx(0, abs=1e-28)
    c = 0.3
    assert penalty(np.sqrt(1 + c) * q) == pytest.approx(3 * c**2 / 4, rel=1e-12)
    x = rng.standard_normal((5, 3))
    m = x.T @ x - np.eye(3)
    total = sum(m[i, j] ** 2 for i in range(3) for j in range(3)) / 4
    assert penalty(x) == pytest.approx(total, rel=1e-13)


def test_penalty_gradient_values(rng):
    q = random_stiefel(rng, 6, 2)
    np.testing.assert_allclose(penalty_gradient(q), 0, atol=1e-14)
    np.testing.assert_allclose(penalty_gradient(2 * q), 6 * q, rtol=1e-13, atol=1e-14)


def test_penalty_gradient_matches_finite_differences(rng):
    for _ in range(10):
        x = rng.standard_normal((5, 3)) * 0.6
        fd = central_difference(penalty, x, 1e-6)
        g = penalty_gradient(x)
        assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)


def test_landing_field_stationary_frame(rng):
    x = random_stiefel(rng, 6, 3)
    s = rng.standard_normal((3, 3))
    g = x @ (s + s.T)
    np.testing.assert_allclose(landing_field(x, g, LandingParams(5.0)), 0, atol=1e-13)


def test_landing_field_without_penalty_is_relative_gradient(rng):
    x = rng.standard_normal((6, 3))
    g = rng.standard_normal((6, 3))
    np.testing.assert_array_equal(landing_field(x, g, SimpleNamespace(lam=0.0)), relative_gradient(x, g))


def test_landing_params_domain():
    for eps in (0.0, 0.75, 1.0, -0.1):
        with pytest.raises(ParameterError):
            LandingParams(1.0, eps)
    with pytest.raises(ParameterError):
        LandingParams(0.0, 0.5)


def test_components_orthogonal_on_random_instances(rng):
    for _ in range(1000):
        x = random_in_safety_region(rng, 6, 3, 0.5)
        g = rng.standard_normal((6, 3))
        a, b = relative_gradient(x, g), penalty_gradient(x)
        assert abs(np.sum(a * b)) <= 1e-10 * np.linalg.norm(a) * np.linalg.norm(b) + 1e-300


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.7))
def test_zero_landing_field_means_zero_components(seed, radius):
    rng = np.random.default_rng(seed)
    x = random_in_safety_region(rng, 5, 2, radius) if radius > 0 else random_stiefel(rng, 5, 2)
    s = rng.standard_normal((2, 2))
    g = x @ (s + s.T) if seed % 2 else rng.standard_normal((5, 2))
    lam = landing_field(x, g, LandingParams(3.0))
    if np.linalg.norm(lam) <= 1e-12:
        assert np.linalg.norm(relative_gradient(x, g)) <= 1e-10
        assert np.linalg.norm(penalty_gradient(x)) <= 1e-10


# -- projection, retraction, safety region ------------------------------------


def test_projection_fixed_point_and_scaling(rng):
    q = random_stiefel(rng, 5, 2)
    np.testing.assert_allclose(project_to_stiefel(q), q, atol=1e-12)
    np.testing.assert_allclose(project_to_stiefel(3 * q), q, atol=1e-12)


def test_projection_rank_deficient():
    x = np.zeros((4, 2))
    x[0, 0] = 1.0
    with pytest.raises(SingularityError):
        project_to_stiefel(x)


def test_projection_is_closest_and_obeys_residual_bound(rng):
    for _ in range(200):
        x = random_in_safety_region(rng, 5, 2, 0.5)
        p = project_to_stiefel(x)
        assert feasibility_residual(p) <= 1e-12
        assert np.linalg.norm(x - p) <= feasibility_residual(x) + 1e-14
        other = random_stiefel(rng, 5, 2)
        assert np.linalg.norm(x - p) <= np.linalg.norm(x - other) + 1e-14


def test_projection_counts_as_optimisation_or_metric_work(rng):
    x = rng.standard_normal((5, 2))
    qr0, met0 = op_counter.snapshot()
    project_to_stiefel(x)
    project_to_stiefel(x, metric=True)
    distance_to_stiefel(np.stack([x, x, x]))
    qr1, met1 = op_counter.snapshot()
    assert (qr1 - qr0, met1 - met0) == (1, 4)


def test_distance_to_stiefel_matches_projection(rng):
    x = rng.standard_normal((6, 3))
    assert distance_to_stiefel(x) == pytest.approx(np.linalg.norm(x - project_to_stiefel(x)), rel=1e-12)


def test_qr_retraction_examples(rng):
    q = random_stiefel(rng, 5, 3)
    np.testing.assert_allclose(qr_retraction(q, np.zeros_like(q)), q, atol=1e-14)
    t = 0.7
    out = qr_retraction(np.array([[1.0], [0.0]]), np.array([[0.0], [t]]))
    np.testing.assert_allclose(out, np.array([[1.0], [t]]) / np.sqrt(1 + t * t), rtol=1e-14)
    step = rng.standard_normal((5, 3))
    out = qr_retraction(q, step)
    np.testing.assert_allclose(out.T @ out, np.eye(3), atol=1e-12)
    # positive-diagonal R means out^T (q + step) is upper triangular with positive diagonal
    r = out.T @ (q + step)
    assert np.all(np.diag(r) > 0)
    np.testing.assert_allclose(np.tril(r, -1), 0, atol=1e-12)


def test_qr_retraction_rank_deficient():
    with pytest.raises(SingularityError):
        qr_retraction(np.array([[1.0], [0.0]]), np.array([[-1.0], [0.0]]))


def test_safety_region_examples(rng):
    q = random_stiefel(rng, 4, 2)
    assert in_safety_region(q, 0.1)
    # 1.25^2 - 1 = 0.5625 exactly, so the residual sits on the boundary
    col = np.zeros((4, 1))
    col[2, 0] = 1.25
    assert feasibility_residual(col) == 0.5625
    assert in_safety_region(col, 0.5625)
    assert not in_safety_region(col, 0.5624)
    for eps in (0.01, 0.5, 0.74):
        assert not in_safety_region(2 * q, eps)
    assert feasibility_residual(2 * q) == pytest.approx(3 * np.sqrt(2), rel=1e-12)
    with pytest.raises(ParameterError):
        in_safety_region(q, 0.8)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 0.25, 0.5, 0.7]))
def test_singular_values_in_safety_band(seed, eps):
    x = random_in_safety_region(np.random.default_rng(seed), 7, 3, eps)
    assert in_safety_region(x, eps)
    s = np.linalg.svd(x, compute_uv=False)
    assert s.min() >= np.sqrt(1 - eps) - 1e-12
    assert s.max() <= np.sqrt(1 + eps) + 1e-12


def test_iterate_caches_and_invalidates_residual(rng):
    x = rng.standard_normal((5, 2))
    it = StiefelIterate(x)
    first = it.residual
    assert first == pytest.approx(feasibility_residual(x), rel=1e-12)
    q = random_stiefel(rng, 5, 2)
    it.data = q
    assert it.residual <= 1e-12
    with pytest.raises(ValueError):
        StiefelIterate(np.full((3, 2), np.nan))
    with pytest.raises(DimensionError):
        StiefelIterate(np.ones((2, 3)))
