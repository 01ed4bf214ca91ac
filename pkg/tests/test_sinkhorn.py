import numpy as np
import pytest

from attnflow.errors import DimensionMismatch, NotConverged
from attnflow.measures import AttentionParams, EmpiricalMeasure, Variant
from attnflow.rng import make_rng, random_matrix
from attnflow.sinkhorn import sinkhorn_cost, sinkhorn_kernel_discrete, sinkhorn_plan, sinkhorn_potentials


def _sinkhorn_params(Q, K, eps=1.0):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    return AttentionParams(Variant.SINKHORN, Q, K, np.eye(Q.shape[1]), eps=eps)


def test_constant_kernel():
    # Q = 0 and K = 0 make the cost vanish: the kernel is 1 everywhere
    mu = EmpiricalMeasure(np.random.default_rng(0).standard_normal((5, 2)))
    kernel = sinkhorn_kernel_discrete(mu, _sinkhorn_params(np.zeros((2, 2)), np.zeros((2, 2))))
    np.testing.assert_allclose(kernel.matrix, np.ones((5, 5)), atol=1e-12)
    assert kernel.n_iters == 1


def test_two_token_symmetric_kernel():
    mu = EmpiricalMeasure([[1.0], [-1.0]])
    kernel = sinkhorn_kernel_discrete(mu, _sinkhorn_params([[1.0]], [[1.0]]))
    # c = [[0, 2], [2, 0]]: the bistochastic scaling of [[1, e^-2], [e^-2, 1]] is symmetric
    expected_diag = 2 / (1 + np.exp(-2))
    np.testing.assert_allclose(kernel.matrix, [
        [expected_diag, 2 - expected_diag],
        [2 - expected_diag, expected_diag],
    ], atol=1e-9)


@pytest.mark.parametrize("eps", [0.5, 1.0, 10.0])
def test_bistochastic(eps):
    rng = make_rng(0, "bistochastic", int(eps * 10))
    mu = EmpiricalMeasure(rng.standard_normal((30, 3)))
    params = _sinkhorn_params(random_matrix(rng, 3, 3), random_matrix(rng, 3, 3), eps)
    kernel = sinkhorn_kernel_discrete(mu, params)
    assert kernel.marginal_residual() <= 1e-8
    assert np.all(kernel.matrix >= 0)
    # Extending the kernel to the support reproduces its rows
    np.testing.assert_allclose(kernel.query_weights(mu.tokens), kernel.matrix, atol=1e-8)


def test_warm_start():
    rng = make_rng(0, "warm_start")
    mu = EmpiricalMeasure(rng.standard_normal((20, 2)))
    params = _sinkhorn_params(random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), 0.5)
    cold = sinkhorn_kernel_discrete(mu, params)
    warm = sinkhorn_kernel_discrete(mu, params, warm_start=cold.g)
    assert warm.n_iters <= 2
    np.testing.assert_allclose(warm.matrix, cold.matrix, atol=1e-8)


def test_not_converged():
    points = np.array([[0.0], [0.5], [3.0]])
    cost = sinkhorn_cost(points, points, np.eye(1), np.eye(1), 1.0)
    with pytest.raises(NotConverged) as info:
        sinkhorn_potentials(cost, max_iters=1, tol=1e-14)
    assert info.value.max_iters == 1
    assert info.value.residual > 1e-14


def test_dimension_mismatch():
    mu = EmpiricalMeasure(np.zeros((3, 2)))
    with pytest.raises(DimensionMismatch):
        sinkhorn_kernel_discrete(mu, _sinkhorn_params(np.eye(3), np.eye(3)))


def test_cost():
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    cost = sinkhorn_cost(X, X, np.eye(2), 2 * np.eye(2), 0.5)
    expected = np.array([[np.sum((x - 2 * y) ** 2) for y in X] for x in X])
    np.testing.assert_allclose(cost, expected, atol=1e-12)


def test_plan_marginals():
    rng = make_rng(0, "plan")
    X, Y = rng.standard_normal((12, 2)), rng.standard_normal((8, 2))
    plan = sinkhorn_plan(X, Y, np.eye(2), np.eye(2), 1.0)
    assert plan.shape == (12, 8)
    np.testing.assert_allclose(plan.sum(), 1.0)
    np.testing.assert_allclose(plan.sum(axis=1), np.full(12, 1 / 12), atol=1e-9)
    np.testing.assert_allclose(plan.sum(axis=0), np.full(8, 1 / 8), atol=1e-9)
