import unittest

import numpy as np
import pytest

from attnflow.attention import (
    masked_velocities, sinkhorn_candidate_c, velocity_discrete, velocity_gaussian, velocity_masked
)
from attnflow.errors import (
    DimensionMismatch, EmptyMask, MissingKernel, SingularA, SingularSigma, UnsupportedVariant
)
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, Variant
from attnflow.rng import make_rng, random_matrix, random_spd
from attnflow.sinkhorn import sinkhorn_kernel_discrete


def _params(variant, Q, K=None, V=None, **kwargs):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    d = Q.shape[1]
    K = np.eye(d) if K is None else K
    V = np.eye(d) if V is None else V
    return AttentionParams(variant, Q, K, V, **kwargs)


def _brute_force(variant, A, V, tokens, x):
    logits = np.array([(A @ x) @ y for y in tokens])
    weights = {
        Variant.SOFTMAX: np.exp(logits) / np.sum(np.exp(logits)),
        Variant.LINEAR: logits / len(tokens),
        Variant.EXP: np.exp(logits) / len(tokens),
        Variant.RELU: np.maximum(logits, 0) / len(tokens),
        Variant.SIGMOID: 1 / (1 + np.exp(-logits)) / len(tokens),
    }[variant]
    return sum(w * (V @ y) for w, y in zip(weights, tokens))


class TestVelocityDiscrete(unittest.TestCase):
    def test_two_tokens(self):
        mu = EmpiricalMeasure([[1.0, 0.0], [-1.0, 0.0]])
        params = _params(Variant.SOFTMAX, np.eye(2))
        np.testing.assert_allclose(velocity_discrete(params, mu, [0.0, 0.0]), [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(velocity_discrete(params, mu, [1.0, 0.0]), [np.tanh(1.0), 0.0], rtol=1e-12)

    def test_single_token(self):
        mu = EmpiricalMeasure([[0.5, -1.0]])
        V = np.array([[1.0, 2.0], [0.0, 3.0]])
        rng = make_rng(0, "single_token")
        for variant in (Variant.SOFTMAX, Variant.L2):
            params = _params(variant, random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), V)
            for x in rng.standard_normal((4, 2)):
                np.testing.assert_allclose(velocity_discrete(params, mu, x), V @ mu.tokens[0], rtol=1e-12)

    def test_batch_shapes(self):
        mu = EmpiricalMeasure(np.random.default_rng(0).standard_normal((5, 3)))
        params = _params(Variant.SOFTMAX, np.eye(3))
        self.assertEqual(velocity_discrete(params, mu, np.zeros(3)).shape, (3,))
        self.assertEqual(velocity_discrete(params, mu, np.zeros((7, 3))).shape, (7, 3))
        with self.assertRaises(DimensionMismatch):
            velocity_discrete(params, mu, np.zeros(2))

    def test_softmax_depends_on_a_only(self):
        rng = make_rng(0, "a_only")
        mu = EmpiricalMeasure(rng.standard_normal((6, 3)))
        Q, K = random_matrix(rng, 3, 3), random_matrix(rng, 3, 3)
        # (RQ, R^-T K) gives the same A = K^T Q
        R = random_matrix(rng, 3, 3) + 3 * np.eye(3)
        p1 = _params(Variant.SOFTMAX, Q, K)
        p2 = _params(Variant.SOFTMAX, R @ Q, np.linalg.inv(R).T @ K)
        x = rng.standard_normal((4, 3))
        np.testing.assert_allclose(velocity_discrete(p1, mu, x), velocity_discrete(p2, mu, x), rtol=1e-10)

    def test_boundedness(self):
        rng = make_rng(0, "bounded")
        tokens = rng.standard_normal((20, 2))
        mu = EmpiricalMeasure(tokens)
        V = random_matrix(rng, 2, 2)
        bound = np.linalg.norm(V, 2) * mu.radius()
        for variant in (Variant.SOFTMAX, Variant.L2):
            params = _params(variant, 3 * random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), V)
            velocities = velocity_discrete(params, mu, 10 * rng.standard_normal((50, 2)))
            self.assertLessEqual(np.max(np.linalg.norm(velocities, axis=1)), bound * (1 + 1e-12))

    def test_large_logits_do_not_overflow(self):
        mu = EmpiricalMeasure([[100.0], [-100.0]])
        params = _params(Variant.SOFTMAX, [[10.0]])
        np.testing.assert_allclose(velocity_discrete(params, mu, [1.0]), [100.0])

    def test_sinkhorn_needs_kernel(self):
        mu = EmpiricalMeasure([[1.0], [-1.0]])
        with self.assertRaises(MissingKernel):
            velocity_discrete(_params(Variant.SINKHORN, [[1.0]]), mu, [0.0])

    def test_masked_is_rejected(self):
        mu = EmpiricalMeasure([[1.0], [-1.0]])
        with self.assertRaises(UnsupportedVariant):
            velocity_discrete(_params(Variant.MASKED, [[1.0]]), mu, [0.0])


@pytest.mark.parametrize("variant", [Variant.SOFTMAX, Variant.LINEAR, Variant.EXP, Variant.RELU, Variant.SIGMOID])
def test_discrete_variants_against_brute_force(variant):
    rng = make_rng(0, "brute_force", variant.value)
    tokens = rng.standard_normal((7, 3))
    Q, K, V = (random_matrix(rng, 3, 3) for _ in range(3))
    params = _params(variant, Q, K, V)
    for x in rng.standard_normal((3, 3)):
        expected = _brute_force(variant, K.T @ Q, V, tokens, x)
        np.testing.assert_allclose(velocity_discrete(params, EmpiricalMeasure(tokens), x), expected, rtol=1e-10)


def test_l2_against_brute_force():
    rng = make_rng(0, "l2_brute_force")
    tokens = rng.standard_normal((6, 2))
    Q, K, V = (random_matrix(rng, 2, 2) for _ in range(3))
    x = rng.standard_normal(2)
    logits = np.array([-np.sum((Q @ x - K @ y) ** 2) for y in tokens])
    weights = np.exp(logits) / np.sum(np.exp(logits))
    expected = sum(w * (V @ y) for w, y in zip(weights, tokens))
    np.testing.assert_allclose(velocity_discrete(_params(Variant.L2, Q, K, V), EmpiricalMeasure(tokens), x), expected)


def test_multi_head_is_sum_of_heads():
    rng = make_rng(0, "multi_head")
    Q, K = random_matrix(rng, 4, 4), random_matrix(rng, 4, 4)
    Vs = [random_matrix(rng, 4, 4), random_matrix(rng, 4, 4)]
    params = AttentionParams.from_stacked(Q, K, Vs)
    mu = EmpiricalMeasure(rng.standard_normal((5, 4)))
    x = rng.standard_normal((3, 4))
    expected = sum(
        velocity_discrete(AttentionParams(Variant.SOFTMAX, h.Q, h.K, h.V), mu, x) for h in params.heads
    )
    np.testing.assert_allclose(velocity_discrete(params, mu, x), expected)


def test_sinkhorn_velocity_on_support():
    rng = make_rng(0, "sinkhorn_velocity")
    mu = EmpiricalMeasure(rng.standard_normal((8, 2)))
    params = _params(Variant.SINKHORN, random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), eps=0.7)
    kernel = sinkhorn_kernel_discrete(mu, params)
    # On the support, the extended kernel rows are the converged rows
    expected = kernel.matrix @ (mu.tokens @ params.V.T) / (mu.n * params.eps)
    np.testing.assert_allclose(velocity_discrete(params, mu, mu.tokens, kernel), expected, atol=1e-8)


def test_linear_eps_expansion():
    rng = make_rng(0, "linear_eps")
    mu = EmpiricalMeasure(rng.standard_normal((10, 2)))
    Q, K, V = (random_matrix(rng, 2, 2) for _ in range(3))
    x = rng.standard_normal(2)
    residuals = []
    for eps in (1e-2, 1e-3, 1e-4):
        softmax = _params(Variant.SOFTMAX, eps * Q, K, V / eps)
        linear = _params(Variant.LINEAR_EPS, Q, K, V, eps=eps)
        residuals.append(np.linalg.norm(velocity_discrete(softmax, mu, x) - velocity_discrete(linear, mu, x)))
    assert residuals[1] < 0.2 * residuals[0]
    assert residuals[2] < 0.2 * residuals[1]


class TestVelocityGaussian(unittest.TestCase):
    def test_softmax(self):
        field = velocity_gaussian(_params(Variant.SOFTMAX, np.eye(2)), GaussianMeasure(np.zeros(2), np.eye(2)))
        np.testing.assert_allclose(field.M, np.eye(2))
        np.testing.assert_allclose(field.b, np.zeros(2))

        field = velocity_gaussian(_params(Variant.SOFTMAX, [[3.0]], V=[[2.0]]), GaussianMeasure([1.0], [[0.5]]))
        np.testing.assert_allclose(field.M, [[3.0]])
        np.testing.assert_allclose(field.b, [2.0])

    def test_sinkhorn_dim1(self):
        params = _params(Variant.SINKHORN, [[1.0]], eps=1.0)
        field = velocity_gaussian(params, GaussianMeasure([0.0], [[1.0]]))
        np.testing.assert_allclose(field.M, [[np.sqrt(1.25) - 0.5]], rtol=1e-12)
        np.testing.assert_allclose(field.b, [0.0], atol=1e-15)

    def test_linear_variants(self):
        g = GaussianMeasure([1.0, -1.0], [[1.0, 0.2], [0.2, 0.5]])
        A = np.array([[0.5, 1.0], [0.0, -1.0]])
        V = np.array([[1.0, 0.0], [1.0, 2.0]])
        linear = velocity_gaussian(_params(Variant.LINEAR, A, V=V), g)
        np.testing.assert_allclose(linear.M, V @ (g.sigma + np.outer(g.alpha, g.alpha)) @ A)
        np.testing.assert_allclose(linear.b, 0.0)
        linear_eps = velocity_gaussian(_params(Variant.LINEAR_EPS, A, V=V, eps=0.5), g)
        np.testing.assert_allclose(linear_eps.M, V @ g.sigma @ A)
        np.testing.assert_allclose(linear_eps.b, 2 * V @ g.alpha)

    def test_l2_against_precision_form(self):
        rng = make_rng(0, "l2_gaussian")
        Q, K, V = (random_matrix(rng, 3, 3) for _ in range(3))
        g = GaussianMeasure(rng.standard_normal(3), random_spd(rng, 3))
        field = velocity_gaussian(_params(Variant.L2, Q, K, V), g)
        # V (Sigma^-1 + 2 K^T K)^-1 (Sigma^-1 alpha + 2 K^T Q x)
        inner = np.linalg.inv(np.linalg.inv(g.sigma) + 2 * K.T @ K)
        np.testing.assert_allclose(field.M, V @ inner @ (2 * K.T @ Q), rtol=1e-8)
        np.testing.assert_allclose(field.b, V @ inner @ np.linalg.solve(g.sigma, g.alpha), rtol=1e-8)

    def test_multi_head(self):
        rng = make_rng(0, "multi_head_gaussian")
        params = AttentionParams.from_stacked(random_matrix(rng, 2, 2), np.eye(2), [np.eye(2), 2 * np.eye(2)])
        g = GaussianMeasure(rng.standard_normal(2), random_spd(rng, 2))
        field = velocity_gaussian(params, g)
        expected_M = sum(h.V @ g.sigma @ h.A for h in params.heads)
        np.testing.assert_allclose(field.M, expected_M)
        np.testing.assert_allclose(field.b, 3 * g.alpha)

    def test_errors(self):
        g = GaussianMeasure(np.zeros(2), np.eye(2))
        for variant in (Variant.SIGMOID, Variant.RELU, Variant.EXP, Variant.MASKED):
            with self.assertRaises(UnsupportedVariant):
                velocity_gaussian(_params(variant, np.eye(2)), g)
        with self.assertRaises(SingularA):
            velocity_gaussian(_params(Variant.SINKHORN, [[1.0, 0.0], [0.0, 0.0]]), g)
        singular = GaussianMeasure(np.zeros(2), np.diag([1.0, 0.0]))
        with self.assertRaises(SingularSigma):
            velocity_gaussian(_params(Variant.L2, np.eye(2)), singular)
        with self.assertRaises(SingularSigma):
            velocity_gaussian(_params(Variant.SINKHORN, np.eye(2)), singular)
        with self.assertRaises(DimensionMismatch):
            velocity_gaussian(_params(Variant.SOFTMAX, np.eye(3)), g)
        # Softmax accepts a degenerate covariance
        velocity_gaussian(_params(Variant.SOFTMAX, np.eye(2)), singular)


def test_sinkhorn_candidates():
    rng = make_rng(0, "candidates")
    sigma = random_spd(rng, 2)
    symmetric = random_spd(rng, 2)
    np.testing.assert_allclose(
        sinkhorn_candidate_c(sigma, symmetric, 0.5, "lemma"), sinkhorn_candidate_c(sigma, symmetric, 0.5, "transposed"),
        atol=1e-12,
    )
    shear = np.array([[1.0, 2.0], [0.0, 1.0]])
    gap = sinkhorn_candidate_c(sigma, shear, 0.5, "lemma") - sinkhorn_candidate_c(sigma, shear, 0.5, "transposed")
    assert np.linalg.norm(gap) > 1e-3


class TestMaskedVelocity(unittest.TestCase):
    def setUp(self):
        self.mu_bar = EmpiricalMeasure([[1.0], [-1.0]], [0.25, 0.75])
        self.params = AttentionParams(Variant.MASKED, [[0.0]], [[1.0]], [[1.0]])

    def test_visible_tokens(self):
        np.testing.assert_array_equal(velocity_masked(self.params, self.mu_bar, 0.5, [3.0]), [0.0, 1.0])
        np.testing.assert_array_equal(velocity_masked(self.params, self.mu_bar, 1.0, [3.0]), [0.0, 0.0])
        with self.assertRaises(EmptyMask):
            velocity_masked(self.params, self.mu_bar, 0.1, [3.0])
        with self.assertRaises(DimensionMismatch):
            velocity_masked(self.params, self.mu_bar.space_marginal(), 1.0, [3.0])

    def test_full_mask_matches_unmasked(self):
        rng = make_rng(0, "masked_full")
        for inner in (Variant.SOFTMAX, Variant.L2, Variant.SINKHORN):
            Q, K, V = (random_matrix(rng, 2, 2) for _ in range(3))
            params = AttentionParams(Variant.MASKED, Q, K, V, inner=inner)
            mu_bar = EmpiricalMeasure.with_sequence_positions(rng.standard_normal((6, 2)))
            x = rng.standard_normal(2)
            unmasked = params.unmasked()
            kernel = None
            if inner == Variant.SINKHORN:
                kernel = sinkhorn_kernel_discrete(mu_bar.space_marginal(), unmasked)
            expected = velocity_discrete(unmasked, mu_bar.space_marginal(), x, kernel)
            lifted = velocity_masked(params, mu_bar, 1.0, x)
            self.assertEqual(lifted[0], 0.0)
            np.testing.assert_allclose(lifted[1:], expected, atol=1e-12)

    def test_masked_velocities(self):
        velocities = masked_velocities(self.params, self.mu_bar)
        # The first token only sees itself, the second sees both
        np.testing.assert_array_equal(velocities, [[1.0], [0.0]])
