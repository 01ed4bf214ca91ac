import unittest

import numpy as np
import pytest

from attnflow.closed_forms import (
    BlowUp, closed_form_commuting, closed_form_dim1, is_rank1_stationary, predict_stationary_rank_bound,
    support_radius_bound
)
from attnflow.dynamics import SolverConfig, integrate_moments
from attnflow.errors import CommutationViolated, NotSymmetric, UnsupportedVariant
from attnflow.measures import AttentionParams, GaussianMeasure, ParameterSchedule, Variant


class TestClosedFormDim1(unittest.TestCase):
    def test_softmax(self):
        self.assertAlmostEqual(closed_form_dim1(Variant.SOFTMAX, 1.0, 1.0, 1.0, 0.25), 2.0)
        self.assertEqual(closed_form_dim1(Variant.SOFTMAX, 1.0, 1.0, 1.0, 0.5), BlowUp(0.5))
        self.assertEqual(closed_form_dim1("softmax", 1.0, 1.0, 1.0, 0.0), 1.0)
        # Decaying variance never blows up
        self.assertAlmostEqual(closed_form_dim1(Variant.SOFTMAX, 1.0, -1.0, 1.0, 1e6), 1 / (1 + 2e6))

    def test_unsupported(self):
        with self.assertRaises(UnsupportedVariant):
            closed_form_dim1(Variant.LINEAR, 1.0, 1.0, 1.0, 1.0)
        with self.assertRaises(AssertionError):
            closed_form_dim1(Variant.SOFTMAX, 1.0, 1.0, 0.0, 1.0)

    def test_l2_matches_moments(self):
        q, k, v = 1.5, 0.7, -0.6
        params = AttentionParams(Variant.L2, [[q]], [[k]], [[v]])
        trajectory = integrate_moments(params, GaussianMeasure([0.0], [[2.0]]), SolverConfig(dt=1e-3, t_end=3.0))
        expected = closed_form_dim1(Variant.L2, k * q, v, 2.0, 3.0, k=k)
        self.assertAlmostEqual(trajectory.final_state().sigma[0, 0], expected, delta=1e-7)

    def test_sinkhorn_matches_moments(self):
        params = AttentionParams(Variant.SINKHORN, [[1.0]], [[0.8]], [[-0.8]], eps=0.5)
        trajectory = integrate_moments(params, GaussianMeasure([0.2], [[1.5]]), SolverConfig(dt=1e-3, t_end=3.0))
        expected = closed_form_dim1(Variant.SINKHORN, 0.8, -0.8, 1.5, 3.0, eps=0.5)
        self.assertAlmostEqual(trajectory.final_state().sigma[0, 0], expected, delta=1e-7)


def test_commuting():
    sigma0 = np.eye(2)
    out = closed_form_commuting(sigma0, -np.eye(2), np.eye(2), 1.0)
    np.testing.assert_allclose(out, np.eye(2) / 3)

    # V = I commutes with everything: Sigma(t) = (Sigma_0^-1 - 2 t A)^-1 for symmetric A
    A = np.array([[0.2, 0.1], [0.1, -0.3]])
    sigma0 = np.array([[1.0, 0.2], [0.2, 0.5]])
    expected = np.linalg.inv(np.linalg.inv(sigma0) - 2 * 0.5 * A)
    np.testing.assert_allclose(closed_form_commuting(sigma0, A, np.eye(2), 0.5), expected, rtol=1e-10)
    np.testing.assert_array_equal(closed_form_commuting(sigma0, A, np.eye(2), 0.0), sigma0)


def test_commuting_blow_up():
    out = closed_form_commuting(np.eye(2), np.diag([1.0, -1.0]), np.eye(2), 1.0)
    assert isinstance(out, BlowUp)
    assert out.t_max == pytest.approx(0.5)


def test_commuting_against_integration():
    sigma0 = np.diag([1.0, 2.0])
    A = np.array([[-0.5, 0.3], [-0.3, -0.2]])
    V = np.diag([1.0, 1.0])
    params = AttentionParams(Variant.SOFTMAX, A, np.eye(2), V)
    trajectory = integrate_moments(params, GaussianMeasure(np.zeros(2), sigma0), SolverConfig(dt=1e-3, t_end=2.0))
    expected = closed_form_commuting(sigma0, A, V, 2.0)
    np.testing.assert_allclose(trajectory.final_state().sigma, expected, atol=1e-8)


def test_commutation_violated():
    with pytest.raises(CommutationViolated):
        closed_form_commuting(np.array([[1.0, 0.5], [0.5, 1.0]]), -np.eye(2), np.diag([1.0, 2.0]), 1.0)


def test_rank1_stationary():
    A = np.diag([1.0, -1.0])
    V = np.diag([1.0, 0.0])
    assert is_rank1_stationary([0.0, 1.0], A, V)
    # u = (1, 1) is on the isotropic cone of A
    assert is_rank1_stationary([1.0, 1.0], A, np.eye(2))
    assert not is_rank1_stationary([1.0, 0.5], A, np.eye(2))


@pytest.mark.parametrize("A, bound", [
    (np.diag([1.0, -1.0, 0.0]), 2),
    (np.eye(2), 0),
    (-np.eye(3), 0),
    (np.diag([1.0, 2.0, -1.0]), 1),
    (np.zeros((2, 2)), 2),
])
def test_stationary_rank_bound(A, bound):
    assert predict_stationary_rank_bound(A) == bound


def test_stationary_rank_bound_needs_symmetric():
    with pytest.raises(NotSymmetric):
        predict_stationary_rank_bound(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_support_radius_bound():
    params = AttentionParams(Variant.SOFTMAX, np.eye(2), np.eye(2), np.diag([2.0, -3.0]))
    assert support_radius_bound(1.5, params, 1.0) == pytest.approx(1.5 * np.exp(3.0))

    slow = AttentionParams(Variant.SOFTMAX, np.eye(2), np.eye(2), np.eye(2))
    schedule = ParameterSchedule([(0.0, slow), (1.0, params)])
    assert support_radius_bound(1.0, schedule, 2.0) == pytest.approx(np.exp(1.0 + 3.0))
    assert support_radius_bound(1.0, schedule, 0.5) == pytest.approx(np.exp(0.5))

    sinkhorn = AttentionParams(Variant.SINKHORN, np.eye(2), np.eye(2), np.diag([2.0, -3.0]), eps=0.5)
    assert support_radius_bound(1.0, sinkhorn, 1.0) == pytest.approx(np.exp(3.0 / 0.5))
