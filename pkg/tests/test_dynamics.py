import unittest

import numpy as np
import pytest
from scipy.linalg import expm

from attnflow.closed_forms import closed_form_dim1, support_radius_bound
from attnflow.dynamics import (
    Method, SolverConfig, integrate_moments, integrate_particles, moment_rhs, rank1_flow, rank1_residual
)
from attnflow.errors import ConfigError, DimensionMismatch, SingularSigma
from attnflow.linalg import rank_eps
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, ParameterSchedule, Status, Variant
from attnflow.rng import make_rng, random_matrix


def _softmax_1d(a, v):
    return AttentionParams(Variant.SOFTMAX, [[a]], [[1.0]], [[v]])


class TestSolverConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = SolverConfig()
        self.assertEqual(cfg.method, Method.RK4)
        self.assertEqual(SolverConfig(method="euler").method, Method.EULER)

    def test_invalid(self):
        for kwargs in (
            dict(dt=0.0), dict(dt=2.0, t_end=1.0), dict(blowup_threshold=0.5), dict(record_every=0),
            dict(convergence_tol=-1.0),
        ):
            with self.assertRaises(ConfigError, msg=str(kwargs)):
                SolverConfig(**kwargs)
        with self.assertRaises(ValueError):
            SolverConfig(method="midpoint")


@pytest.mark.parametrize("s0", [0.5, 1.0, 2.0])
def test_softmax_moments_match_closed_form(s0):
    params = _softmax_1d(1.0, -1.0)
    trajectory = integrate_moments(params, GaussianMeasure([0.3], [[s0]]), SolverConfig(dt=1e-3, t_end=2.0))
    assert trajectory.status == Status.COMPLETED
    for t, g in zip(trajectory.times, trajectory.states):
        assert abs(g.sigma[0, 0] - closed_form_dim1(Variant.SOFTMAX, 1.0, -1.0, s0, t)) <= 1e-8


def test_moment_blow_up():
    trajectory = integrate_moments(_softmax_1d(1.0, 1.0), GaussianMeasure([0.0], [[1.0]]), SolverConfig(dt=1e-3))
    assert trajectory.status == Status.BLOW_UP
    assert trajectory.t_star == pytest.approx(0.5, abs=1e-2)
    trajectory.raise_for_status()


def test_moments_keep_sigma_symmetric():
    rng = make_rng(0, "symmetric_moments")
    Q, K, V = (random_matrix(rng, 3, 3) for _ in range(3))
    params = AttentionParams(Variant.L2, Q, K, V)
    trajectory = integrate_moments(params, GaussianMeasure(np.zeros(3), np.eye(3)), SolverConfig(dt=0.05, t_end=1.0))
    for g in trajectory.states:
        np.testing.assert_array_equal(g.sigma, g.sigma.T)


def test_moments_numerical_failure():
    params = AttentionParams(Variant.L2, np.eye(2), np.eye(2), np.eye(2))
    trajectory = integrate_moments(params, GaussianMeasure(np.zeros(2), np.diag([1.0, 0.0])), SolverConfig())
    assert trajectory.status == Status.NUMERICAL_FAILURE
    assert trajectory.t_star == 0.0
    assert isinstance(trajectory.error, SingularSigma)


def test_moment_rhs():
    g = GaussianMeasure([1.0, 0.0], np.eye(2))
    params = AttentionParams(Variant.SOFTMAX, np.eye(2), np.eye(2), -np.eye(2))
    alpha_dot, sigma_dot = moment_rhs(params, g)
    # M = -I and b = -alpha
    np.testing.assert_allclose(alpha_dot, [-2.0, 0.0])
    np.testing.assert_allclose(sigma_dot, -2 * np.eye(2))


def test_dimension_mismatch():
    params = AttentionParams(Variant.SOFTMAX, np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(DimensionMismatch):
        integrate_moments(params, GaussianMeasure([0.0], [[1.0]]), SolverConfig())
    with pytest.raises(DimensionMismatch):
        integrate_particles(params, EmpiricalMeasure(np.zeros((4, 3))), SolverConfig())


class TestIntegrateParticles(unittest.TestCase):
    def test_single_token_is_linear(self):
        V = np.array([[-1.0, 0.5], [0.0, -0.5]])
        params = AttentionParams(Variant.SOFTMAX, np.eye(2), np.eye(2), V)
        x0 = np.array([[1.0, 2.0]])
        trajectory = integrate_particles(params, EmpiricalMeasure(x0), SolverConfig(dt=0.01, t_end=1.0))
        np.testing.assert_allclose(trajectory.final_state().tokens[0], expm(V) @ x0[0], rtol=1e-8)

    def test_record_every(self):
        params = AttentionParams(Variant.SOFTMAX, np.eye(1), np.eye(1), -np.eye(1))
        trajectory = integrate_particles(
            params, EmpiricalMeasure([[1.0]]), SolverConfig(dt=0.1, t_end=1.0, record_every=5)
        )
        np.testing.assert_allclose(trajectory.times, [0.0, 0.5, 1.0])
        self.assertEqual(trajectory.t_final, 1.0)

    def test_early_convergence(self):
        params = AttentionParams(Variant.SOFTMAX, np.eye(1), np.eye(1), -np.eye(1))
        cfg = SolverConfig(dt=0.1, t_end=100.0, convergence_tol=1e-3, convergence_patience=10, record_every=1000)
        trajectory = integrate_particles(params, EmpiricalMeasure([[1.0]]), cfg)
        self.assertEqual(trajectory.status, Status.COMPLETED)
        self.assertIsNotNone(trajectory.converged_at)
        self.assertLess(trajectory.t_final, 20.0)
        self.assertEqual(trajectory.times[-1], trajectory.converged_at)

    def test_schedule_breakpoints(self):
        still = AttentionParams(Variant.SOFTMAX, np.eye(1), np.eye(1), np.zeros((1, 1)))
        decay = AttentionParams(Variant.SOFTMAX, np.eye(1), np.eye(1), -np.eye(1))
        schedule = ParameterSchedule([(0.0, still), (0.5, decay)])
        trajectory = integrate_particles(schedule, EmpiricalMeasure([[1.0]]), SolverConfig(dt=0.3, t_end=1.0))
        np.testing.assert_allclose(trajectory.times, [0.0, 0.3, 0.5, 0.8, 1.0])
        self.assertEqual(trajectory.states[2].tokens[0, 0], 1.0)
        self.assertAlmostEqual(trajectory.final_state().tokens[0, 0], np.exp(-0.5), delta=1e-3)

    def test_sinkhorn_mean(self):
        # Bistochastic kernels move the mean along alpha' = V alpha / eps
        rng = make_rng(0, "sinkhorn_mean")
        V = random_matrix(rng, 2, 2) / 2
        params = AttentionParams(Variant.SINKHORN, random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), V, eps=2.0)
        x0 = EmpiricalMeasure(rng.standard_normal((10, 2)) + 1.0)
        trajectory = integrate_particles(params, x0, SolverConfig(dt=0.05, t_end=0.5))
        expected = expm(0.5 * V / 2.0) @ x0.mean()
        np.testing.assert_allclose(trajectory.final_state().mean(), expected, atol=1e-6)

    def test_masked_positions_are_frozen(self):
        rng = make_rng(0, "masked_dynamics")
        V = random_matrix(rng, 2, 2) / 2
        params = AttentionParams(Variant.MASKED, random_matrix(rng, 2, 2), random_matrix(rng, 2, 2), V)
        mu_bar = EmpiricalMeasure.with_sequence_positions(rng.standard_normal((6, 2)))
        trajectory = integrate_particles(params, mu_bar, SolverConfig(dt=0.05, t_end=1.0))
        final = trajectory.final_state()
        np.testing.assert_array_equal(final.positions, mu_bar.positions)
        # The first token only ever sees itself
        np.testing.assert_allclose(final.tokens[0], expm(V) @ mu_bar.tokens[0], rtol=1e-6)

        with self.assertRaises(DimensionMismatch):
            integrate_particles(params, mu_bar.space_marginal(), SolverConfig())

    def test_particle_blow_up(self):
        params = AttentionParams(Variant.SOFTMAX, np.eye(1), np.eye(1), 5 * np.eye(1))
        trajectory = integrate_particles(
            params, EmpiricalMeasure([[1.0]]), SolverConfig(dt=0.1, t_end=10.0, blowup_threshold=1e6)
        )
        self.assertEqual(trajectory.status, Status.BLOW_UP)
        self.assertAlmostEqual(trajectory.t_star, np.log(1e6) / 5, delta=0.1)

    def test_support_stays_within_radius_bound(self):
        rng = make_rng(0, "support")
        x0 = random_matrix(rng, 10, 2)
        R0 = np.linalg.norm(x0, axis=1).max()
        for variant in (Variant.SOFTMAX, Variant.L2):
            Q, K, V = (random_matrix(rng, 2, 2) for _ in range(3))
            params = AttentionParams(variant, Q, K, V)
            trajectory = integrate_particles(params, EmpiricalMeasure(x0), SolverConfig(dt=0.01, t_end=1.0))
            self.assertEqual(trajectory.status, Status.COMPLETED)
            for t, state in zip(trajectory.times, trajectory.states):
                radius = np.linalg.norm(state.tokens, axis=1).max()
                self.assertLessEqual(radius, support_radius_bound(R0, params, t) * (1 + 1e-6))


def test_rank1_flow():
    u0 = np.array([2.0])
    trajectory = rank1_flow(u0, [[-1.0]], [[1.0]], SolverConfig(dt=1e-3, t_end=1.0))
    # u' = -u^3
    expected = u0[0] / np.sqrt(1 + 2 * u0[0] ** 2 * 1.0)
    assert trajectory.final_state()[0] == pytest.approx(expected, rel=1e-6)
    with pytest.raises(ValueError):
        rank1_flow(np.zeros(2), np.eye(2), np.eye(2), SolverConfig())


def test_rank1_flow_matches_the_moment_equation():
    rng = make_rng(0, "rank1")
    u0 = np.array([1.0, 0.5, -0.3])
    B = random_matrix(rng, 3, 3)
    A = -(B @ B.T) / 3 - 0.2 * np.eye(3)
    V = np.eye(3) + 0.2 * random_matrix(rng, 3, 3)
    params = AttentionParams(Variant.SOFTMAX, A, np.eye(3), V)
    cfg = SolverConfig(dt=1e-3, t_end=1.0, record_every=100)

    factors = rank1_flow(u0, A, V, cfg)
    moments = integrate_moments(params, GaussianMeasure(np.zeros(3), np.outer(u0, u0)), cfg)
    assert factors.times == moments.times
    assert len(factors.times) == 11
    for u, state in zip(factors.states, moments.states):
        sigma = np.outer(u, u)
        assert np.linalg.norm(sigma - state.sigma) < 1e-6
        assert rank_eps(sigma) == 1
        assert rank_eps(state.sigma) == 1
        assert rank1_residual(params, u) < 1e-10
