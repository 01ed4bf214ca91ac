import logging
import sys

import numpy as np

from attnflow.closed_forms import closed_form_commuting, predict_stationary_rank_bound
from attnflow.dynamics import SolverConfig, integrate_moments, integrate_particles
from attnflow.energetics import Energy, energy_monotonicity_report
from attnflow.linalg import rank_eps
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, Variant
from attnflow.rng import make_rng
from attnflow.transport import bures_wasserstein, eot_gaussian_value
from attnflow.validation import render_report, run_validation_suite


logging.basicConfig(level="INFO", stream=sys.stdout)
rng = make_rng(0, "examples")


# A Softmax layer with V = I and A symmetric negative: the covariance of a Gaussian collapses to the kernel of A
A = -np.array([[1.0, 0.0], [0.0, 0.0]])
softmax = AttentionParams(Variant.SOFTMAX, Q=A, K=np.eye(2), V=np.eye(2))
g0 = GaussianMeasure([0.5, -0.5], [[1.0, 0.3], [0.3, 1.0]])
trajectory = integrate_moments(softmax, g0, SolverConfig(dt=0.05, t_end=200.0, record_every=100))
sigma = trajectory.final_state().sigma
print(f"Softmax covariance at t=200:\n{sigma}")
print(f"Rank {rank_eps(sigma, 1e-2)}, stationary rank bound {predict_stationary_rank_bound(A)}")

# With V commuting with everything, the covariance has a closed form
expected = closed_form_commuting(g0.sigma, A, np.eye(2), 200.0)
print(f"Gap to the closed form: {np.linalg.norm(sigma - expected):.2e}")

# The same layer acting on 64 sampled tokens
tokens = EmpiricalMeasure(g0.sample(rng, 64))
particles = integrate_particles(softmax, tokens, SolverConfig(dt=0.05, t_end=5.0, record_every=20))
print(f"Empirical covariance of the tokens at t=5:\n{particles.final_state().covariance()}")

# Sinkhorn attention with A = A^T = -V is a gradient flow: its energy decreases
sinkhorn = AttentionParams(Variant.SINKHORN, Q=[[1.0]], K=[[0.8]], V=[[-0.8]], eps=1.0)
flow = integrate_moments(sinkhorn, GaussianMeasure([0.3], [[1.5]]), SolverConfig(dt=0.01, t_end=5.0, record_every=50))
report = energy_monotonicity_report(flow, Energy.SINK_GAUSSIAN, sinkhorn)
print(f"Sinkhorn energy from {report.values[0]:.4f} to {report.values[-1]:.4f}, non-increasing: {report.passed}")

# Entropic transport and Bures-Wasserstein distances between Gaussians
g1 = GaussianMeasure([1.0, 0.0], [[2.0, 0.5], [0.5, 1.0]])
print(f"W2(g0, g1) = {bures_wasserstein(g0, g1):.4f}")
print(f"OT_eps(g0, g1) = {eot_gaussian_value(g0, g1, np.eye(2), np.eye(2), 1.0):.4f}")

# A few quick validation checks, rendered the way `attnflow validate` prints them
report = run_validation_suite(only=["blowup_time", "masked_invariants", "sinkhorn_bistochastic"])
print(render_report(report))
