import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from attnflow.errors import AttnFlowError, DimensionMismatch, Overflow, OutOfDomain, UnsupportedVariant
from attnflow.linalg import solve_spd
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, Trajectory
from attnflow.sinkhorn import DiscreteKernel, sinkhorn_kernel_discrete
from attnflow.transport import entropic_bures


logger = logging.getLogger(__name__)

EXPONENT_LIMIT = 700.0
MONOTONICITY_ALLOWANCE = 1e-6


class Energy(str, Enum):
    SOFTMAX_GAUSSIAN = "softmax_gaussian"
    SINK_GAUSSIAN = "sink_gaussian"
    INTERACTION_DISCRETE = "interaction_discrete"
    SINK_DISCRETE = "sink_discrete"


def interaction_energy_discrete(mu: EmpiricalMeasure, A: np.ndarray) -> float:
    """
    (1 / 2n^2) sum_ij exp(A x_i . x_j)
    """
    A = np.asarray(A, dtype=float)
    if A.shape != (mu.d, mu.d):
        raise DimensionMismatch(f"Matrix of shape {A.shape} for tokens in dimension {mu.d}")
    exponents = (mu.tokens @ A.T) @ mu.tokens.T
    top = np.max(exponents)
    if top > EXPONENT_LIMIT:
        raise Overflow(f"Interaction exponent {top:.1f} exceeds {EXPONENT_LIMIT}")
    return float(0.5 * np.mean(np.exp(exponents)))


def softmax_energy_gaussian(g: GaussianMeasure, A: np.ndarray) -> float:
    """
    Closed form of (1/2) E[exp(A x . y)] for x, y independent draws of N(alpha, Sigma). The expectation is finite
    only when Sigma^-1 - A Sigma A^T is positive definite.
    """
    A = np.asarray(A, dtype=float)
    d = g.d
    sigma_inv = solve_spd(g.sigma, np.eye(d))
    precision = sigma_inv - A @ g.sigma @ A.T
    precision = (precision + precision.T) / 2
    if np.linalg.eigvalsh(precision)[0] <= 0:
        raise OutOfDomain("Sigma^-1 - A Sigma A^T is not positive definite, the interaction energy diverges")
    det = np.linalg.det(np.eye(d) - A @ g.sigma @ A.T @ g.sigma)
    if abs(det) < 1e-10:
        raise OutOfDomain(f"det(I - A Sigma A^T Sigma) = {det:.3e} is too close to 0")

    shifted = (A + sigma_inv) @ g.alpha
    exponent = 0.5 * (shifted @ np.linalg.solve(precision, shifted) - g.alpha @ sigma_inv @ g.alpha)
    return float(np.exp(exponent) / (2 * np.sqrt(abs(det))))


def sink_energy_gaussian(g: GaussianMeasure, Q: np.ndarray, K: np.ndarray, eps: float) -> float:
    Q, K = np.asarray(Q, dtype=float), np.asarray(K, dtype=float)
    bures = entropic_bures(g.sigma, g.sigma, Q, K, eps)
    traces = np.trace(Q @ g.sigma @ Q.T) + np.trace(K @ g.sigma @ K.T)
    mean_term = g.alpha @ (Q.T @ Q + K.T @ K) @ g.alpha
    return float((-bures + traces + mean_term) / (4 * eps))


def sink_energy_discrete(mu: EmpiricalMeasure, params: AttentionParams, kernel: Optional[DiscreteKernel] = None) -> float:
    """
    Sinkhorn energy of an empirical measure: minus half the entropic transport value of mu onto itself, plus the
    quadratic confinement (1/4 eps) mean(|Q x_i|^2 + |K x_i|^2).
    """
    if kernel is None:
        kernel = sinkhorn_kernel_discrete(mu, params)
    # log(kappa / kappa0) = f_i + g_j
    log_ratio = kernel.f[:, None] + kernel.g[None, :]
    transport = np.mean(kernel.matrix * log_ratio)
    confinement = np.mean(np.sum((mu.tokens @ params.Q.T) ** 2 + (mu.tokens @ params.K.T) ** 2, axis=1))
    return float(-0.5 * transport + confinement / (4 * params.eps))


def gradient_flow_condition(params: AttentionParams, energy: Energy, tol: float = 1e-10) -> bool:
    """
    Whether the parameters make the flow a (possibly twisted) gradient flow of the energy: A = A^T = -V for the
    Sinkhorn energies, and B = -V A^-T symmetric positive definite for the interaction energies. The energies
    take a single (Q, K, V) triple, so layers with several heads never qualify.
    """
    if params.uses_heads:
        logger.info(f"No single-head energy is available for a layer with {len(params.heads)} heads")
        return False
    A, V = params.A, params.V
    scale = max(np.linalg.norm(A), np.linalg.norm(V), 1e-300)
    if energy in (Energy.SINK_GAUSSIAN, Energy.SINK_DISCRETE):
        return bool(np.linalg.norm(A - A.T) <= tol * scale and np.linalg.norm(A + V) <= tol * scale)
    try:
        B = -V @ np.linalg.inv(A.T)
    except np.linalg.LinAlgError:
        return False
    if np.linalg.norm(B - B.T) > tol * max(np.linalg.norm(B), 1e-300):
        return False
    return bool(np.linalg.eigvalsh((B + B.T) / 2)[0] > 0)


@dataclass
class EnergyReport:
    energy: Energy
    times: List[float]
    values: List[float]
    condition_met: bool
    max_increment: float = 0.0
    passed: bool = True
    notes: List[str] = field(default_factory=list)


def _evaluate(energy: Energy, state, params: AttentionParams) -> float:
    if params.uses_heads and energy in (Energy.SINK_GAUSSIAN, Energy.SINK_DISCRETE):
        raise UnsupportedVariant(f"The {energy.value} energy is defined for single-head layers only")
    if energy == Energy.SOFTMAX_GAUSSIAN:
        return softmax_energy_gaussian(state, params.A)
    if energy == Energy.SINK_GAUSSIAN:
        return sink_energy_gaussian(state, params.Q, params.K, params.eps)
    if energy == Energy.INTERACTION_DISCRETE:
        return interaction_energy_discrete(state, params.A)
    return sink_energy_discrete(state, params)


def energy_monotonicity_report(trajectory: Trajectory, energy: Energy, params: AttentionParams) -> EnergyReport:
    """
    Evaluates an energy along a trajectory and records whether it is non-increasing. An increment passes when it
    is at most 1e-6 * (1 + |energy|). Nothing is raised: states where the energy cannot be evaluated are recorded
    as NaN with a note.
    """
    energy = Energy(energy)
    condition_met = gradient_flow_condition(params, energy)
    if not condition_met:
        logger.warning(f"The parameters do not satisfy the gradient-flow condition of the {energy.value} energy")
    report = EnergyReport(energy, list(trajectory.times), [], condition_met)

    for t, state in zip(trajectory.times, trajectory.states):
        try:
            report.values.append(_evaluate(energy, state, params))
        except AttnFlowError as e:
            report.values.append(np.nan)
            report.notes.append(f"t={t:.6g}: {e}")
            report.passed = False

    for prev, value in zip(report.values, report.values[1:]):
        if np.isnan(prev) or np.isnan(value):
            continue
        increment = value - prev
        report.max_increment = max(report.max_increment, increment)
        if increment > MONOTONICITY_ALLOWANCE * (1 + abs(prev)):
            report.passed = False
    if not report.passed:
        logger.info(f"Energy {energy.value} increased by up to {report.max_increment:.3e} along the trajectory")
    return report
