import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.integrate import solve_ivp

from attnflow.errors import CommutationViolated, UnsupportedVariant
from attnflow.linalg import check_symmetric, psd_sqrt, sym_eig, solve_spd
from attnflow.measures import ParameterSchedule, Variant


logger = logging.getLogger(__name__)

COMMUTATION_TOL = 1e-8


@dataclass(frozen=True)
class BlowUp:
    """
    Returned by closed forms whose solution ceased to exist before the requested time.

    :param t_max: the blow-up time, when the closed form determines it
    """
    t_max: Optional[float] = None


def _commutator_norm(X: np.ndarray, Y: np.ndarray) -> float:
    return float(np.linalg.norm(X @ Y - Y @ X))


def closed_form_commuting(sigma0: np.ndarray, A: np.ndarray, V: np.ndarray, t: float) -> Union[np.ndarray, BlowUp]:
    """
    Softmax covariance at time t when V commutes with Sigma_0 and with B = VA + A^T V^T:
    Sigma(t) = (Sigma_0^-1 - t B)^-1.
    """
    sigma0, A, V = (np.asarray(m, dtype=float) for m in (sigma0, A, V))
    B = V @ A + A.T @ V.T
    for name, other in (("Sigma_0", sigma0), ("VA + A^T V^T", B)):
        gap = _commutator_norm(V, other)
        if gap > COMMUTATION_TOL:
            raise CommutationViolated(f"V does not commute with {name} (commutator norm {gap:.3e})")
    if t == 0:
        return sigma0.copy()

    # Sigma_0^-1 - tB is singular exactly when t = 1 / lambda for an eigenvalue lambda of Sigma_0^1/2 B Sigma_0^1/2
    root = psd_sqrt(sigma0)
    scaled = root @ B @ root
    top_eigval = sym_eig((scaled + scaled.T) / 2)[0][0]
    t_max = 1 / top_eigval if top_eigval > 0 else None
    precision = solve_spd(sigma0, np.eye(len(sigma0))) - t * B
    precision = (precision + precision.T) / 2
    if sym_eig(precision)[0][-1] <= 0:
        return BlowUp(t_max)
    out = solve_spd(precision, np.eye(len(sigma0)), max_cond=np.inf)
    return (out + out.T) / 2


def _dim1_rhs(variant: Variant, a: float, v: float, k: Optional[float], eps: float):
    if variant == Variant.L2:
        assert k is not None, "The L2 closed form needs the scalar key k"
        return lambda t, s: 4 * a * v * s ** 2 / (1 + 2 * k ** 2 * s)
    if variant == Variant.SINKHORN:
        assert a != 0, "The Sinkhorn closed form needs a nonzero a"
        return lambda t, s: (2 * v / (eps * a)) * (np.sqrt(a ** 2 * s ** 2 + eps ** 2 / 4) - eps / 2)
    raise UnsupportedVariant(f"No one-dimensional reference for {variant.value}")


def closed_form_dim1(
    variant: Variant, a: float, v: float, s0: float, t: float, k: Optional[float] = None, eps: float = 1.0
) -> Union[float, BlowUp]:
    """
    Variance of a one-dimensional Gaussian at time t.

    Softmax is exact: s(t) = (1/s0 - 2vat)^-1. L2 and Sinkhorn integrate their scalar variance ODE to near machine
    precision with an adaptive high-order Runge-Kutta scheme.
    """
    assert s0 > 0, f"The initial variance must be positive, got {s0}"
    variant = Variant(variant)
    if variant == Variant.SOFTMAX:
        if a * v > 0 and t >= 1 / (2 * v * a * s0):
            return BlowUp(1 / (2 * v * a * s0))
        return 1 / (1 / s0 - 2 * v * a * t)

    if t == 0:
        return float(s0)
    rhs = _dim1_rhs(variant, a, v, k, eps)
    solution = solve_ivp(lambda t, y: [rhs(t, y[0])], (0.0, t), [s0], method="DOP853", rtol=1e-12, atol=1e-14)
    if not solution.success:
        logger.warning(f"Reference integration for {variant.value} stopped early: {solution.message}")
    return float(solution.y[0, -1])


def is_rank1_stationary(u: np.ndarray, A: np.ndarray, V: np.ndarray, tol: float = 1e-10) -> bool:
    """
    Whether Sigma = u u^T is a stationary point of the Softmax covariance dynamics, i.e. u lies in ker V or on the
    isotropic cone u^T (A + A^T) u = 0.
    """
    u = np.asarray(u, dtype=float)
    scale = np.dot(u, u)
    in_kernel = np.linalg.norm(V @ u) <= tol * max(np.linalg.norm(V) * np.sqrt(scale), 1e-300)
    isotropic = abs(u @ (A + A.T) @ u) <= tol * max(np.linalg.norm(A) * scale, 1e-300)
    return bool(in_kernel or isotropic)


def predict_stationary_rank_bound(A: np.ndarray, rel_tol: float = 1e-10) -> int:
    """
    Upper bound on the rank of stationary covariances of Softmax dynamics: dim ker A + min(#positive, #negative)
    eigenvalues of the symmetric matrix A.
    """
    eigvals, _ = sym_eig(check_symmetric(A))
    threshold = rel_tol * max(np.max(np.abs(eigvals)), 1e-300)
    n_pos = int(np.sum(eigvals > threshold))
    n_neg = int(np.sum(eigvals < -threshold))
    n_zero = len(eigvals) - n_pos - n_neg
    return n_zero + min(n_pos, n_neg)


def support_radius_bound(R0: float, V_schedule: ParameterSchedule, t: float) -> float:
    """
    R(t) = exp(int_0^t ||V(s)||_2 ds) R0, integrated segment by segment.

    The rate is AttentionParams.growth_rate: multi-head layers sum ||V_h||_2 over heads, and Sinkhorn layers use
    ||V||_2 / eps since their field carries a 1 / eps factor. For every other single-head variant it is ||V||_2.
    """
    assert R0 > 0, f"The initial radius must be positive, got {R0}"
    if not isinstance(V_schedule, ParameterSchedule):
        V_schedule = ParameterSchedule.constant(V_schedule)
    exponent = sum((stop - start) * params.growth_rate() for start, stop, params in V_schedule.segments_until(t))
    return float(np.exp(exponent) * R0)
