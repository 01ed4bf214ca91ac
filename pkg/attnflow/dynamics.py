import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

from attnflow.attention import velocity_discrete, velocity_gaussian, masked_velocities
from attnflow.errors import AttnFlowError, ConfigError, DimensionMismatch, StepFailure
from attnflow.measures import (
    AttentionParams, EmpiricalMeasure, GaussianMeasure, ParameterSchedule, Status, Trajectory, Variant
)
from attnflow.sinkhorn import sinkhorn_kernel_discrete


logger = logging.getLogger(__name__)

RANK1_RESIDUAL_TOL = 1e-8


class Method(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class SolverConfig:
    """
    :param method: the time stepper
    :param dt: the fixed step size; steps are shortened to land on schedule breakpoints and on t_end
    :param t_end: the integration horizon
    :param blowup_threshold: a state whose size (Frobenius norm of the covariance, or largest token norm) exceeds
    this value ends the trajectory with a blow-up
    :param record_every: only every record_every-th step is recorded, the final state always is
    :param convergence_tol: when set, the integration stops early once the state's rate of change stays below
    convergence_tol * (1 + size) for convergence_patience consecutive steps
    :param convergence_patience: see convergence_tol
    :param sinkhorn_iters: iteration cap of the Sinkhorn kernels recomputed at every stage of particle runs
    :param sinkhorn_tol: marginal tolerance of these kernels
    """
    method: Method = Method.RK4
    dt: float = 1e-2
    t_end: float = 1.0
    blowup_threshold: float = 1e8
    record_every: int = 1
    convergence_tol: Optional[float] = None
    convergence_patience: int = 100
    sinkhorn_iters: int = 10000
    sinkhorn_tol: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0 < self.dt < self.t_end:
            raise ConfigError(f"The step size must satisfy 0 < dt < t_end, got dt={self.dt}, t_end={self.t_end}")
        if self.blowup_threshold <= 1:
            raise ConfigError(f"The blow-up threshold must exceed 1, got {self.blowup_threshold}")
        if self.record_every < 1 or self.convergence_patience < 1:
            raise ConfigError("record_every and convergence_patience must be positive")
        if self.convergence_tol is not None and self.convergence_tol <= 0:
            raise ConfigError(f"The convergence tolerance must be positive, got {self.convergence_tol}")


Rhs = Callable[[float, AttentionParams, np.ndarray], np.ndarray]


def _step(rhs: Rhs, method: Method, params: AttentionParams, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, params, y)
    if method == Method.EULER:
        return y + h * k1
    k2 = rhs(t + h / 2, params, y + (h / 2) * k1)
    k3 = rhs(t + h / 2, params, y + (h / 2) * k2)
    k4 = rhs(t + h, params, y + h * k3)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate(
    rhs: Rhs,
    y0: np.ndarray,
    schedule: ParameterSchedule,
    cfg: SolverConfig,
    size_fn: Callable[[np.ndarray], float],
    make_state: Callable[[np.ndarray], object],
    rate_fn: Optional[Callable[[np.ndarray, np.ndarray, float], float]] = None,
    post_step: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Trajectory:
    t_end, threshold = cfg.t_end, cfg.blowup_threshold
    rate_fn = rate_fn or (lambda y_new, y_old, h: np.linalg.norm(y_new - y_old) / h)

    trajectory = Trajectory([0.0], [make_state(y0)])
    t, y, size = 0.0, y0, size_fn(y0)
    n_steps, calm_steps = 0, 0
    while t_end - t > 1e-12 * max(1.0, t_end):
        h = min(cfg.dt, t_end - t, schedule.next_break(t) - t)
        params = schedule.at(t)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                y_new = _step(rhs, cfg.method, params, t, y, h)
                if post_step is not None and np.all(np.isfinite(y_new)):
                    y_new = post_step(y_new)
        except AttnFlowError as e:
            logger.warning(f"Integration failed at t={t:.6g}: {e}")
            trajectory.status, trajectory.t_star, trajectory.error = Status.NUMERICAL_FAILURE, t, e
            return trajectory
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            # A stage overflowed before the state itself did
            y_new = np.full_like(y, np.nan)

        t_new = t + h if t_end - (t + h) > 1e-12 * max(1.0, t_end) else t_end
        n_steps += 1
        finite = bool(np.all(np.isfinite(y_new)))
        new_size = size_fn(y_new) if finite else np.inf
        if new_size > threshold:
            t_star = (t + t_new) / 2
            if finite or size > np.sqrt(threshold):
                logger.debug(f"Blow-up detected between t={t:.6g} and t={t_new:.6g}")
                trajectory.status, trajectory.t_star = Status.BLOW_UP, t_star
                trajectory.times.append(t_new)
                trajectory.states.append(make_state(y_new))
            else:
                trajectory.status, trajectory.t_star = Status.NUMERICAL_FAILURE, t_star
                trajectory.error = StepFailure(f"Non-finite state at t={t_new:.6g} from a state of size {size:.3e}")
                logger.warning(str(trajectory.error))
            return trajectory

        converged = False
        if cfg.convergence_tol is not None:
            calm = rate_fn(y_new, y, h) < cfg.convergence_tol * (1 + new_size)
            calm_steps = calm_steps + 1 if calm else 0
            converged = calm_steps >= cfg.convergence_patience

        t, y, size = t_new, y_new, new_size
        if n_steps % cfg.record_every == 0 or t == t_end or converged:
            trajectory.times.append(t)
            trajectory.states.append(make_state(y))
        if converged:
            trajectory.converged_at = t
            logger.debug(f"Converged at t={t:.6g} after {n_steps} steps")
            return trajectory

    return trajectory


def _as_schedule(schedule) -> ParameterSchedule:
    if isinstance(schedule, AttentionParams):
        return ParameterSchedule.constant(schedule)
    return schedule


def integrate_particles(schedule: ParameterSchedule, x0: EmpiricalMeasure, cfg: SolverConfig) -> Trajectory:
    """
    Integrates every token along the attention velocity field of the current empirical measure.
    Masked layers require a measure with positions and move the tokens only.
    """
    schedule = _as_schedule(schedule)
    if schedule.d != x0.d:
        raise DimensionMismatch(f"Tokens in dimension {x0.d} for parameters in dimension {schedule.d}")
    if any(p.variant == Variant.MASKED for p in schedule.params) and not x0.is_masked:
        raise DimensionMismatch("Masked attention needs a measure with token positions")
    warm_start = {}

    def rhs(t: float, params: AttentionParams, tokens: np.ndarray) -> np.ndarray:
        mu = x0.moved(tokens)
        if params.variant == Variant.MASKED:
            return masked_velocities(params, mu, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
        kernel = None
        if params.variant == Variant.SINKHORN:
            kernel = sinkhorn_kernel_discrete(
                mu, params, cfg.sinkhorn_iters, cfg.sinkhorn_tol, warm_start.get(id(params))
            )
            warm_start[id(params)] = kernel.g
        return velocity_discrete(params, mu, tokens, kernel)

    return _integrate(
        rhs, np.array(x0.tokens), schedule, cfg,
        size_fn=lambda tokens: float(np.max(np.linalg.norm(tokens, axis=1))),
        make_state=x0.moved,
    )


def moment_rhs(params: AttentionParams, g: GaussianMeasure) -> Tuple[np.ndarray, np.ndarray]:
    """
    Time derivatives of the mean and covariance of a Gaussian carried by its affine velocity field Mx + b:
    alpha' = M alpha + b and Sigma' = M Sigma + Sigma M^T.
    """
    field = velocity_gaussian(params, g)
    return field(g.alpha), field.M @ g.sigma + g.sigma @ field.M.T


def _unpack(y: np.ndarray, d: int) -> Tuple[np.ndarray, np.ndarray]:
    return y[:d], y[d:].reshape(d, d)


def integrate_moments(schedule: ParameterSchedule, g0: GaussianMeasure, cfg: SolverConfig) -> Trajectory:
    schedule = _as_schedule(schedule)
    d = g0.d
    if schedule.d != d:
        raise DimensionMismatch(f"Gaussian in dimension {d} for parameters in dimension {schedule.d}")

    def rhs(t: float, params: AttentionParams, y: np.ndarray) -> np.ndarray:
        alpha, sigma = _unpack(y, d)
        alpha_dot, sigma_dot = moment_rhs(params, GaussianMeasure(alpha, sigma, check=False))
        return np.concatenate([alpha_dot, sigma_dot.ravel()])

    def symmetrize(y: np.ndarray) -> np.ndarray:
        alpha, sigma = _unpack(y, d)
        return np.concatenate([alpha, ((sigma + sigma.T) / 2).ravel()])

    return _integrate(
        rhs, np.concatenate([g0.alpha, g0.sigma.ravel()]), schedule, cfg,
        size_fn=lambda y: float(np.linalg.norm(y[d:])),
        make_state=lambda y: GaussianMeasure(y[:d], y[d:].reshape(d, d), check=False),
        rate_fn=lambda y_new, y_old, h: np.linalg.norm(y_new[d:] - y_old[d:]) / h,
        post_step=symmetrize,
    )


def rank1_residual(params: AttentionParams, u: np.ndarray) -> float:
    """
    Relative Frobenius gap between d/dt (u u^T) along u' = (u^T A u) V u and the Softmax covariance right-hand side
    evaluated at Sigma = u u^T. Zero up to rounding when the factor flow is exact.
    """
    u = np.asarray(u, dtype=float)
    u_dot = (u @ params.A @ u) * (params.V @ u)
    factor_rate = np.outer(u_dot, u) + np.outer(u, u_dot)
    _, sigma_dot = moment_rhs(params, GaussianMeasure(np.zeros(len(u)), np.outer(u, u), check=False))
    scale = max(np.linalg.norm(sigma_dot), np.linalg.norm(factor_rate), 1e-300)
    return float(np.linalg.norm(factor_rate - sigma_dot) / scale)


def rank1_flow(u0: np.ndarray, A: np.ndarray, V: np.ndarray, cfg: SolverConfig) -> Trajectory:
    """
    Integrates u' = (u^T A u) V u, the factor of rank-one Softmax covariance dynamics Sigma = u u^T. Recorded
    factors whose induced covariance leaves the moment equation by more than RANK1_RESIDUAL_TOL are logged.
    """
    u0 = np.asarray(u0, dtype=float)
    if not np.any(u0):
        raise ValueError("The rank-one flow needs a nonzero initial factor")
    A, V = np.asarray(A, dtype=float), np.asarray(V, dtype=float)
    d = len(u0)
    params = AttentionParams(Variant.SOFTMAX, Q=A, K=np.eye(d), V=V)

    def rhs(t: float, params: AttentionParams, u: np.ndarray) -> np.ndarray:
        return (u @ params.A @ u) * (params.V @ u)

    trajectory = _integrate(
        rhs, u0, ParameterSchedule.constant(params), cfg,
        size_fn=lambda u: float(np.linalg.norm(u)),
        make_state=lambda u: np.array(u),
    )
    for t, u in zip(trajectory.times, trajectory.states):
        if np.all(np.isfinite(u)) and np.any(u):
            residual = rank1_residual(params, u)
            if residual > RANK1_RESIDUAL_TOL:
                logger.warning(f"Rank-one factor leaves the covariance equation at t={t:.6g} (residual {residual:.3e})")
    return trajectory
