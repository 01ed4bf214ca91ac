import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from attnflow.attention import A_COND_LIMIT
from attnflow.errors import SizeMismatch, TooLarge, MarginalMismatch, SingularA, NotSPD, NotPSD
from attnflow.linalg import psd_sqrt, psd_inv_sqrt, gaussian_kl, min_eig_ratio
from attnflow.measures import EmpiricalMeasure, GaussianMeasure


logger = logging.getLogger(__name__)

MAX_ASSIGNMENT_SIZE = 2048
POSITION_TOL = 1e-12

PointsLike = Union[np.ndarray, EmpiricalMeasure]


def _points(X: PointsLike) -> np.ndarray:
    if isinstance(X, EmpiricalMeasure):
        return X.tokens
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def optimal_assignment(X: PointsLike, Y: PointsLike, p: int = 2) -> Tuple[np.ndarray, float]:
    """
    Exact optimal matching between two equal-size point clouds for the cost |x - y|^p.

    :return: a tuple (perm, mean_cost) where X[i] is matched to Y[perm[i]]
    """
    X, Y = _points(X), _points(Y)
    if len(X) != len(Y):
        raise SizeMismatch(f"Cannot match {len(X)} points with {len(Y)} points")
    if len(X) > MAX_ASSIGNMENT_SIZE:
        raise TooLarge(f"Exact assignment is capped at {MAX_ASSIGNMENT_SIZE} points, got {len(X)}")
    cost = cdist(X, Y) ** p
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(X), dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].mean())


def wasserstein_discrete(p: int, X: PointsLike, Y: PointsLike) -> float:
    assert p in (1, 2), f"Only W1 and W2 are supported, got p={p}"
    _, mean_cost = optimal_assignment(X, Y, p)
    return mean_cost ** (1 / p)


def _slices(mu_bar: EmpiricalMeasure):
    values, inverse = np.unique(mu_bar.positions, return_inverse=True)
    return values, [mu_bar.tokens[inverse == i] for i in range(len(values))]


def conditional_wasserstein(mu_bar: EmpiricalMeasure, nu_bar: EmpiricalMeasure) -> float:
    """
    Wasserstein distance between two lifted measures sharing their position marginal: the squared W2 distances of
    the per-position slices, averaged with the position weights.
    """
    assert mu_bar.is_masked and nu_bar.is_masked, "The conditional distance needs token positions"
    mu_positions, nu_positions = np.sort(mu_bar.positions), np.sort(nu_bar.positions)
    if len(mu_positions) != len(nu_positions) or np.max(np.abs(mu_positions - nu_positions)) > POSITION_TOL:
        raise MarginalMismatch("The two measures do not share the same position marginal")

    mu_values, mu_slices = _slices(mu_bar)
    nu_values, nu_slices = _slices(nu_bar)
    if len(mu_values) != len(nu_values):
        raise MarginalMismatch("The two measures do not group their tokens at the same positions")

    total = 0.0
    for mu_slice, nu_slice in zip(mu_slices, nu_slices):
        weight = len(mu_slice) / mu_bar.n
        total += weight * wasserstein_discrete(2, mu_slice, nu_slice) ** 2
    return float(np.sqrt(total))


def bures_wasserstein(g1: GaussianMeasure, g2: GaussianMeasure) -> float:
    root = psd_sqrt(g1.sigma)
    cross = psd_sqrt(root @ g2.sigma @ root)
    sq = np.sum((g1.alpha - g2.alpha) ** 2) + np.trace(g1.sigma + g2.sigma - 2 * cross)
    return float(np.sqrt(max(sq, 0.0)))


@dataclass(frozen=True, eq=False)
class GaussianCoupling:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def d(self) -> int:
        return len(self.mean) // 2

    @property
    def cross_covariance(self) -> np.ndarray:
        d = self.d
        return self.covariance[:d, d:]


def _check_eot_inputs(g1: GaussianMeasure, g2: GaussianMeasure, Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    A = np.asarray(K, dtype=float).T @ np.asarray(Q, dtype=float)
    cond = np.linalg.cond(A)
    if A.shape != (g1.d, g1.d) or not np.isfinite(cond) or cond >= A_COND_LIMIT:
        raise SingularA(f"Entropic transport between Gaussians needs an invertible A (condition number {cond:.3e})")
    for g in (g1, g2):
        ratio = min_eig_ratio(g.sigma)
        if ratio <= 0:
            raise NotSPD(f"Covariance is not positive definite (eigenvalue ratio {ratio:.3e})")
    return A


def gaussian_cross_covariance(g1: GaussianMeasure, g2: GaussianMeasure, Q: np.ndarray, K: np.ndarray, eps: float):
    """
    Cov(x, y) = A^-1 C^T under the entropic optimal coupling of N(alpha, Sigma) and N(beta, Omega) for the cost
    |Qx - Ky|^2 / (2 eps), with C = Omega^1/2 (Omega^1/2 A Sigma A^T Omega^1/2 + eps^2/4 I)^1/2 Omega^-1/2 - eps/2 I.
    """
    A = _check_eot_inputs(g1, g2, Q, K)
    sigma, omega = g1.sigma, g2.sigma
    d = g1.d
    root, inv_root = psd_sqrt(omega), psd_inv_sqrt(omega)
    core = root @ A @ sigma @ A.T @ root
    core = (core + core.T) / 2 + (eps ** 2 / 4) * np.eye(d)
    C = root @ psd_sqrt(core) @ inv_root - (eps / 2) * np.eye(d)
    return np.linalg.solve(A, C.T)


def eot_gaussian_coupling(g1: GaussianMeasure, g2: GaussianMeasure, Q: np.ndarray, K: np.ndarray, eps: float) -> GaussianCoupling:
    cross = gaussian_cross_covariance(g1, g2, Q, K, eps)
    covariance = np.block([[g1.sigma, cross], [cross.T, g2.sigma]])
    eigvals = np.linalg.eigvalsh(covariance)
    if eigvals[0] < -1e-8 * max(eigvals[-1], 1.0):
        raise NotPSD(f"Entropic coupling covariance has eigenvalue {eigvals[0]:.3e}")
    return GaussianCoupling(np.concatenate([g1.alpha, g2.alpha]), covariance)


def eot_gaussian_value(g1: GaussianMeasure, g2: GaussianMeasure, Q: np.ndarray, K: np.ndarray, eps: float) -> float:
    """
    Entropic optimal transport value between two Gaussians: the expected cost |Qx - Ky|^2 / (2 eps) under the
    optimal coupling plus the coupling's KL divergence to the product of its marginals.
    """
    Q, K = np.asarray(Q, dtype=float), np.asarray(K, dtype=float)
    coupling = eot_gaussian_coupling(g1, g2, Q, K, eps)
    cross = coupling.cross_covariance
    mean_gap = Q @ g1.alpha - K @ g2.alpha
    expected_cost = (
        mean_gap @ mean_gap
        + np.trace(Q @ g1.sigma @ Q.T)
        + np.trace(K @ g2.sigma @ K.T)
        - 2 * np.trace(Q.T @ K @ cross.T)
    ) / (2 * eps)

    d = g1.d
    product = np.zeros_like(coupling.covariance)
    product[:d, :d], product[d:, d:] = g1.sigma, g2.sigma
    kl = gaussian_kl(coupling.mean, coupling.covariance, coupling.mean, product)
    return float(expected_cost + kl)


def entropic_bures(sigma1: np.ndarray, sigma2: np.ndarray, Q: np.ndarray, K: np.ndarray, eps: float) -> float:
    d = len(sigma1)
    zero = np.zeros(d)
    return 2 * eps * eot_gaussian_value(GaussianMeasure(zero, sigma1), GaussianMeasure(zero, sigma2), Q, K, eps)
