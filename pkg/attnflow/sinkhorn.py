import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from attnflow.errors import NotConverged, DimensionMismatch
from attnflow.measures import EmpiricalMeasure


logger = logging.getLogger(__name__)


def sinkhorn_cost(X: np.ndarray, Y: np.ndarray, Q: np.ndarray, K: np.ndarray, eps: float) -> np.ndarray:
    """
    The cost c_eps(x, y) = |Qx - Ky|^2 / (2 eps) between every row of X and every row of Y.
    """
    QX, KY = np.atleast_2d(X) @ Q.T, np.atleast_2d(Y) @ K.T
    sq_dists = (
        np.sum(QX ** 2, axis=1)[:, None] + np.sum(KY ** 2, axis=1)[None, :] - 2 * QX @ KY.T
    )
    return np.maximum(sq_dists, 0.0) / (2 * eps)


def sinkhorn_potentials(
    cost: np.ndarray, max_iters: int = 10000, tol: float = 1e-10, warm_start: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, int, float]:
    """
    Alternating row and column normalizations of exp(-cost) against uniform weights, in the log domain.

    :param cost: an (n, m) cost matrix
    :param max_iters: maximum number of (row, column) normalization pairs
    :param tol: convergence is declared when every row and column mean of the scaled kernel is within tol of 1
    :param warm_start: initial column log-scaling, typically the one of a nearby previous problem
    :return: a tuple (f, g, n_iters, residual) such that the kernel is exp(f_i + g_j - cost_ij)
    """
    n, m = cost.shape
    log_n, log_m = np.log(n), np.log(m)
    g = np.zeros(m) if warm_start is None else np.array(warm_start, dtype=float)
    assert g.shape == (m,), f"Warm start of shape {g.shape} for {m} columns"

    residual = np.inf
    for n_iters in range(1, max_iters + 1):
        f = log_m - logsumexp(g[None, :] - cost, axis=1)
        g = log_n - logsumexp(f[:, None] - cost, axis=0)

        # Columns are exact after the column step, rows carry the remaining error
        row_means = np.exp(f + logsumexp(g[None, :] - cost, axis=1) - log_m)
        residual = float(np.max(np.abs(row_means - 1)))
        if residual < tol:
            logger.debug(f"Sinkhorn converged in {n_iters} iterations (residual {residual:.2e})")
            return f, g, n_iters, residual

    raise NotConverged(max_iters, residual)


@dataclass(frozen=True, eq=False)
class DiscreteKernel:
    """
    A converged Sinkhorn kernel on the support of an empirical measure, kappa_ij = exp(f_i + g_j - c_ij), along with
    the dual log-scalings and the parameters needed to extend it to query points off the support.
    """
    matrix: np.ndarray
    f: np.ndarray
    g: np.ndarray
    tokens: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    eps: float
    n_iters: int
    residual: float

    @property
    def n(self) -> int:
        return len(self.g)

    def marginal_residual(self) -> float:
        row_dev = np.max(np.abs(self.matrix.mean(axis=1) - 1))
        col_dev = np.max(np.abs(self.matrix.mean(axis=0) - 1))
        return float(max(row_dev, col_dev))

    def query_weights(self, x: np.ndarray) -> np.ndarray:
        """
        Kernel rows kappa(x, x_j) for query points x, extended with the dual potentials: the row log-scaling of
        each query is chosen so that its weights average to 1 over the tokens.

        :param x: query points of shape (m, d)
        :return: an (m, n) array of nonnegative weights
        """
        cost = sinkhorn_cost(x, self.tokens, self.Q, self.K, self.eps)
        logits = self.g[None, :] - cost
        f_query = np.log(self.n) - logsumexp(logits, axis=1)
        return np.exp(f_query[:, None] + logits)


def sinkhorn_kernel_discrete(
    mu: EmpiricalMeasure,
    params,
    max_iters: int = 10000,
    tol: float = 1e-10,
    warm_start: Optional[np.ndarray] = None,
) -> DiscreteKernel:
    if mu.d != params.Q.shape[1]:
        raise DimensionMismatch(f"Measure in dimension {mu.d} for parameters in dimension {params.Q.shape[1]}")
    cost = sinkhorn_cost(mu.tokens, mu.tokens, params.Q, params.K, params.eps)
    f, g, n_iters, residual = sinkhorn_potentials(cost, max_iters, tol, warm_start)
    matrix = np.exp(f[:, None] + g[None, :] - cost)
    return DiscreteKernel(matrix, f, g, mu.tokens, params.Q, params.K, params.eps, n_iters, residual)


def sinkhorn_plan(
    X: np.ndarray, Y: np.ndarray, Q: np.ndarray, K: np.ndarray, eps: float, max_iters: int = 10000, tol: float = 1e-10
) -> np.ndarray:
    """
    Entropic optimal transport plan between the uniform empirical measures on the rows of X and Y for the cost
    |Qx - Ky|^2 / (2 eps). The plan's entries sum to 1.
    """
    cost = sinkhorn_cost(X, Y, Q, K, eps)
    f, g, _, _ = sinkhorn_potentials(cost, max_iters, tol)
    return np.exp(f[:, None] + g[None, :] - cost) / (len(X) * len(Y))
