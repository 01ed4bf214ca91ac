import logging
from typing import Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from attnflow.errors import NotSymmetric, NotPSD, IllConditioned


logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-10


def check_symmetric(S: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    assert S.ndim == 2 and S.shape[0] == S.shape[1], f"Expected a square matrix, got shape {S.shape}"
    asym = np.linalg.norm(S - S.T)
    if asym > tol * np.linalg.norm(S):
        raise NotSymmetric(f"Matrix asymmetry {asym:.3e} exceeds {tol:.0e} relative to its norm")
    return S


def sym_eig(S: np.ndarray, max_sweeps: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigendecomposition of a small symmetric matrix by cyclic Jacobi rotations.

    :param S: a symmetric (d, d) matrix
    :param max_sweeps: upper bound on the number of full sweeps over the off-diagonal entries
    :return: a tuple (eigenvalues, eigenvectors) with eigenvalues sorted in descending order and the
    eigenvectors as the columns of an orthogonal matrix, so that S = U @ diag(eigenvalues) @ U.T
    """
    S = check_symmetric(S)
    d = len(S)
    a = (S + S.T) / 2
    u = np.eye(d)

    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-16 * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1))
                c = 1 / np.sqrt(t * t + 1)
                s = t * c

                # Rotate columns then rows of a, and accumulate the columns of u
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
    else:
        logger.warning(f"Jacobi eigensolver hit {max_sweeps} sweeps on a {d}x{d} matrix")

    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind="stable")
    return eigvals[order], u[:, order]


def _clamped_eigh(S: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    eigvals, eigvecs = sym_eig(S)
    lambda_max = max(eigvals[0], 0.0) if len(eigvals) else 0.0
    if len(eigvals) and eigvals[-1] < -PSD_TOL * lambda_max:
        raise NotPSD(f"Eigenvalue {eigvals[-1]:.3e} is below -{PSD_TOL:.0e} * {lambda_max:.3e}")
    return np.clip(eigvals, 0.0, None), eigvecs


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = _clamped_eigh(S)
    R = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return (R + R.T) / 2


def psd_inv_sqrt(S: np.ndarray) -> np.ndarray:
    """
    Inverse square root of a symmetric positive definite matrix.
    """
    eigvals, eigvecs = _clamped_eigh(S)
    if eigvals[-1] <= 0:
        raise IllConditioned(f"Cannot take the inverse square root of a singular matrix (min eigenvalue {eigvals[-1]:.3e})")
    R = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return (R + R.T) / 2


def rank_eps(S: np.ndarray, rel_tol: float = 1e-6) -> int:
    eigvals, _ = sym_eig(S)
    threshold = rel_tol * max(eigvals[0], 1e-300)
    return int(np.sum(eigvals > threshold))


def solve_spd(S: np.ndarray, b: np.ndarray, max_cond: float = 1e12) -> np.ndarray:
    """
    Solves S @ x = b for a symmetric positive definite S by Cholesky factorization.

    :param S: the (d, d) SPD system matrix
    :param b: a right-hand side of shape (d,) or (d, m)
    :param max_cond: systems whose condition number reaches this value are rejected
    """
    eigvals, _ = sym_eig(S)
    if eigvals[-1] <= 0 or eigvals[0] / eigvals[-1] >= max_cond:
        cond = np.inf if eigvals[-1] <= 0 else eigvals[0] / eigvals[-1]
        raise IllConditioned(f"SPD solve rejected: condition number {cond:.3e} (limit {max_cond:.0e})")
    return cho_solve(cho_factor(S), np.asarray(b, dtype=float))


def min_eig_ratio(S: np.ndarray) -> float:
    """
    Returns lambda_min / lambda_max of a symmetric matrix, using LAPACK for speed. This is the per-step
    conditioning check of the integrators, so it does not go through the Jacobi solver.
    """
    eigvals = np.linalg.eigvalsh((S + S.T) / 2)
    if eigvals[-1] <= 0:
        return -np.inf if eigvals[0] < 0 else 0.0
    return float(eigvals[0] / eigvals[-1])


def logdet_spd(S: np.ndarray) -> float:
    eigvals, _ = sym_eig(S)
    if eigvals[-1] <= 0:
        raise IllConditioned(f"Log-determinant of a non-positive-definite matrix (min eigenvalue {eigvals[-1]:.3e})")
    return float(np.sum(np.log(eigvals)))


def gaussian_kl(m0: np.ndarray, S0: np.ndarray, m1: np.ndarray, S1: np.ndarray) -> float:
    """
    KL(N(m0, S0) || N(m1, S1)) in closed form, with log-determinants taken as sums of log-eigenvalues.
    """
    k = len(m0)
    diff = np.asarray(m1, dtype=float) - np.asarray(m0, dtype=float)
    trace_term = np.trace(solve_spd(S1, S0))
    quad_term = diff @ solve_spd(S1, diff)
    kl = 0.5 * (trace_term + quad_term - k + logdet_spd(S1) - logdet_spd(S0))
    return max(float(kl), 0.0)
