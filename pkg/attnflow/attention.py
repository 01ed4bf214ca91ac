import logging
from typing import Optional

import numpy as np
from scipy.special import softmax, expit

from attnflow.errors import (
    DimensionMismatch, MissingKernel, UnsupportedVariant, SingularA, SingularSigma
)
from attnflow.linalg import psd_sqrt, psd_inv_sqrt, min_eig_ratio
from attnflow.measures import AttentionParams, AffineField, EmpiricalMeasure, GaussianMeasure, Head, Variant
from attnflow.sinkhorn import DiscreteKernel, sinkhorn_kernel_discrete


logger = logging.getLogger(__name__)

# Query points are processed in row blocks of this size to bound the memory of the (m, n) weight matrices
CHUNK_SIZE = 1024

SIGMA_COND_LIMIT = 1e-14
A_COND_LIMIT = 1e10

GAUSSIAN_VARIANTS = (Variant.SOFTMAX, Variant.LINEAR, Variant.LINEAR_EPS, Variant.L2, Variant.SINKHORN, Variant.MULTI_HEAD)


def _softmax_field(A: np.ndarray, V: np.ndarray, tokens: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Qx.Ky = (Ax).y, so the weights only see A
    logits = (x @ A.T) @ tokens.T
    return softmax(logits, axis=1) @ (tokens @ V.T)


def _chunk_velocity(params: AttentionParams, mu: EmpiricalMeasure, x: np.ndarray, kernel) -> np.ndarray:
    variant, tokens, n = params.variant, mu.tokens, mu.n

    if variant == Variant.MULTI_HEAD:
        return sum(_softmax_field(head.A, head.V, tokens, x) for head in params.heads)
    if variant == Variant.SOFTMAX:
        return _softmax_field(params.A, params.V, tokens, x)

    V_tokens = tokens @ params.V.T
    if variant == Variant.L2:
        QX, KY = x @ params.Q.T, tokens @ params.K.T
        sq_dists = np.sum(QX ** 2, axis=1)[:, None] + np.sum(KY ** 2, axis=1)[None, :] - 2 * QX @ KY.T
        return softmax(-np.maximum(sq_dists, 0.0), axis=1) @ V_tokens
    if variant == Variant.SINKHORN:
        return kernel.query_weights(x) @ V_tokens / (n * params.eps)
    if variant == Variant.LINEAR_EPS:
        mean = tokens.mean(axis=0)
        centered = tokens - mean
        cov = centered.T @ centered / n
        return (params.V @ mean) / params.eps + x @ (params.V @ cov @ params.A).T

    logits = (x @ params.A.T) @ tokens.T
    if variant == Variant.LINEAR:
        weights = logits
    elif variant == Variant.EXP:
        weights = np.exp(logits)
    elif variant == Variant.RELU:
        weights = np.maximum(logits, 0.0)
    elif variant == Variant.SIGMOID:
        weights = expit(logits)
    else:
        raise UnsupportedVariant(f"velocity_discrete does not evaluate {variant.value} layers, use velocity_masked")
    return weights @ V_tokens / n


def velocity_discrete(
    params: AttentionParams, mu: EmpiricalMeasure, x: np.ndarray, kernel: Optional[DiscreteKernel] = None
) -> np.ndarray:
    """
    Evaluates the attention velocity field of an empirical measure.

    :param params: the layer parameters, of any variant but Masked
    :param mu: the measure the tokens attend to
    :param x: a query point of shape (d,), or a batch of them of shape (m, d)
    :param kernel: the converged Sinkhorn kernel of mu, required for the Sinkhorn variant
    :return: the velocity, with the same shape as x
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.d or mu.d != params.d:
        raise DimensionMismatch(f"Query in dimension {x.shape[1]}, measure in {mu.d}, parameters in {params.d}")
    if params.variant == Variant.SINKHORN and kernel is None:
        raise MissingKernel("The Sinkhorn velocity needs the kernel from sinkhorn_kernel_discrete")

    out = np.concatenate([
        _chunk_velocity(params, mu, x[start:start + CHUNK_SIZE], kernel) for start in range(0, len(x), CHUNK_SIZE)
    ])
    return out[0] if single else out


def velocity_masked(
    params: AttentionParams,
    mu_bar: EmpiricalMeasure,
    sigma: float,
    x: np.ndarray,
    sinkhorn_iters: int = 10000,
    sinkhorn_tol: float = 1e-10,
) -> np.ndarray:
    """
    Masked attention on the lifted measure: a query at position sigma only attends to tokens whose position is at
    most sigma.

    :return: the lifted velocity of shape (d + 1,), whose first (position) component is exactly 0
    """
    if not mu_bar.is_masked:
        raise DimensionMismatch("Masked attention needs a measure with token positions")
    inner = params.unmasked()
    visible = mu_bar.sub_measure(sigma)
    kernel = None
    if inner.variant == Variant.SINKHORN:
        kernel = sinkhorn_kernel_discrete(visible, inner, sinkhorn_iters, sinkhorn_tol)
    return np.concatenate([[0.0], velocity_discrete(inner, visible, x, kernel)])


def masked_velocities(
    params: AttentionParams, mu_bar: EmpiricalMeasure, sinkhorn_iters: int = 10000, sinkhorn_tol: float = 1e-10
) -> np.ndarray:
    """
    Spatial velocities of all tokens of a lifted measure, each attending to the tokens at or before its own
    position. Tokens sharing a position share one evaluation.
    """
    if not mu_bar.is_masked:
        raise DimensionMismatch("Masked attention needs a measure with token positions")
    inner = params.unmasked()
    out = np.empty_like(mu_bar.tokens)
    for position in np.unique(mu_bar.positions):
        at_position = mu_bar.positions == position
        visible = mu_bar.sub_measure(position)
        kernel = None
        if inner.variant == Variant.SINKHORN:
            kernel = sinkhorn_kernel_discrete(visible, inner, sinkhorn_iters, sinkhorn_tol)
        out[at_position] = velocity_discrete(inner, visible, mu_bar.tokens[at_position], kernel)
    return out


def _require_spd(sigma: np.ndarray, variant: Variant):
    ratio = min_eig_ratio(sigma)
    if ratio < SIGMA_COND_LIMIT:
        raise SingularSigma(f"The {variant.value} Gaussian field needs an SPD covariance (eigenvalue ratio {ratio:.3e})")


def sinkhorn_candidate_c(sigma: np.ndarray, A: np.ndarray, eps: float, inner: str = "lemma") -> np.ndarray:
    """
    The C matrix of the Sinkhorn Gaussian field, Sigma^1/2 (Sigma^1/2 M Sigma^1/2 + eps^2/4 I)^1/2 Sigma^-1/2 - eps/2 I.

    :param inner: "lemma" uses M = A^T Sigma A, "transposed" uses M = A Sigma A^T. The two coincide for normal A
    and the Monte-Carlo adjudication in the validation suite compares them otherwise.
    """
    assert inner in ("lemma", "transposed"), f"Unknown candidate {inner}"
    d = len(sigma)
    root, inv_root = psd_sqrt(sigma), psd_inv_sqrt(sigma)
    middle = A.T @ sigma @ A if inner == "lemma" else A @ sigma @ A.T
    core = root @ middle @ root
    core = (core + core.T) / 2 + (eps ** 2 / 4) * np.eye(d)
    return root @ psd_sqrt(core) @ inv_root - (eps / 2) * np.eye(d)


def _check_invertible_a(A: np.ndarray):
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= A_COND_LIMIT:
        raise SingularA(f"The Sinkhorn Gaussian field needs an invertible A (condition number {cond:.3e})")


def sinkhorn_gain(sigma: np.ndarray, A: np.ndarray, eps: float, inner: str = "lemma") -> np.ndarray:
    """
    G = A^-T Sigma^-1 C, so that the Sinkhorn Gaussian field reads (1/eps) V ((I - G) alpha + G x).
    """
    _check_invertible_a(A)
    C = sinkhorn_candidate_c(sigma, A, eps, inner)
    inv_root = psd_inv_sqrt(sigma)
    return np.linalg.solve(A.T, inv_root @ inv_root @ C)


def _head_field(head: Head, g: GaussianMeasure) -> AffineField:
    return AffineField(head.V @ g.sigma @ head.A, head.V @ g.alpha)


def velocity_gaussian(params: AttentionParams, g: GaussianMeasure, sinkhorn_inner: str = "lemma") -> AffineField:
    """
    Closed-form velocity field of a Gaussian measure, affine in x.
    """
    variant = params.variant
    if variant not in GAUSSIAN_VARIANTS:
        raise UnsupportedVariant(f"The {variant.value} velocity does not preserve Gaussians")
    if g.d != params.d:
        raise DimensionMismatch(f"Gaussian in dimension {g.d} for parameters in dimension {params.d}")

    alpha, sigma = g.alpha, g.sigma
    d = g.d
    if variant == Variant.MULTI_HEAD:
        fields = [_head_field(head, g) for head in params.heads]
        return AffineField(sum(f.M for f in fields), sum(f.b for f in fields))

    V, A = params.V, params.A
    if variant == Variant.SOFTMAX:
        return AffineField(V @ sigma @ A, V @ alpha)
    if variant == Variant.LINEAR_EPS:
        return AffineField(V @ sigma @ A, V @ alpha / params.eps)
    if variant == Variant.LINEAR:
        return AffineField(V @ (sigma + np.outer(alpha, alpha)) @ A, np.zeros(d))
    if variant == Variant.L2:
        _require_spd(sigma, variant)
        # (Sigma^-1 + 2 K^T K)^-1 written without inverting Sigma
        KtK = params.K.T @ params.K
        M = 2 * V @ sigma @ np.linalg.solve(np.eye(d) + 2 * KtK @ sigma, A)
        b = V @ np.linalg.solve(np.eye(d) + 2 * sigma @ KtK, alpha)
        return AffineField(M, b)

    # Sinkhorn
    _require_spd(sigma, variant)
    G = sinkhorn_gain(sigma, A, params.eps, sinkhorn_inner)
    return AffineField(V @ G / params.eps, V @ (alpha - G @ alpha) / params.eps)
