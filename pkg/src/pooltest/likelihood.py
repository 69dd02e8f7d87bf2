"""Log-likelihood, score and Hessian of the pooled binomial model.

The free-parameter vector is ``(theta, lam)``, ``(eta, lam)`` or
``(beta..., lam)``; ``lam`` is dropped when it is fixed.

On the link scale every row contributes through its cumulative hazard
``u_i = exp(x_i @ beta + (1 + lam) log s_i)``.  With ``phi = 1 - exp(-u)``
the row log-likelihood is ``-(n - y) u + y log1mexp(u)`` and

    d ell / d u   = -(n - y / phi)
    d2 ell / d u2 = -y (1 - phi) / phi**2

so the linear-predictor derivatives are ``u * dl`` and
``u * dl + u**2 * d2l``; the score and Hessian follow by the chain rule
through ``z_i = (x_i, log s_i)``.  The prevalence-scale derivatives are
coded separately from their closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from pooltest.distribution import (
    ModelParams,
    Parameterization,
    PooledDataset,
    effective_size,
    linear_predictor,
    poolbin_log_mass,
)
from pooltest.errors import ArgumentError, DomainError


@dataclass(frozen=True)
class ScoreAndCurvature:
    loglik: float
    gradient: NDArray[np.float64]
    hessian: NDArray[np.float64]
    parameterization: Parameterization


def link_design(x: NDArray, log_s: NDArray, free_lambda: bool) -> NDArray[np.float64]:
    """Columns multiplying the free vector on the ``log u`` scale."""
    return np.column_stack([x, log_s]) if free_lambda else x


def link_offset(log_s: NDArray, lam: float, free_lambda: bool) -> NDArray[np.float64]:
    return log_s if free_lambda else (1.0 + lam) * log_s


def link_derivatives(
    z: NDArray, offset: NDArray, n: NDArray, y: NDArray, coef: NDArray
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Gradient and Hessian of the kernel log-likelihood on the link scale.

    ``y`` may be real valued (expected counts), which is how the expected
    information is obtained.
    """
    log_u = z @ coef + offset
    if not np.all(np.isfinite(log_u)):
        raise DomainError("linear predictor must be finite for derivatives")
    u = np.exp(log_u)
    phi = -np.expm1(-u)
    if np.any((phi == 0) & (y > 0)):
        raise DomainError("zero positive-pool probability with positive pools observed")
    with np.errstate(divide="ignore", invalid="ignore"):
        y_over_phi = np.where(y > 0, y / phi, 0.0)
        # u**2 (1 - phi) / phi**2, finite as u -> 0
        curv = np.where(y > 0, y * (u / phi) ** 2 * np.exp(-u), 0.0)
    w1 = -u * (n - y_over_phi)
    w2 = w1 - curv
    return z.T @ w1, (z * w2[:, None]).T @ z


def expected_link_information(
    z: NDArray, offset: NDArray, n: NDArray, coef: NDArray
) -> NDArray[np.float64]:
    """``-E[Hessian]`` on the link scale, ``Z' diag(n u**2 / expm1(u)) Z``.

    The score part of the Hessian weight has mean zero and is dropped
    analytically, which keeps rows with ``phi`` near 1 accurate.  The
    weight is evaluated as ``exp(2 log u - u) / -expm1(-u)`` so it neither
    overflows nor loses range for large ``u``.
    """
    log_u = z @ coef + offset
    if not np.all(np.isfinite(log_u)):
        raise DomainError("linear predictor must be finite for information")
    u = np.exp(log_u)
    if np.any(u == 0):
        raise DomainError("information requires positive pool probabilities above zero")
    weight = n * np.exp(2.0 * log_u - u) / -np.expm1(-u)
    info = (z * weight[:, None]).T @ z
    return 0.5 * (info + info.T)


def theta_derivatives(
    s: NDArray, n: NDArray, y: NDArray, theta: float, lam: float, free_lambda: bool
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Score and Hessian in ``(theta, lam)`` from the prevalence-scale formulas."""
    if not 0.0 < theta < 1.0:
        raise DomainError("prevalence-scale derivatives need 0 < theta < 1")
    log1m = np.log1p(-theta)
    log_s = np.log(s)
    g = effective_size(s, lam)
    q = np.exp(g * log1m)
    phi = -np.expm1(g * log1m)
    with np.errstate(divide="ignore", invalid="ignore"):
        y_over_phi = np.where(y > 0, y / phi, 0.0)
        ratio = np.where(y > 0, q / phi, 0.0)
    resid = n - y_over_phi
    d_theta = -np.sum(g * resid) / (1.0 - theta)
    h_tt = -np.sum(g * (n - y_over_phi * (1.0 - g * ratio))) / (1.0 - theta) ** 2
    if not free_lambda:
        return np.array([d_theta]), np.array([[h_tt]])
    d_lam = log1m * np.sum(g * log_s * resid)
    bracket = n - y_over_phi * (1.0 + g * log1m * ratio)
    h_tl = -np.sum(g * log_s * bracket) / (1.0 - theta)
    h_ll = log1m * np.sum(g * log_s**2 * bracket)
    return np.array([d_theta, d_lam]), np.array([[h_tt, h_tl], [h_tl, h_ll]])


def _check_kind(data: PooledDataset, params: ModelParams) -> None:
    if params.kind is not Parameterization.BETA and data.has_covariates:
        raise ArgumentError(f"{params.kind.value} parameterization cannot use covariates")
    if params.kind is Parameterization.BETA:
        if data.covariates is None and len(params.values) != 1:
            raise ArgumentError("coefficient vector given but data has no covariates")
        if data.design_matrix.shape[1] != len(params.values):
            raise ArgumentError("coefficient vector length does not match covariates")


def derivatives(
    data: PooledDataset, params: ModelParams, positives: NDArray | None = None
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Score and Hessian at ``params``; ``positives`` overrides the observed ``y``."""
    _check_kind(data, params)
    y = data.positives.astype(float) if positives is None else np.asarray(positives, float)
    n = data.counts.astype(float)
    free = not params.lambda_fixed
    if params.kind is Parameterization.THETA:
        return theta_derivatives(data.sizes.astype(float), n, y, params.theta, params.lam, free)
    log_s = np.log(data.sizes.astype(float))
    x = data.design_matrix if params.kind is Parameterization.BETA else np.ones((len(data), 1))
    z = link_design(x, log_s, free)
    return link_derivatives(z, link_offset(log_s, params.lam, free), n, y, params.free_vector())


def loglik(data: PooledDataset, params: ModelParams) -> float:
    """Log-likelihood including the binomial-coefficient constant."""
    _check_kind(data, params)
    return poolbin_log_mass(data, params)


def score(data: PooledDataset, params: ModelParams) -> NDArray[np.float64]:
    return derivatives(data, params)[0]


def hessian(data: PooledDataset, params: ModelParams) -> NDArray[np.float64]:
    return derivatives(data, params)[1]


def score_and_curvature(data: PooledDataset, params: ModelParams) -> ScoreAndCurvature:
    grad, hess = derivatives(data, params)
    return ScoreAndCurvature(loglik(data, params), grad, hess, params.kind)


def loglik_free(data: PooledDataset, params: ModelParams, vector: NDArray) -> float:
    """Log-likelihood as a function of the free vector (for numeric checks)."""
    return loglik(data, params.with_free_vector(vector))


__all__ = [
    "ScoreAndCurvature",
    "derivatives",
    "expected_link_information",
    "hessian",
    "link_derivatives",
    "link_design",
    "link_offset",
    "linear_predictor",
    "loglik",
    "loglik_free",
    "score",
    "score_and_curvature",
    "theta_derivatives",
]
