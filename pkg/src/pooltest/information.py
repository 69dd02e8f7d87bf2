"""Fisher information, unit information and information-per-unit-cost design.

The expected information is ``-E[Hessian]``.  On the link scale the
Hessian is ``Z' diag(w) Z`` with ``w`` linear in ``y``; the score part of
``w`` has mean zero, leaving the weight ``n u**2 / expm1(u)`` where ``u`` is
the cumulative hazard.  Dropping the zero-mean term analytically avoids the
cancellation that evaluating the Hessian at ``y = n phi`` suffers when
``phi`` is close to 1.  Prevalence-scale matrices follow by the Jacobian.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import bisect

from pooltest.distribution import (
    ModelParams,
    Parameterization,
    PooledDataset,
    dtheta_deta,
    effective_size,
)
from pooltest.errors import ArgumentError, DomainError
from pooltest.likelihood import expected_link_information, link_design, link_offset

DEFAULT_MAX_POOL = 500
CUTOFF_BRACKET = (1e-9, 1.0 - 1e-9)
CUTOFF_XTOL = 1e-9


@dataclass(frozen=True)
class InfoMatrix:
    """Expected information for a fixed design.

    ``matrix`` is ordered like :meth:`ModelParams.free_vector`.
    """

    matrix: NDArray[np.float64]
    parameterization: Parameterization
    counts: NDArray[np.int64]
    sizes: NDArray[np.int64]
    lambda_fixed: bool

    def __getitem__(self, idx):
        return self.matrix[idx]

    @property
    def theta_theta(self) -> float:
        return float(self.matrix[0, 0])


def _design(
    counts: ArrayLike | PooledDataset, sizes: ArrayLike | None, covariates: ArrayLike | None
) -> PooledDataset:
    if isinstance(counts, PooledDataset):
        return counts
    counts = np.atleast_1d(np.asarray(counts))
    sizes = np.atleast_1d(np.asarray(sizes))
    return PooledDataset(
        sizes,
        counts,
        np.zeros_like(counts),
        None if covariates is None else np.asarray(covariates, dtype=float),
    )


def fisher_information(
    counts: ArrayLike | PooledDataset,
    sizes: ArrayLike | None,
    params: ModelParams,
    covariates: ArrayLike | None = None,
) -> InfoMatrix:
    """Expected information in the parameterization of ``params``.

    Args:
        counts: Pools per row, or a :class:`PooledDataset` whose positives are ignored.
        sizes: Pool size per row (ignored when ``counts`` is a dataset).
        params: Evaluation point; must be interior (``0 < theta < 1``).
        covariates: Optional covariate matrix for the BETA parameterization.
    """
    design = _design(counts, sizes, covariates)
    if params.kind is Parameterization.THETA and not 0.0 < params.theta < 1.0:
        raise DomainError("information requires 0 < theta < 1")
    if params.kind is not Parameterization.BETA and design.has_covariates:
        raise ArgumentError(f"{params.kind.value} parameterization cannot use covariates")
    free = not params.lambda_fixed
    x = design.design_matrix if params.kind is Parameterization.BETA else np.ones((len(design), 1))
    log_s = np.log(design.sizes.astype(float))
    link_params = params if params.kind is Parameterization.BETA else params.to(Parameterization.ETA)
    try:
        info = expected_link_information(
            link_design(x, log_s, free),
            link_offset(log_s, params.lam, free),
            design.counts.astype(float),
            link_params.free_vector(),
        )
    except DomainError:
        raise DomainError("information requires interior positive-pool probabilities") from None
    if params.kind is Parameterization.THETA:
        # d(eta, lam) / d(theta, lam)
        inv = np.ones(info.shape[0])
        inv[0] = 1.0 / dtheta_deta(params.eta)
        info = info * np.outer(inv, inv)
    return InfoMatrix(info, params.kind, design.counts, design.sizes, params.lambda_fixed)


def fisher_information_eta(
    counts: ArrayLike | PooledDataset, sizes: ArrayLike | None, params: ModelParams
) -> InfoMatrix:
    """Expected information in ``(eta, lam)`` for a model without covariates."""
    return fisher_information(counts, sizes, params.to(Parameterization.ETA))


def eta_jacobian(params: ModelParams) -> NDArray[np.float64]:
    """``d(theta, lam) / d(eta, lam)``; diagonal because ``lam`` is untransformed."""
    k = 1 if params.lambda_fixed else 2
    jac = np.eye(k)
    jac[0, 0] = dtheta_deta(params.eta)
    return jac


def unit_information(s: ArrayLike, theta: ArrayLike, lam: ArrayLike = 0.0):
    """Information about ``theta`` carried by one unit placed in a pool of size ``s``.

    ``s**(2 lam + 1) (1-theta)**(s**(1+lam) - 2) / (1 - (1-theta)**(s**(1+lam)))``

    Raises:
        DomainError: Unless ``0 < theta < 1``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(~((theta > 0) & (theta < 1))):
        raise DomainError("unit information needs 0 < theta < 1")
    return np.exp(log_unit_information(s, theta, lam))


def log_unit_information(s: ArrayLike, theta: ArrayLike, lam: ArrayLike = 0.0):
    s = np.asarray(s, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(s < 1):
        raise DomainError("pool sizes must be >= 1")
    if np.any(~(lam >= -1)):
        raise DomainError("excess intensity must satisfy lam >= -1")
    log1m = np.log1p(-np.asarray(theta, dtype=float))
    g = effective_size(s, lam)
    return (2 * lam + 1) * np.log(s) + (g - 2) * log1m - np.log(-np.expm1(g * log1m))


def _check_costs(a: float, t: float) -> None:
    if a < 0 or t < 0:
        raise ArgumentError("costs must be non-negative")
    if a + t <= 0:
        raise ArgumentError("sampling and testing cost cannot both be zero")


def log_ipuc(s, theta, lam=0.0, a: float = 0.0, t: float = 1.0):
    _check_costs(a, t)
    s = np.asarray(s, dtype=float)
    return log_unit_information(s, theta, lam) - np.log(a + t / s)


def ipuc(s, theta, lam=0.0, a: float = 0.0, t: float = 1.0):
    """Information per unit cost, ``I_s / (a + t / s)``.

    ``a`` is the sampling cost per unit and ``t`` the cost per test.
    """
    _check_costs(a, t)
    return unit_information(s, theta, lam) / (a + t / np.asarray(s, dtype=float))


def optimal_pool_size(
    theta: float, lam: float = 0.0, a: float = 0.0, t: float = 1.0, s_max: int = DEFAULT_MAX_POOL
) -> int:
    """Pool size in ``1..s_max`` maximising information per unit cost (ties go to the smaller)."""
    if s_max < 1:
        raise ArgumentError("s_max must be >= 1")
    if not 0.0 < theta < 1.0:
        raise DomainError("optimal pool size needs 0 < theta < 1")
    sizes = np.arange(1, int(s_max) + 1)
    values = log_ipuc(sizes, theta, lam, a, t)
    return int(sizes[int(np.argmax(values))])


@dataclass(frozen=True)
class DesignTable:
    """Lower prevalence cut-offs for each optimal pool size.

    Pool size ``s`` maximises information per unit cost for prevalences
    between ``cutoffs[s-1]`` and ``cutoffs[s-2]``.  A NaN cut-off means the
    ``s`` vs ``s+1`` crossing was not bracketed.
    """

    pool_sizes: NDArray[np.int64]
    cutoffs: NDArray[np.float64]
    lam: float
    a: float
    t: float

    def rows(self) -> list[tuple[int, float]]:
        return [(int(s), float(c)) for s, c in zip(self.pool_sizes, self.cutoffs)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pool_size", "cutoff"])
        for s, c in self.rows():
            writer.writerow([s, f"{c:.6f}"])
        return buf.getvalue()


def _crossing(s: int, lam: float, a: float, t: float) -> float:
    lo, hi = CUTOFF_BRACKET

    def diff(theta: float) -> float:
        return float(log_ipuc(s, theta, lam, a, t) - log_ipuc(s + 1, theta, lam, a, t))

    f_lo, f_hi = diff(lo), diff(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        return float("nan")
    return float(bisect(diff, lo, hi, xtol=CUTOFF_XTOL))


def prevalence_cutoffs(
    s_max: int = 40, lam: float = 0.0, a: float = 0.0, t: float = 1.0
) -> DesignTable:
    """Cut-off prevalences where pool size ``s`` and ``s + 1`` give equal IPUC."""
    if s_max < 2:
        raise ArgumentError("s_max must be >= 2")
    _check_costs(a, t)
    sizes = np.arange(1, int(s_max) + 1)
    cutoffs = np.array([_crossing(int(s), lam, a, t) for s in sizes])
    return DesignTable(sizes, cutoffs, float(lam), float(a), float(t))
