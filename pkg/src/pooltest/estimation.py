"""Maximum-likelihood fitting of the pooled binomial model.

All fitting happens on the link scale: the free vector is ``(beta..., lam)``
with ``log u_i = x_i @ beta + (1 + lam) log s_i``.  The log-likelihood is
concave in that vector (the complementary log-log binomial likelihood is
concave in its linear predictor), so damped Newton from the Le start is
reliable and the constraint ``lam >= -1`` can be handled by refitting on
the boundary whenever the unconstrained maximiser falls below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from pooltest.distribution import (
    INTERCEPT,
    ModelParams,
    Parameterization,
    PooledDataset,
    _kernel_loglik,
    dtheta_deta,
    icll,
    log_binom_coef,
    n_distinct_cells,
)
from pooltest.errors import (
    ArgumentError,
    RankDeficientError,
    UnavailableError,
    UnidentifiableError,
)
from pooltest.likelihood import (
    expected_link_information,
    link_derivatives,
    link_design,
    link_offset,
)

EXCESS_INTENSITY = "ExcessIntensity"
LAMBDA_MAX = 5.0
MAX_ITER = 100
MAX_HALVINGS = 30
GTOL = 1e-8
XTOL = 1e-12


class BoundaryFlag(str, Enum):
    THETA_ZERO = "THETA_ZERO"
    THETA_ONE = "THETA_ONE"
    LAMBDA_AT_MINUS_ONE = "LAMBDA_AT_MINUS_ONE"
    UNIDENTIFIABLE_SE = "UNIDENTIFIABLE_SE"


# ---------------------------------------------------------------------------
# Newton solver
# ---------------------------------------------------------------------------


@dataclass
class NewtonResult:
    coef: NDArray[np.float64]
    loglik: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)


def _kernel(z: NDArray, offset: NDArray, n: NDArray, y: NDArray, coef: NDArray) -> float:
    return _kernel_loglik(z @ coef + offset, n, y)


def newton(
    z: NDArray,
    offset: NDArray,
    n: NDArray,
    y: NDArray,
    start: NDArray,
    max_iter: int = MAX_ITER,
    gtol: float = GTOL,
    xtol: float = XTOL,
) -> NewtonResult:
    """Damped Newton ascent with step halving on the link-scale log-likelihood.

    ``history`` records the (kernel) log-likelihood after every accepted step.
    """
    coef = np.asarray(start, dtype=float).copy()
    f = _kernel(z, offset, n, y, coef)
    history = [f]
    for it in range(1, max_iter + 1):
        grad, hess = link_derivatives(z, offset, n, y, coef)
        if np.max(np.abs(grad)) < gtol:
            return NewtonResult(coef, f, it - 1, True, history)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)) or grad @ step <= 0:
            step = grad / max(1.0, float(np.max(np.abs(np.diag(hess)))))
        tol = 1e-12 * max(1.0, abs(f))
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = coef + t * step
            with np.errstate(over="ignore", invalid="ignore"):
                f_trial = _kernel(z, offset, n, y, trial)
            if np.isfinite(f_trial) and f_trial >= f - tol:
                break
            t *= 0.5
        else:
            return NewtonResult(coef, f, it, False, history)
        delta = np.max(np.abs(trial - coef))
        coef, f = trial, f_trial
        history.append(f)
        if delta < xtol:
            return NewtonResult(coef, f, it, True, history)
    grad, _ = link_derivatives(z, offset, n, y, coef)
    return NewtonResult(coef, f, max_iter, bool(np.max(np.abs(grad)) < gtol), history)


def _golden_section(func, lo: float, hi: float, tol: float = 1e-8, max_iter: int = 200) -> float:
    """Maximise a unimodal ``func`` over ``[lo, hi]``."""
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - ratio * (hi - lo)
    d = lo + ratio * (hi - lo)
    fc, fd = func(c), func(d)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - ratio * (hi - lo)
            fc = func(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + ratio * (hi - lo)
            fd = func(d)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Starting values and checks
# ---------------------------------------------------------------------------


def le_start(data: PooledDataset) -> float:
    """Closed-form starting value for ``eta`` assuming every pool has the mean size.

    With ``p`` the fraction of positive pools, ``n`` pools and ``N`` units,
    returns ``log(-n log(1 - p) / N)``; ``-inf`` when ``p = 0`` and ``+inf``
    when ``p = 1``.
    """
    if len(data) == 0:
        raise ArgumentError("empty dataset")
    n_pools = data.total_pools
    p_hat = data.total_positive / n_pools
    if p_hat == 0.0:
        return -math.inf
    if p_hat == 1.0:
        return math.inf
    return math.log(-n_pools * math.log1p(-p_hat) / data.total_units)


def dependent_columns(matrix: NDArray, names: Sequence[str]) -> tuple[str, ...]:
    """Names of columns lying in the span of the columns before them."""
    kept: list[int] = []
    dependent = []
    for j in range(matrix.shape[1]):
        cols = kept + [j]
        if np.linalg.matrix_rank(matrix[:, cols]) == len(cols):
            kept.append(j)
        else:
            dependent.append(names[j])
    return tuple(dependent)


def _check_rank(matrix: NDArray, names: Sequence[str]) -> None:
    dep = dependent_columns(matrix, names)
    if dep:
        raise RankDeficientError(
            "design matrix is rank deficient; dependent columns: " + ", ".join(dep), dep
        )


def saturated_kernel(n: NDArray, y: NDArray) -> float:
    """Kernel log-likelihood with every row at its empirical positive rate."""
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    p = y / n
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(y > 0, y * np.log(p), 0.0)
        neg = np.where(n - y > 0, (n - y) * np.log1p(-p), 0.0)
    return float(np.sum(pos) + np.sum(neg))


# ---------------------------------------------------------------------------
# Fit results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Outcome of a maximum-likelihood fit.

    ``coef`` and ``vcov`` are on the link scale and ordered like ``terms``
    (covariate columns, then ``ExcessIntensity`` when free).  ``vcov`` is
    ``None`` whenever a boundary flag makes it unavailable.
    """

    params: ModelParams
    terms: tuple[str, ...]
    coef: NDArray[np.float64]
    vcov: NDArray[np.float64] | None
    loglik: float
    deviance: float
    null_deviance: float
    df_residual: int
    df_null: int
    iterations: int
    converged: bool
    flags: frozenset[BoundaryFlag]
    lambda_fixed: float | None
    covariance: str = "observed"
    unavailable_reason: str | None = None
    model_terms: tuple[str, ...] = ()

    @property
    def n_free(self) -> int:
        return len(self.terms)

    @property
    def free_lambda(self) -> bool:
        return self.lambda_fixed is None

    @property
    def lam(self) -> float:
        return self.params.lam

    @property
    def beta(self) -> NDArray[np.float64]:
        return self.params.beta

    @property
    def se(self) -> NDArray[np.float64]:
        if self.vcov is None:
            return np.full(self.n_free, np.nan)
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def theta(self) -> float:
        """Prevalence for an intercept-only model."""
        if len(self.params.values) != 1:
            raise ArgumentError("prevalence depends on covariates; use predict_prevalence")
        return float(icll(self.params.values[0]))

    @property
    def eta(self) -> float:
        if len(self.params.values) != 1:
            raise ArgumentError("eta depends on covariates; use predict_prevalence")
        return self.params.values[0]


def _boundary_result(
    data: PooledDataset,
    names: tuple[str, ...],
    kind: Parameterization,
    lambda_fixed: float | None,
    flag: BoundaryFlag,
    terms: tuple[str, ...],
) -> FitResult:
    p = len(names)
    beta = np.full(p, np.nan)
    beta[0] = -math.inf if flag is BoundaryFlag.THETA_ZERO else math.inf
    lam = 0.0 if lambda_fixed is None else lambda_fixed
    params = ModelParams(kind, tuple(beta), lam, lambda_fixed is not None)
    all_terms = names + (() if lambda_fixed is not None else (EXCESS_INTENSITY,))
    coef = np.append(beta, lam) if lambda_fixed is None else beta
    const = float(np.sum(log_binom_coef(data.counts, data.positives)))
    return FitResult(
        params=params,
        terms=all_terms,
        coef=coef,
        vcov=None,
        loglik=const,
        deviance=0.0,
        null_deviance=0.0,
        df_residual=len(data) - len(all_terms),
        df_null=len(data) - 1,
        iterations=0,
        converged=True,
        flags=frozenset({flag}),
        lambda_fixed=lambda_fixed,
        unavailable_reason=f"MLE on the boundary ({flag.value})",
        model_terms=terms,
    )


def _solve(
    data: PooledDataset,
    x: NDArray,
    lambda_fixed: float | None,
    offset: NDArray | None = None,
    start: NDArray | None = None,
) -> tuple[NewtonResult, float, bool, bool]:
    """Fit on the link scale; returns (newton result, lam, at_lower_bound, used_profile)."""
    n = data.counts.astype(float)
    y = data.positives.astype(float)
    log_s = np.log(data.sizes.astype(float))
    if offset is not None:
        res = newton(x, offset, n, y, start if start is not None else np.zeros(x.shape[1]))
        return res, float("nan"), False, False
    free = lambda_fixed is None
    eta0 = le_start(data)
    if not np.isfinite(eta0):
        eta0 = 0.0
    start = np.zeros(x.shape[1] + (1 if free else 0))
    start[0] = eta0
    if not free:
        res = newton(x, link_offset(log_s, lambda_fixed, False), n, y, start)
        return res, float(lambda_fixed), False, False

    z = link_design(x, log_s, True)
    off = link_offset(log_s, 0.0, True)
    res = newton(z, off, n, y, start)
    used_profile = False
    if not res.converged:
        used_profile = True

        def profile(lam: float) -> float:
            return newton(x, (1.0 + lam) * log_s, n, y, start[:-1]).loglik

        lam_hat = _golden_section(profile, -1.0, LAMBDA_MAX)
        inner = newton(x, (1.0 + lam_hat) * log_s, n, y, start[:-1])
        polished = newton(z, off, n, y, np.append(inner.coef, lam_hat))
        res = polished if polished.loglik >= inner.loglik else NewtonResult(
            np.append(inner.coef, lam_hat), inner.loglik, inner.iterations, False
        )
    lam_hat = float(res.coef[-1])
    if lam_hat < -1.0:
        fixed = newton(x, link_offset(log_s, -1.0, False), n, y, res.coef[:-1])
        fixed.coef = np.append(fixed.coef, -1.0)
        return fixed, -1.0, True, used_profile
    return res, lam_hat, False, used_profile


def _information(
    data: PooledDataset, z: NDArray, offset: NDArray, coef: NDArray, covariance: str
) -> NDArray[np.float64]:
    n = data.counts.astype(float)
    if covariance == "expected":
        return expected_link_information(z, offset, n, coef)
    _, hess = link_derivatives(z, offset, n, data.positives.astype(float), coef)
    info = -hess
    return 0.5 * (info + info.T)


def _invert_information(info: NDArray) -> NDArray | None:
    eig = np.linalg.eigvalsh(info)
    if not np.all(np.isfinite(eig)) or eig.min() <= 1e-10 * max(1.0, eig.max()):
        return None
    vcov = np.linalg.inv(info)
    return 0.5 * (vcov + vcov.T)


def null_deviance(data: PooledDataset, lambda_fixed: float | None) -> float:
    """Deviance of the intercept-only model with ``lam`` at its fixed value (0 if free)."""
    if data.total_positive in (0, data.total_pools):
        return 0.0
    lam = 0.0 if lambda_fixed is None else lambda_fixed
    res, _, _, _ = _solve(data, np.ones((len(data), 1)), lam)
    return 2.0 * (saturated_kernel(data.counts, data.positives) - res.loglik)


def _fit_core(
    data: PooledDataset,
    x: NDArray,
    names: tuple[str, ...],
    lambda_fixed: float | None,
    kind: Parameterization,
    covariance: str,
    terms: tuple[str, ...],
) -> FitResult:
    if len(data) == 0:
        raise ArgumentError("empty dataset")
    if covariance not in ("observed", "expected"):
        raise ArgumentError("covariance must be 'observed' or 'expected'")
    if lambda_fixed is not None and not lambda_fixed >= -1:
        raise ArgumentError("fixed excess intensity must be >= -1")
    free = lambda_fixed is None
    if free and data.distinct_sizes.size < 2:
        raise UnidentifiableError(
            "excess intensity is unidentifiable with a single distinct pool size"
        )
    log_s = np.log(data.sizes.astype(float))
    _check_rank(link_design(x, log_s, free), names + ((EXCESS_INTENSITY,) if free else ()))

    if data.total_positive == 0:
        return _boundary_result(data, names, kind, lambda_fixed, BoundaryFlag.THETA_ZERO, terms)
    if data.total_positive == data.total_pools:
        return _boundary_result(data, names, kind, lambda_fixed, BoundaryFlag.THETA_ONE, terms)

    res, lam_hat, at_bound, _ = _solve(data, x, lambda_fixed)
    flags: set[BoundaryFlag] = set()
    reason = None
    all_terms = names + ((EXCESS_INTENSITY,) if free else ())
    beta = res.coef[: x.shape[1]]
    coef = np.append(beta, lam_hat) if free else beta.copy()

    if at_bound:
        flags.add(BoundaryFlag.LAMBDA_AT_MINUS_ONE)
        reason = "excess intensity estimate on the boundary lam = -1"
        vcov = None
    else:
        z = link_design(x, log_s, free)
        off = link_offset(log_s, lam_hat if not free else 0.0, free)
        vcov = _invert_information(_information(data, z, off, coef, covariance))
        if free and n_distinct_cells(data) <= len(all_terms):
            vcov = None
        if vcov is None:
            flags.add(BoundaryFlag.UNIDENTIFIABLE_SE)
            reason = "information matrix is singular or no residual cells remain"

    const = float(np.sum(log_binom_coef(data.counts, data.positives)))
    deviance = max(2.0 * (saturated_kernel(data.counts, data.positives) - res.loglik), 0.0)
    params = ModelParams(kind, tuple(beta), lam_hat, not free)
    return FitResult(
        params=params,
        terms=all_terms,
        coef=coef,
        vcov=vcov,
        loglik=const + res.loglik,
        deviance=deviance,
        null_deviance=null_deviance(data, lambda_fixed),
        df_residual=len(data) - len(all_terms),
        df_null=len(data) - 1,
        iterations=res.iterations,
        converged=res.converged,
        flags=frozenset(flags),
        lambda_fixed=lambda_fixed,
        covariance=covariance,
        unavailable_reason=reason,
        model_terms=terms,
    )


def fit(
    data: PooledDataset, lambda_fixed: float | None = None, covariance: str = "observed"
) -> FitResult:
    """Fit prevalence (and excess intensity unless fixed) without covariates.

    Args:
        data: Pooled outcomes; covariates, if present, must be intercept only.
        lambda_fixed: Known excess intensity, or ``None`` to estimate it.
        covariance: ``"observed"`` (negative Hessian) or ``"expected"`` information.

    Raises:
        ArgumentError: Empty data or covariates beyond an intercept.
        UnidentifiableError: Free ``lam`` with only one distinct pool size.
    """
    if data.has_covariates:
        raise ArgumentError("data has covariates; use fit_glm")
    x = np.ones((len(data), 1))
    return _fit_core(
        data, x, (INTERCEPT,), lambda_fixed, Parameterization.ETA, covariance, (INTERCEPT,)
    )


def fit_glm(
    data: PooledDataset, lambda_fixed: float | None = None, covariance: str = "observed"
) -> FitResult:
    """Fit the complementary log-log GLM ``cll(phi_i) = (1 + lam) log s_i + x_i @ beta``.

    With ``lambda_fixed`` the log pool size is an offset with slope
    ``1 + lambda_fixed``; otherwise it enters as a covariate whose coefficient
    is reported as ``ExcessIntensity``.

    Raises:
        RankDeficientError: The covariates (with log pool size when ``lam`` is
            free) are linearly dependent; the error names the dependent columns.
    """
    return _fit_core(
        data,
        data.design_matrix,
        data.design_names,
        lambda_fixed,
        Parameterization.BETA,
        covariance,
        data.design_terms,
    )


def refit_like(template: FitResult, data: PooledDataset) -> FitResult:
    """Refit ``data`` with the same model configuration as ``template``."""
    func = fit_glm if template.params.kind is Parameterization.BETA else fit
    return func(data, template.lambda_fixed, template.covariance)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def normal_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ArgumentError("confidence level must lie in (0, 1)")
    return float(stats.norm.ppf(0.5 + level / 2.0))


def standard_errors(fit_result: FitResult) -> NDArray[np.float64]:
    """Square roots of the covariance diagonal.

    Raises:
        UnavailableError: With the reason, when a boundary flag is set or the
            fit did not converge.
    """
    if fit_result.vcov is None or fit_result.flags:
        raise UnavailableError(fit_result.unavailable_reason or "standard errors unavailable")
    if not fit_result.converged:
        raise UnavailableError("fit did not converge")
    return fit_result.se


def theta_standard_error(fit_result: FitResult) -> float:
    """Delta-method standard error of the prevalence for an intercept-only fit."""
    se = standard_errors(fit_result)
    return float(dtheta_deta(fit_result.eta) * se[0])


@dataclass(frozen=True)
class Prediction:
    theta: float
    lower: float
    upper: float
    eta: float
    se_eta: float
    level: float


def predict_prevalence(
    fit_result: FitResult, x_new: ArrayLike | None = None, level: float = 0.95
) -> Prediction:
    """Prevalence ``icll(x @ beta)`` with a Wald interval built on the link scale."""
    beta = np.asarray(fit_result.params.values)
    x = np.ones(1) if x_new is None else np.atleast_1d(np.asarray(x_new, dtype=float))
    if x.size != beta.size:
        raise ArgumentError(f"x_new must have length {beta.size}")
    standard_errors(fit_result)
    idx = np.arange(beta.size)
    vcov = fit_result.vcov[np.ix_(idx, idx)]
    eta = float(x @ beta)
    se = float(np.sqrt(max(x @ vcov @ x, 0.0)))
    z = normal_quantile(level)
    return Prediction(
        theta=float(icll(eta)),
        lower=float(icll(eta - z * se)),
        upper=float(icll(eta + z * se)),
        eta=eta,
        se_eta=se,
        level=level,
    )


@dataclass(frozen=True)
class CoefficientRow:
    term: str
    estimate: float
    se: float
    statistic: float
    p_value: float


def coefficient_table(fit_result: FitResult, t_pvalues: bool = False) -> list[CoefficientRow]:
    """Wald statistics per term, intercept first and ``ExcessIntensity`` second.

    ``t_pvalues`` uses a t reference with the residual degrees of freedom;
    the default is the standard normal.
    """
    se = fit_result.se
    order = list(range(fit_result.n_free))
    if EXCESS_INTENSITY in fit_result.terms and fit_result.n_free > 1:
        k = fit_result.terms.index(EXCESS_INTENSITY)
        order.remove(k)
        order.insert(1, k)
    rows = []
    for j in order:
        est = float(fit_result.coef[j])
        s = float(se[j])
        stat = est / s if np.isfinite(s) and s > 0 else float("nan")
        if not np.isfinite(stat):
            p = float("nan")
        elif t_pvalues and fit_result.df_residual > 0:
            p = float(2.0 * stats.t.sf(abs(stat), fit_result.df_residual))
        else:
            p = float(2.0 * stats.norm.sf(abs(stat)))
        rows.append(CoefficientRow(fit_result.terms[j], est, s, stat, p))
    return rows
