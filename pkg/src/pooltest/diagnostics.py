"""Diagnostic tests for the positive-pool-probability curve.

Three checks are provided: a Wald test of ``lam = 0``, a likelihood-ratio
comparison against the unconstrained model that treats pool size as a
categorical factor, and the data behind a pool probability plot
(empirical positive rate per pool size against the fitted curve).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import special, stats

from pooltest.distribution import (
    INTERCEPT,
    ModelParams,
    Parameterization,
    PooledDataset,
    cll,
    icll,
    log_binom_coef,
)
from pooltest.errors import ArgumentError, PoolTestError, UnavailableError
from pooltest.estimation import (
    EXCESS_INTENSITY,
    BoundaryFlag,
    FitResult,
    _check_rank,
    _invert_information,
    _information,
    _solve,
    fit_glm,
    normal_quantile,
    null_deviance,
    refit_like,
    saturated_kernel,
    standard_errors,
)

NESTING_TOL = 1e-8


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-squared distribution, ``Q(df/2, x/2)``."""
    if x < 0:
        raise ArgumentError("chi-squared statistic must be non-negative")
    if df <= 0:
        raise ArgumentError("degrees of freedom must be positive")
    if x == 0:
        return 1.0
    return float(special.gammaincc(0.5 * df, 0.5 * x))


@dataclass(frozen=True)
class WaldTest:
    statistic: float
    p_value: float
    reference: str


def wald_test_lambda(fit_result: FitResult, t_dist: bool = False) -> WaldTest:
    """Test ``lam = 0`` with ``z = lam_hat / se(lam_hat)``.

    Raises:
        UnavailableError: For fixed-``lam`` fits or when the standard error is unavailable.
    """
    if not fit_result.free_lambda:
        raise UnavailableError("excess intensity was fixed in this fit")
    se = standard_errors(fit_result)
    k = fit_result.terms.index(EXCESS_INTENSITY)
    lam_hat = float(fit_result.coef[k])
    z = lam_hat / float(se[k])
    if t_dist and fit_result.df_residual > 0:
        p = 2.0 * stats.t.sf(abs(z), fit_result.df_residual)
        ref = f"t({fit_result.df_residual})"
    else:
        p = 2.0 * stats.norm.sf(abs(z))
        ref = "normal"
    return WaldTest(z, float(min(p, 1.0)), ref)


# ---------------------------------------------------------------------------
# Saturated (unconstrained) model
# ---------------------------------------------------------------------------


def _size_indicators(data: PooledDataset) -> tuple[NDArray, tuple[str, ...], NDArray]:
    levels = data.distinct_sizes
    ind = (data.sizes[:, None] == levels[None, :]).astype(float)
    names = tuple(f"poolsize{int(s)}" for s in levels)
    return ind, names, levels


def fit_saturated(data: PooledDataset, covariance: str = "observed") -> FitResult:
    """Fit ``cll(phi_i) = mu_{s_i} + x_i @ beta`` with one free effect per pool size.

    Non-intercept covariates of ``data`` are kept; the intercept is absorbed
    by the pool-size effects.  A pool size whose pools are all negative (all
    positive) gets ``mu = -inf`` (``+inf``); those rows fit exactly and are
    excluded from the numerical solve.
    """
    if len(data) == 0:
        raise ArgumentError("empty dataset")
    ind, level_names, levels = _size_indicators(data)
    x_cov = data.design_matrix
    names = data.design_names
    keep_cols = [j for j, nm in enumerate(names) if nm != INTERCEPT]
    if data.covariates is not None and keep_cols:
        x = np.column_stack([ind, x_cov[:, keep_cols]])
        all_names = level_names + tuple(names[j] for j in keep_cols)
    else:
        x = ind
        all_names = level_names
    _check_rank(x, all_names)

    n_lev = len(levels)
    mu = np.full(n_lev, np.nan)
    interior_rows = np.ones(len(data), dtype=bool)
    for k, s in enumerate(levels):
        rows = data.sizes == s
        ys, ns = data.positives[rows].sum(), data.counts[rows].sum()
        if ys == 0:
            mu[k] = -math.inf
            interior_rows &= ~rows
        elif ys == ns:
            mu[k] = math.inf
            interior_rows &= ~rows
    interior_levels = np.isnan(mu)

    coef = np.empty(x.shape[1])
    coef[:n_lev] = mu
    coef[n_lev:] = 0.0
    iterations, converged = 0, True
    kernel_ll = 0.0
    vcov = None
    flags: set[BoundaryFlag] = set()
    if np.any(interior_rows):
        sub = data.subset(interior_rows)
        cols = np.concatenate([np.flatnonzero(interior_levels), np.arange(n_lev, x.shape[1])])
        x_sub = x[np.ix_(interior_rows, cols)]
        _check_rank(x_sub, tuple(all_names[j] for j in cols))
        start = np.zeros(cols.size)
        for j, c in enumerate(cols):
            if c < n_lev:
                r = sub.sizes == levels[c]
                p = sub.positives[r].sum() / sub.counts[r].sum()
                start[j] = float(cll(p))
        offset = np.zeros(len(sub))
        res, _, _, _ = _solve(sub, x_sub, None, offset=offset, start=start)
        coef[cols] = res.coef
        iterations, converged = res.iterations, res.converged
        kernel_ll = res.loglik
        if not np.any(~interior_levels):
            vcov = _invert_information(_information(sub, x_sub, offset, res.coef, covariance))
    if vcov is None:
        flags.add(BoundaryFlag.UNIDENTIFIABLE_SE)

    const = float(np.sum(log_binom_coef(data.counts, data.positives)))
    sat = saturated_kernel(data.counts, data.positives)
    # excluded rows sit exactly at their empirical rate
    sat_interior = saturated_kernel(
        data.counts[interior_rows], data.positives[interior_rows]
    )
    loglik_kernel = kernel_ll + (sat - sat_interior)
    deviance = max(2.0 * (sat - loglik_kernel), 0.0)
    return FitResult(
        params=ModelParams(Parameterization.BETA, tuple(coef), -1.0, True),
        terms=all_names,
        coef=coef,
        vcov=vcov,
        loglik=const + loglik_kernel,
        deviance=deviance,
        null_deviance=null_deviance(data, 0.0),
        df_residual=len(data) - len(all_names),
        df_null=len(data) - 1,
        iterations=iterations,
        converged=converged,
        flags=frozenset(flags),
        lambda_fixed=-1.0,
        covariance=covariance,
        unavailable_reason=None if vcov is not None else "infinite pool-size effects",
        model_terms=("poolsize",) + tuple(t for t in data.design_terms if t != INTERCEPT),
    )


# ---------------------------------------------------------------------------
# Analysis of deviance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnovaRow:
    label: str
    residual_df: int
    residual_deviance: float
    df_delta: int | None = None
    deviance_delta: float | None = None
    p_value: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def anova_nested(
    fit_small: FitResult, fit_big: FitResult, label: str = "Unconstrained Model"
) -> AnovaRow:
    """Likelihood-ratio comparison of nested fits on the same data.

    Raises:
        ArgumentError: If the models are not nested (no extra parameters in
            ``fit_big`` or a negative deviance reduction).
    """
    df_delta = fit_big.n_free - fit_small.n_free
    delta = 2.0 * (fit_big.loglik - fit_small.loglik)
    if (
        df_delta == 0
        and fit_big.terms == fit_small.terms
        and abs(delta) <= NESTING_TOL * max(1.0, abs(fit_small.loglik))
    ):
        return AnovaRow(label, fit_big.df_residual, fit_big.deviance, 0, 0.0, 1.0)
    if df_delta <= 0:
        raise ArgumentError("models are not nested: the larger model has no extra parameters")
    if delta < -NESTING_TOL * max(1.0, abs(fit_small.loglik)):
        raise ArgumentError("models are not nested: deviance increases in the larger model")
    delta = max(delta, 0.0)
    return AnovaRow(
        label=label,
        residual_df=fit_big.df_residual,
        residual_deviance=fit_big.deviance,
        df_delta=df_delta,
        deviance_delta=delta,
        p_value=chi2_sf(delta, df_delta),
    )


def diagnostic_table(
    fit_result: FitResult, data: PooledDataset
) -> tuple[AnovaRow, AnovaRow]:
    """Actual model against the unconstrained pool-size-as-factor model."""
    sat = fit_saturated(data, fit_result.covariance)
    actual = AnovaRow("Actual Model", fit_result.df_residual, fit_result.deviance)
    return actual, anova_nested(fit_result, sat)


def sequential_anova(data: PooledDataset, lambda_fixed: float | None = None) -> list[AnovaRow]:
    """Analysis of deviance adding terms in order.

    The NULL model is intercept only with ``lam`` at its fixed value (0 when
    ``lam`` is free); ``ExcessIntensity`` enters first when free, then each
    covariate term in column order.
    """
    names = data.design_names
    terms = data.design_terms
    x_full = data.design_matrix
    rows = [AnovaRow("NULL", len(data) - 1, null_deviance(data, lambda_fixed))]
    prev_dev, prev_df = rows[0].residual_deviance, rows[0].residual_df
    groups: dict[str, list[int]] = {}
    for j in range(1, len(names)):
        groups.setdefault(terms[j], []).append(j)
    cols = [0]
    steps: list[tuple[str, list[int]]] = []
    if lambda_fixed is None:
        steps.append((EXCESS_INTENSITY, list(cols)))
    for term, idx in groups.items():
        cols = cols + idx
        steps.append((term, list(cols)))
    for label, cols in steps:
        sub = PooledDataset(
            data.sizes,
            data.counts,
            data.positives,
            x_full[:, cols],
            tuple(names[c] for c in cols),
            tuple(terms[c] for c in cols),
        )
        f = fit_glm(sub, lambda_fixed)
        df = f.df_residual
        delta = max(prev_dev - f.deviance, 0.0)
        rows.append(
            AnovaRow(label, df, f.deviance, prev_df - df, delta, chi2_sf(delta, prev_df - df))
        )
        prev_dev, prev_df = f.deviance, df
    return rows


# ---------------------------------------------------------------------------
# Pool probability plot
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PppPlotData:
    """Data for a pool probability plot.

    ``curve`` holds the fitted positive-pool probability at each observed
    size for a unit with pool-weighted mean covariates; ``curve_loo`` the
    same from refits that drop that size (NaN where unidentifiable).
    ``adjusted`` marks empirical points whose interval used a 0.5-count
    continuity adjustment because every pool was negative or positive.
    """

    sizes: NDArray[np.int64]
    pool_counts: NDArray[np.int64]
    curve: NDArray[np.float64]
    curve_loo: NDArray[np.float64] | None
    empirical: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    adjusted: NDArray[np.bool_]
    level: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "pool_size", "value", "lower", "upper", "flag"])
        for s, c in zip(self.sizes, self.pool_counts):
            w.writerow(["HIST", int(s), int(c), "", "", ""])
        for k, s in enumerate(self.sizes):
            w.writerow(["CURVE", int(s), _fmt(self.curve[k]), "", "", "full"])
            if self.curve_loo is not None:
                w.writerow(["CURVE", int(s), _fmt(self.curve_loo[k]), "", "", "loo"])
        for k, s in enumerate(self.sizes):
            w.writerow(
                [
                    "POINT",
                    int(s),
                    _fmt(self.empirical[k]),
                    _fmt(self.lower[k]),
                    _fmt(self.upper[k]),
                    "adjusted" if self.adjusted[k] else "",
                ]
            )
        return buf.getvalue()

    def as_dict(self) -> dict:
        def clean(arr):
            return [None if not np.isfinite(v) else float(v) for v in arr]

        return {
            "level": self.level,
            "histogram": {"pool_size": self.sizes.tolist(), "pools": self.pool_counts.tolist()},
            "curve": {
                "pool_size": self.sizes.tolist(),
                "phi": clean(self.curve),
                "phi_loo": None if self.curve_loo is None else clean(self.curve_loo),
            },
            "points": {
                "pool_size": self.sizes.tolist(),
                "phi": clean(self.empirical),
                "lower": clean(self.lower),
                "upper": clean(self.upper),
                "adjusted": self.adjusted.tolist(),
            },
        }


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def neutral_covariates(data: PooledDataset) -> NDArray[np.float64]:
    """Pool-weighted mean covariate row (the 'average' unit)."""
    x = data.design_matrix
    w = data.counts.astype(float)
    return (w[:, None] * x).sum(axis=0) / w.sum()


def _curve_value(fit_result: FitResult, x_bar: NDArray, s: float) -> float:
    beta = np.asarray(fit_result.params.values)
    if fit_result.flags & {BoundaryFlag.THETA_ZERO, BoundaryFlag.THETA_ONE}:
        return 0.0 if BoundaryFlag.THETA_ZERO in fit_result.flags else 1.0
    eta = float(x_bar @ beta)
    return float(icll((1.0 + fit_result.lam) * math.log(s) + eta))


def empirical_interval(y: int, n: int, z: float) -> tuple[float, float, float, bool]:
    """Point estimate ``y/n`` with a Wald interval on the cll scale."""
    p = y / n
    adjusted = y == 0 or y == n
    p_eff = 0.5 / n if y == 0 else (n - 0.5) / n if y == n else p
    eta = float(cll(p_eff))
    se = math.sqrt(p_eff * (1 - p_eff) / n) / ((1 - p_eff) * -math.log1p(-p_eff))
    lo, hi = float(icll(eta - z * se)), float(icll(eta + z * se))
    if y == 0:
        lo = 0.0
    if y == n:
        hi = 1.0
    return p, lo, hi, adjusted


def ppp_plot_data(
    fit_result: FitResult,
    data: PooledDataset,
    leave_one_out: bool = False,
    level: float = 0.95,
) -> PppPlotData:
    """Histogram, fitted curve and empirical points per distinct pool size."""
    if not fit_result.converged:
        raise UnavailableError("fit did not converge")
    z = normal_quantile(level)
    sizes = data.distinct_sizes
    x_bar = neutral_covariates(data)
    pools = np.array([data.counts[data.sizes == s].sum() for s in sizes])
    pos = np.array([data.positives[data.sizes == s].sum() for s in sizes])
    curve = np.array([_curve_value(fit_result, x_bar, float(s)) for s in sizes])

    loo = None
    if leave_one_out:
        loo = np.full(sizes.size, np.nan)
        for k, s in enumerate(sizes):
            rest = data.subset(data.sizes != s)
            if len(rest) == 0:
                continue
            try:
                refit = refit_like(fit_result, rest)
            except PoolTestError:
                continue
            if not refit.converged:
                continue
            loo[k] = _curve_value(refit, x_bar, float(s))

    emp, lo, hi, adj = [], [], [], []
    for y, n in zip(pos, pools):
        p, l, h, a = empirical_interval(int(y), int(n), z)
        emp.append(p)
        lo.append(l)
        hi.append(h)
        adj.append(a)
    return PppPlotData(
        sizes=sizes,
        pool_counts=pools,
        curve=curve,
        curve_loo=loo,
        empirical=np.array(emp),
        lower=np.array(lo),
        upper=np.array(hi),
        adjusted=np.array(adj, dtype=bool),
        level=level,
    )
