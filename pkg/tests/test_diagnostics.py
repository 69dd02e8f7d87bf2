import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pooltest import (
    ArgumentError,
    BoundaryFlag,
    PooledDataset,
    UnavailableError,
    anova_nested,
    chi2_sf,
    cll,
    diagnostic_table,
    fit,
    fit_glm,
    fit_saturated,
    ppp_plot_data,
    sequential_anova,
    wald_test_lambda,
)
from pooltest.diagnostics import empirical_interval, neutral_covariates

from conftest import random_dataset


def covariate_data():
    x = np.column_stack([np.ones(8), [0, 1] * 4, [0, 0, 1, 1] * 2])
    return PooledDataset(
        np.array([5, 5, 5, 5, 20, 20, 40, 40]),
        np.array([10, 12, 9, 11, 10, 8, 7, 9]),
        np.array([1, 3, 2, 5, 4, 6, 3, 8]),
        x,
        ("(Intercept)", "VirusH", "Dev"),
        ("(Intercept)", "Virus", "Dev"),
    )


class TestChiSquared:
    def test_zero(self):
        for k in (1, 3, 50):
            assert chi2_sf(0.0, k) == 1.0

    def test_reference_values(self):
        assert chi2_sf(69.222, 50) == pytest.approx(0.037171, abs=5e-6)
        assert chi2_sf(69.512, 51) == pytest.approx(0.043347, abs=5e-6)

    @pytest.mark.parametrize("x,df", [(0.5, 1), (3.0, 2), (10.0, 5), (70.0, 50), (150.0, 100), (2.0, 30)])
    def test_high_precision(self, x, df):
        import mpmath

        with mpmath.workdps(40):
            expected = float(mpmath.gammainc(mpmath.mpf(df) / 2, mpmath.mpf(x) / 2, mpmath.inf, regularized=True))
        assert abs(chi2_sf(x, df) - expected) < 1e-10

    @given(st.floats(0.0, 200.0), st.integers(1, 80))
    def test_strictly_decreasing(self, x, df):
        a, b = chi2_sf(x, df), chi2_sf(x + 0.5, df)
        assert b <= a
        # strict only where both values are representable away from 0 and 1
        if 1e-300 < b and a < 1 - 1e-15:
            assert b < a

    @pytest.mark.parametrize("x,df", [(1.0, 1), (10.0, 5), (70.0, 50)])
    def test_monte_carlo(self, x, df):
        rng = np.random.default_rng(df)
        draws = rng.chisquare(df, size=1_000_000)
        p = float(np.mean(draws > x))
        se = math.sqrt(p * (1 - p) / draws.size)
        assert abs(chi2_sf(x, df) - p) < 3 * se

    def test_invalid(self):
        with pytest.raises(ArgumentError):
            chi2_sf(-1.0, 2)
        with pytest.raises(ArgumentError):
            chi2_sf(1.0, 0)


class TestWald:
    def test_zero_estimate(self):
        f = fit(PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16)]))
        coef = f.coef.copy()
        coef[-1] = 0.0
        assert wald_test_lambda(dataclasses.replace(f, coef=coef)).p_value == 1.0

    def test_statistic(self):
        f = fit(PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16)]))
        w = wald_test_lambda(f)
        assert w.statistic == pytest.approx(f.coef[-1] / f.se[-1])
        assert w.reference == "normal"
        assert wald_test_lambda(f, t_dist=True).p_value > w.p_value

    def test_fixed_lambda_unavailable(self):
        f = fit(PooledDataset.from_rows([(2, 20, 4), (8, 20, 9)]), 0.0)
        with pytest.raises(UnavailableError):
            wald_test_lambda(f)

    def test_boundary_unavailable(self):
        f = fit(PooledDataset.from_rows([(2, 50, 30), (20, 50, 10), (40, 50, 8)]))
        assert BoundaryFlag.LAMBDA_AT_MINUS_ONE in f.flags
        with pytest.raises(UnavailableError):
            wald_test_lambda(f)


class TestSaturated:
    def test_per_size_closed_form(self):
        d = PooledDataset.from_rows([(5, 10, 3), (20, 10, 7)])
        sat = fit_saturated(d)
        np.testing.assert_allclose(sat.coef, [cll(0.3), cll(0.7)], rtol=1e-9)
        assert sat.deviance == pytest.approx(0.0, abs=1e-10)
        assert sat.terms == ("poolsize5", "poolsize20")

    def test_infinite_effects(self):
        d = PooledDataset.from_rows([(5, 10, 0), (20, 10, 7), (40, 10, 10)])
        sat = fit_saturated(d)
        assert sat.coef[0] == -math.inf and sat.coef[2] == math.inf
        assert sat.coef[1] == pytest.approx(cll(0.7), rel=1e-9)
        assert sat.deviance == pytest.approx(0.0, abs=1e-10)

    def test_single_size_matches_fixed_model(self):
        d = PooledDataset.from_rows([(8, 10, 3), (8, 6, 1)])
        sat, f = fit_saturated(d), fit(d, 0.0)
        assert sat.loglik == pytest.approx(f.loglik, abs=1e-9)

    def test_with_covariates(self):
        d = covariate_data()
        sat = fit_saturated(d)
        assert sat.terms == ("poolsize5", "poolsize20", "poolsize40", "VirusH", "Dev")
        assert sat.converged

    def test_saturated_deviance_below_nested(self, rng):
        for _ in range(20):
            d = random_dataset(rng, rows=5)
            sat = fit_saturated(d)
            for f in (fit(d), fit(d, 0.0), fit(d, -1.0)):
                assert sat.deviance <= f.deviance + 1e-9


class TestAnova:
    def test_identical_fits(self):
        d = PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16)])
        f = fit(d)
        row = anova_nested(f, f)
        assert row.deviance_delta == 0.0 and row.p_value == 1.0

    def test_swapped_arguments_error(self):
        d = PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16)])
        small, big = fit(d, 0.0), fit(d)
        anova_nested(small, big)
        with pytest.raises(ArgumentError):
            anova_nested(big, small)

    def test_nested_statistic(self):
        d = PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16), (60, 10, 9)])
        small, big = fit(d, 0.0), fit(d)
        row = anova_nested(small, big)
        assert row.df_delta == 1
        assert row.deviance_delta == pytest.approx(small.deviance - big.deviance, abs=1e-9)
        assert row.p_value == pytest.approx(chi2_sf(row.deviance_delta, 1))

    def test_diagnostic_table(self):
        d = covariate_data()
        f = fit_glm(d)
        actual, unconstrained = diagnostic_table(f, d)
        assert actual.label == "Actual Model" and actual.df_delta is None
        assert unconstrained.df_delta == 1
        assert unconstrained.residual_df == len(d) - 5
        assert unconstrained.deviance_delta == pytest.approx(
            f.deviance - unconstrained.residual_deviance, abs=1e-8
        )

    @pytest.mark.parametrize("lam", [None, 0.0])
    def test_sequential_decomposition(self, lam):
        d = covariate_data()
        rows = sequential_anova(d, lam)
        labels = [r.label for r in rows]
        expected = ["NULL"] + (["ExcessIntensity"] if lam is None else []) + ["Virus", "Dev"]
        assert labels == expected
        full = fit_glm(d, lam)
        assert rows[-1].residual_deviance == pytest.approx(full.deviance, abs=1e-9)
        total = sum(r.deviance_delta for r in rows[1:])
        assert rows[0].residual_deviance - rows[-1].residual_deviance == pytest.approx(total, abs=1e-9)
        assert rows[0].residual_deviance == pytest.approx(full.null_deviance, abs=1e-9)
        for r in rows[1:]:
            assert r.df_delta == 1
            assert r.p_value == pytest.approx(chi2_sf(r.deviance_delta, 1))


class TestPoolProbabilityPlot:
    def test_single_size_curve_equals_point(self):
        d = PooledDataset.from_rows([(10, 30, 12)])
        plot = ppp_plot_data(fit(d, 0.0), d)
        assert plot.curve[0] == pytest.approx(plot.empirical[0], rel=1e-12)

    def test_flat_curve_at_lower_bound(self):
        d = PooledDataset.from_rows([(2, 50, 30), (20, 50, 10)])
        f = fit(d)
        assert f.lam == -1.0
        plot = ppp_plot_data(f, d)
        assert plot.curve[0] == pytest.approx(plot.curve[1], rel=1e-12)

    def test_leave_one_out_moves_heavy_size_more(self):
        # two sizes carry the bulk of the data; flip which one is heavy
        def data(heavy):
            counts = {5: 20, 10: 20, 20: 20}
            counts[heavy] = 1000
            light = 40 if heavy == 20 else 20
            return PooledDataset.from_rows(
                [(5, counts[5], round(0.30 * counts[5])),
                 (10, counts[10], round(0.30 * counts[10])),
                 (20, counts[20], round(0.75 * counts[20])),
                 (40, 20, 16)]
            ), light

        d, _ = data(20)
        f = fit(d)
        plot = ppp_plot_data(f, d, leave_one_out=True)
        shift = np.abs(plot.curve_loo - plot.curve)
        share = plot.pool_counts / plot.pool_counts.sum()
        heavy, light = int(np.argmax(share)), int(np.argmin(share))
        assert share[heavy] > 0.5 and share[light] < 0.02
        assert shift[heavy] > shift[light]

    def test_loo_unidentifiable_marked_nan(self):
        d = PooledDataset.from_rows([(2, 20, 4), (8, 20, 9)])
        plot = ppp_plot_data(fit(d), d, leave_one_out=True)
        assert np.all(np.isnan(plot.curve_loo))

    def test_curve_monotone_and_points_in_range(self, rng):
        for _ in range(10):
            d = random_dataset(rng, rows=6)
            plot = ppp_plot_data(fit(d), d)
            order = np.argsort(plot.sizes)
            assert np.all(np.diff(plot.curve[order]) >= -1e-12)
            assert np.all((plot.empirical >= 0) & (plot.empirical <= 1))
            assert np.all(plot.lower <= plot.empirical) and np.all(plot.empirical <= plot.upper)

    def test_empirical_interval_adjustment(self):
        p, lo, hi, adj = empirical_interval(0, 10, 1.96)
        assert (p, lo, adj) == (0.0, 0.0, True) and hi > 0
        p, lo, hi, adj = empirical_interval(10, 10, 1.96)
        assert (p, hi, adj) == (1.0, 1.0, True) and lo < 1
        p, lo, hi, adj = empirical_interval(3, 10, 1.96)
        assert not adj and lo < 0.3 < hi

    def test_neutral_covariates_weighted(self):
        d = covariate_data()
        xbar = neutral_covariates(d)
        assert xbar[0] == 1.0
        assert xbar[1] == pytest.approx(np.sum(d.counts * d.covariates[:, 1]) / d.counts.sum())

    def test_csv_sections(self):
        d = PooledDataset.from_rows([(2, 20, 4), (8, 20, 9), (30, 20, 16)])
        text = ppp_plot_data(fit(d), d, leave_one_out=True).to_csv().splitlines()
        assert text[0] == "section,pool_size,value,lower,upper,flag"
        sections = [line.split(",")[0] for line in text[1:]]
        assert sections.count("HIST") == 3 and sections.count("CURVE") == 6
        assert sections.count("POINT") == 3

    def test_json(self):
        d = PooledDataset.from_rows([(2, 20, 0), (8, 20, 9), (30, 20, 16)])
        out = ppp_plot_data(fit(d), d).as_dict()
        assert out["points"]["adjusted"] == [True, False, False]
        assert out["curve"]["phi_loo"] is None
