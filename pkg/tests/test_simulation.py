import math

import numpy as np
import pytest
from scipy import stats

from pooltest import ArgumentError, ModelParams, PooledDataset
from pooltest.simulation import (
    PoolSizeLaw,
    SimConfig,
    coverage_study,
    standard_design,
    information_study,
    lambda_null_calibration,
    replicate_rng,
    rng_metadata,
    simulate_dataset,
    summarise_replicates,
)


class TestPoolSizeLaw:
    def test_fixed(self):
        sizes = PoolSizeLaw("fixed", 7).draw(np.random.default_rng(0), 50)
        assert np.all(sizes == 7)

    def test_list_recycles(self):
        sizes = PoolSizeLaw("list", (1, 5, 10)).draw(np.random.default_rng(0), 7)
        assert sizes.tolist() == [1, 5, 10, 1, 5, 10, 1]

    def test_poisson_positive(self):
        sizes = PoolSizeLaw("poisson", 0.5).draw(np.random.default_rng(1), 5000)
        assert sizes.min() >= 1
        # zero-truncated Poisson mean
        assert sizes.mean() == pytest.approx(0.5 / (1 - math.exp(-0.5)), rel=0.05)

    @pytest.mark.parametrize("kind,value", [("fixed", 0), ("fixed", 2.5), ("poisson", 0.0), ("list", ()), ("gamma", 3)])
    def test_invalid(self, kind, value):
        with pytest.raises(ArgumentError):
            PoolSizeLaw(kind, value)


class TestSimulateDataset:
    def test_fixed_law_single_row(self):
        cfg = SimConfig(100, PoolSizeLaw("fixed", 10), ModelParams.from_theta(0.05, 0.0))
        d = simulate_dataset(cfg, 0)
        assert d.sizes.tolist() == [10] and d.counts.tolist() == [100]

    def test_positive_fraction_matches_model(self):
        cfg = standard_design(replicates=200)
        data = summarise_replicates(cfg)
        pools = sum(int(d.counts.sum()) for d in data)
        positives = sum(int(d.positives.sum()) for d in data)
        s = np.arange(1, 200)
        weight = stats.poisson.pmf(s, 20.0) / (1 - math.exp(-20.0))
        expected = float(np.sum(weight * (1 - (1 - 0.0384) ** s)))
        frac = positives / pools
        se = math.sqrt(expected * (1 - expected) / pools)
        assert abs(frac - expected) < 3 * se

    def test_reproducible_and_distinct(self):
        cfg = standard_design(replicates=3, master_seed=11)
        a, b = simulate_dataset(cfg, 1), simulate_dataset(cfg, 1)
        np.testing.assert_array_equal(a.sizes, b.sizes)
        np.testing.assert_array_equal(a.positives, b.positives)
        c = simulate_dataset(cfg, 2)
        assert not (np.array_equal(a.sizes, c.sizes) and np.array_equal(a.positives, c.positives))

    def test_replicate_stream_independent_of_count(self):
        # replicate k is the same whatever the total number of replicates
        small, large = standard_design(replicates=2), standard_design(replicates=500)
        np.testing.assert_array_equal(simulate_dataset(small, 1).positives, simulate_dataset(large, 1).positives)

    def test_rng_streams(self):
        assert replicate_rng(5, 0).random() != replicate_rng(5, 1).random()
        assert replicate_rng(5, 3).random() == replicate_rng(5, 3).random()
        assert "PCG64" in rng_metadata()["algorithm"]

    def test_covariates(self):
        def gen(rng, n):
            return np.column_stack([np.ones(n), rng.integers(0, 2, n)])

        params = ModelParams.from_beta([-3.0, 0.5], 0.0, lambda_fixed=True)
        cfg = SimConfig(300, PoolSizeLaw("list", (5, 10)), params, covariates=gen)
        d = simulate_dataset(cfg, 0)
        assert d.covariates.shape[1] == 2 and len(d) == 4
        assert d.counts.sum() == 300


class TestCoverage:
    def test_zero_prevalence_all_boundary(self):
        cfg = SimConfig(50, PoolSizeLaw("fixed", 5), ModelParams.from_theta(0.0), replicates=20)
        summary = coverage_study(cfg)
        assert summary.boundary == 20 and summary.used == 0
        assert math.isnan(summary.coverage)
        assert summary.as_dict()["coverage"] is None

    def test_theta_coverage_small(self):
        summary = coverage_study(standard_design(replicates=200, master_seed=1), 0.95)
        assert summary.used + summary.boundary + summary.failed == 200
        assert 0.88 <= summary.coverage <= 1.0
        assert abs(summary.mean_bias) < 3 * summary.mean_se / math.sqrt(summary.used) + 1e-3

    def test_lambda_coverage(self):
        cfg = SimConfig(
            600, PoolSizeLaw("list", (1, 5, 10, 20)), ModelParams.from_theta(0.05, 0.0),
            replicates=300, master_seed=2, fit_lambda=None,
        )
        summary = coverage_study(cfg, 0.95, "lambda")
        assert 0.92 <= summary.coverage <= 0.98

    def test_argument_checks(self):
        with pytest.raises(ArgumentError):
            coverage_study(standard_design(replicates=2), parameter="eta")
        with pytest.raises(ArgumentError):
            coverage_study(standard_design(replicates=2), parameter="lambda")
        with pytest.raises(ArgumentError):
            lambda_null_calibration(standard_design(replicates=2))

    def test_null_calibration_runs(self):
        cfg = SimConfig(
            400, PoolSizeLaw("list", (1, 5, 10, 20)), ModelParams.from_theta(0.05, 0.0),
            replicates=100, master_seed=4, fit_lambda=None,
        )
        cal = lambda_null_calibration(cfg)
        assert cal.p_values.size + cal.boundary == 100
        assert np.all((cal.p_values >= 0) & (cal.p_values <= 1))
        assert 0 <= cal.ks_distance <= 1
        assert cal.as_dict()["replicates_used"] == cal.p_values.size


class TestInformationStudy:
    @pytest.mark.parametrize("lam", [0.0, 0.3])
    def test_mean_observed_matches_expected(self, lam):
        design = PooledDataset.from_rows([(1, 30, 0), (5, 20, 0), (20, 10, 0)])
        study = information_study(design, ModelParams.from_theta(0.06, lam), 20000, master_seed=9)
        assert np.all(np.abs(study.z_scores()) < 3.5)

    def test_theta_only(self):
        design = PooledDataset.from_rows([(4, 25, 0)])
        study = information_study(design, ModelParams.from_theta(0.1, lambda_fixed=True), 20000, master_seed=3)
        assert study.expected.shape == (1, 1)
        assert abs(study.z_scores()[0, 0]) < 3.5
