"""Seeded simulation of pooled testing studies.

Each replicate draws from its own ``numpy.random.PCG64`` stream seeded by
``SeedSequence(master_seed, spawn_key=(replicate,))``, so replicate ``k``
is reproducible on its own and independent of how many others ran.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from pooltest.distribution import ModelParams, PooledDataset, aggregate, pool_probabilities
from pooltest.errors import ArgumentError, PoolTestError
from pooltest.estimation import (
    EXCESS_INTENSITY,
    FitResult,
    fit,
    fit_glm,
    normal_quantile,
)
from pooltest.information import fisher_information
from pooltest.likelihood import hessian

RNG_ALGORITHM = "numpy.random.PCG64/SeedSequence(spawn_key=(replicate,))"


def rng_metadata() -> dict:
    return {"algorithm": RNG_ALGORITHM, "numpy": np.__version__}


def replicate_rng(master_seed: int, replicate: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(replicate),))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class PoolSizeLaw:
    """How pool sizes are generated.

    ``fixed``: every pool has size ``value``; ``poisson``: IID Poisson with
    mean ``value``, zero draws redrawn; ``list``: the sizes in ``value``,
    recycled to the number of pools.
    """

    kind: Literal["fixed", "poisson", "list"]
    value: float | tuple[int, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "poisson", "list"):
            raise ArgumentError(f"unknown pool size law {self.kind!r}")
        if self.kind == "list":
            sizes = tuple(int(v) for v in np.atleast_1d(self.value))
            if not sizes or min(sizes) < 1:
                raise ArgumentError("listed pool sizes must be >= 1")
            object.__setattr__(self, "value", sizes)
        elif self.kind == "fixed" and (int(self.value) != self.value or self.value < 1):
            raise ArgumentError("fixed pool size must be a positive integer")
        elif self.kind == "poisson" and not self.value > 0:
            raise ArgumentError("Poisson mean must be positive")

    def draw(self, rng: np.random.Generator, n_pools: int) -> NDArray[np.int64]:
        if self.kind == "fixed":
            return np.full(n_pools, int(self.value), dtype=np.int64)
        if self.kind == "list":
            return np.resize(np.array(self.value, dtype=np.int64), n_pools)
        sizes = rng.poisson(float(self.value), n_pools)
        while np.any(sizes == 0):
            zero = sizes == 0
            sizes[zero] = rng.poisson(float(self.value), int(zero.sum()))
        return sizes.astype(np.int64)


CovariateGenerator = Callable[[np.random.Generator, int], NDArray[np.float64]]


@dataclass(frozen=True)
class SimConfig:
    """A simulation design.

    ``fit_lambda`` says how replicates are analysed: a float fixes the excess
    intensity at that value, ``None`` estimates it.  ``covariates`` returns
    an ``(n_pools, m)`` matrix with a leading intercept column.
    """

    n_pools: int
    pool_size_law: PoolSizeLaw
    true_params: ModelParams
    replicates: int = 1000
    master_seed: int = 0
    fit_lambda: float | None = 0.0
    covariates: CovariateGenerator | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.n_pools < 1:
            raise ArgumentError("n_pools must be positive")
        if self.replicates < 1:
            raise ArgumentError("replicates must be positive")


def standard_design(
    replicates: int = 1000,
    master_seed: int = 0,
    fit_lambda: float | None = 0.0,
    theta: float = 0.0384,
    lam: float = 0.0,
) -> SimConfig:
    """400 pools, Poisson(20) pool sizes, theta = 0.0384, lam = 0, no covariates."""
    return SimConfig(
        n_pools=400,
        pool_size_law=PoolSizeLaw("poisson", 20.0),
        true_params=ModelParams.from_theta(theta, lam),
        replicates=replicates,
        master_seed=master_seed,
        fit_lambda=fit_lambda,
    )


def simulate_dataset(config: SimConfig, replicate: int = 0) -> PooledDataset:
    """Draw pool sizes, then outcomes; returns rows aggregated by (size, covariates)."""
    rng = replicate_rng(config.master_seed, replicate)
    sizes = config.pool_size_law.draw(rng, config.n_pools)
    x = None
    if config.covariates is not None:
        x = np.asarray(config.covariates(rng, config.n_pools), dtype=float)
    design = PooledDataset(sizes, np.ones_like(sizes), np.zeros_like(sizes), x)
    phi = pool_probabilities(design, config.true_params)
    y = rng.binomial(1, phi)
    return aggregate(design.with_positives(y))


def fit_replicate(config: SimConfig, data: PooledDataset) -> FitResult:
    func = fit_glm if config.covariates is not None else fit
    return func(data, config.fit_lambda)


def _usable(result: FitResult) -> bool:
    return result.converged and not result.flags and result.vcov is not None


@dataclass(frozen=True)
class CoverageSummary:
    parameter: str
    level: float
    replicates: int
    used: int
    boundary: int
    failed: int
    covered: int
    coverage: float
    mean_bias: float
    mean_se: float
    metadata: dict = field(default_factory=rng_metadata)

    def as_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


def coverage_study(
    config: SimConfig, level: float = 0.95, parameter: str = "theta"
) -> CoverageSummary:
    """Fraction of replicates whose Wald interval covers the true value.

    For ``theta`` the interval is built on the link scale and mapped back
    through ``icll``; ``mean_se`` is the delta-method prevalence SE.  For
    ``lambda`` the fit must estimate the excess intensity.  Replicates whose
    fit hits a boundary (all negative, all positive, ``lam = -1`` or no
    standard errors) are excluded and counted in ``boundary``.
    """
    if parameter not in ("theta", "lambda"):
        raise ArgumentError("parameter must be 'theta' or 'lambda'")
    if parameter == "lambda" and config.fit_lambda is not None:
        raise ArgumentError("lambda coverage needs a free-lambda fit (fit_lambda=None)")
    if config.covariates is not None and parameter == "theta":
        raise ArgumentError("theta coverage is defined for models without covariates")
    z = normal_quantile(level)
    truth_theta = config.true_params.theta
    truth_eta = config.true_params.eta
    truth_lam = config.true_params.lam
    covered = used = boundary = failed = 0
    bias, ses = [], []
    for r in range(config.replicates):
        data = simulate_dataset(config, r)
        try:
            res = fit_replicate(config, data)
        except PoolTestError:
            failed += 1
            continue
        if not _usable(res):
            boundary += 1
            continue
        used += 1
        if parameter == "theta":
            eta_hat, se_eta = res.coef[0], res.se[0]
            covered += int(abs(eta_hat - truth_eta) <= z * se_eta)
            bias.append(res.theta - truth_theta)
            ses.append(float(np.exp(eta_hat - np.exp(eta_hat)) * se_eta))
        else:
            k = res.terms.index(EXCESS_INTENSITY)
            lam_hat, se_lam = res.coef[k], res.se[k]
            covered += int(abs(lam_hat - truth_lam) <= z * se_lam)
            bias.append(lam_hat - truth_lam)
            ses.append(float(se_lam))
    nan = float("nan")
    return CoverageSummary(
        parameter=parameter,
        level=level,
        replicates=config.replicates,
        used=used,
        boundary=boundary,
        failed=failed,
        covered=covered,
        coverage=covered / used if used else nan,
        mean_bias=float(np.mean(bias)) if bias else nan,
        mean_se=float(np.mean(ses)) if ses else nan,
    )


@dataclass(frozen=True)
class NullCalibration:
    p_values: NDArray[np.float64]
    ks_distance: float
    boundary: int
    metadata: dict = field(default_factory=rng_metadata)

    def as_dict(self) -> dict:
        return {
            "replicates_used": int(self.p_values.size),
            "boundary": self.boundary,
            "ks_distance": self.ks_distance,
            "metadata": self.metadata,
        }


def lambda_null_calibration(config: SimConfig) -> NullCalibration:
    """Wald p-values for ``lam = 0`` across replicates and their KS distance to uniform."""
    from pooltest.diagnostics import wald_test_lambda

    if config.fit_lambda is not None:
        raise ArgumentError("null calibration needs a free-lambda fit (fit_lambda=None)")
    pvals = []
    boundary = 0
    for r in range(config.replicates):
        try:
            res = fit_replicate(config, simulate_dataset(config, r))
        except PoolTestError:
            boundary += 1
            continue
        if not _usable(res):
            boundary += 1
            continue
        pvals.append(wald_test_lambda(res).p_value)
    p = np.array(pvals)
    ks = float(stats.kstest(p, "uniform").statistic) if p.size else float("nan")
    return NullCalibration(p, ks, boundary)


@dataclass(frozen=True)
class InformationStudy:
    mean_observed: NDArray[np.float64]
    standard_error: NDArray[np.float64]
    expected: NDArray[np.float64]
    replicates: int

    def z_scores(self) -> NDArray[np.float64]:
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.mean_observed - self.expected) / self.standard_error


def information_study(
    design: PooledDataset,
    params: ModelParams,
    replicates: int,
    master_seed: int = 0,
) -> InformationStudy:
    """Mean observed information (negative Hessian at the truth) over simulated outcomes.

    Replicates where the Hessian is undefined (a positive pool count where the
    model puts zero probability) cannot occur for interior parameters.
    """
    rng = replicate_rng(master_seed, 0)
    phi = pool_probabilities(design, params)
    draws = rng.binomial(design.counts[None, :], phi[None, :], size=(replicates, len(design)))
    k = params.n_free
    total = np.zeros((k, k))
    total_sq = np.zeros((k, k))
    for y in draws:
        obs = -hessian(design.with_positives(y), params)
        total += obs
        total_sq += obs * obs
    mean = total / replicates
    var = total_sq / replicates - mean * mean
    se = np.sqrt(np.maximum(var, 0.0) / replicates)
    expected = fisher_information(design, None, params).matrix
    return InformationStudy(mean, se, expected, replicates)


def summarise_replicates(
    config: SimConfig, replicates: Sequence[int] | None = None
) -> list[PooledDataset]:
    idx = range(config.replicates) if replicates is None else replicates
    return [simulate_dataset(config, r) for r in idx]
