"""Positive pool probabilities and the pooled binomial distribution.

A pool of ``s`` units from a population with prevalence ``theta`` tests
positive with probability

    phi_s(theta, lam) = 1 - (1 - theta) ** (s ** (1 + lam))

where ``lam >= -1`` is the excess intensity (``lam < 0`` dilution,
``lam > 0`` intensification, ``lam = 0`` a perfect test).  On the
complementary log-log scale the pool size separates from the prevalence:

    cll(phi_s) = (1 + lam) * log(s) + cll(theta)

which is why every likelihood computation in this package works with the
linear predictor ``eta = cll(theta)`` (or ``x @ beta`` with covariates).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

from pooltest.errors import ArgumentError, DomainError

LN2 = float(np.log(2.0))
INTERCEPT = "(Intercept)"

HFunction = Callable[[int, int], float]


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------


def log1mexp(x: ArrayLike) -> NDArray[np.float64] | float:
    """Compute ``log(1 - exp(-x))`` for ``x >= 0`` without cancellation.

    Uses ``log(-expm1(-x))`` below ``ln 2`` and ``log1p(-exp(-x))`` above.
    ``log1mexp(0) = -inf`` and ``log1mexp(inf) = 0``.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(
            x < LN2,
            np.log(-np.expm1(-np.minimum(x, LN2))),
            np.log1p(-np.exp(-np.maximum(x, LN2))),
        )
    return out if out.ndim else float(out)


def cll(theta: ArrayLike) -> NDArray[np.float64] | float:
    """Complementary log-log transform, ``log(-log(1 - theta))``.

    Maps ``[0, 1]`` onto the extended reals with ``cll(0) = -inf`` and
    ``cll(1) = +inf``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > 1)) or np.any(np.isnan(theta)):
        raise DomainError("cll requires probabilities in [0, 1]")
    with np.errstate(divide="ignore"):
        out = np.log(-np.log1p(-theta))
    return out if out.ndim else float(out)


def icll(eta: ArrayLike) -> NDArray[np.float64] | float:
    """Inverse complementary log-log, ``1 - exp(-exp(eta))``."""
    eta = np.asarray(eta, dtype=float)
    with np.errstate(over="ignore"):
        out = -np.expm1(-np.exp(eta))
    return out if out.ndim else float(out)


def dtheta_deta(eta: ArrayLike) -> NDArray[np.float64] | float:
    """Derivative of ``icll`` at ``eta``: ``exp(eta - exp(eta))``."""
    eta = np.asarray(eta, dtype=float)
    with np.errstate(over="ignore"):
        out = np.exp(eta - np.exp(eta))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Positive pool probabilities
# ---------------------------------------------------------------------------


def _check_sizes(s: ArrayLike) -> NDArray[np.float64]:
    s = np.asarray(s, dtype=float)
    if np.any(s < 1) or np.any(np.isnan(s)):
        raise DomainError("pool sizes must be >= 1")
    return s


def _check_lambda(lam: ArrayLike) -> NDArray[np.float64]:
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam >= -1)):
        raise DomainError("excess intensity must satisfy lam >= -1")
    return lam


def effective_size(s: ArrayLike, lam: ArrayLike) -> NDArray[np.float64]:
    """Effective pool size ``s ** (1 + lam)``, evaluated as ``exp((1+lam) log s)``."""
    return np.exp((1.0 + np.asarray(lam, dtype=float)) * np.log(np.asarray(s, dtype=float)))


def ppp(s: ArrayLike, theta: ArrayLike, lam: ArrayLike = 0.0) -> NDArray[np.float64] | float:
    """Positive pool probability ``1 - (1 - theta) ** (s ** (1 + lam))``.

    Args:
        s: Pool size(s), each ``>= 1``.
        theta: Prevalence in ``[0, 1]``.
        lam: Excess intensity, ``>= -1``.

    Raises:
        DomainError: If any argument is outside its domain.
    """
    s = _check_sizes(s)
    lam = _check_lambda(lam)
    theta = np.asarray(theta, dtype=float)
    if np.any((theta < 0) | (theta > 1)) or np.any(np.isnan(theta)):
        raise DomainError("prevalence must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.expm1(effective_size(s, lam) * np.log1p(-theta))
    out = np.where(theta == 1.0, 1.0, out)
    return out if out.ndim else float(out)


def ppp_eta(s: ArrayLike, eta: ArrayLike, lam: ArrayLike = 0.0) -> NDArray[np.float64] | float:
    """Positive pool probability on the link scale, ``1 - exp(-s**(1+lam) * exp(eta))``.

    ``eta = -inf`` gives 0 and ``eta = +inf`` gives 1.
    """
    s = _check_sizes(s)
    lam = _check_lambda(lam)
    eta = np.asarray(eta, dtype=float)
    if np.any(np.isnan(eta)):
        raise DomainError("eta must not be NaN")
    with np.errstate(over="ignore"):
        out = -np.expm1(-np.exp((1.0 + lam) * np.log(s) + eta))
    return out if out.ndim else float(out)


def perfect_test(s: int, ell: int) -> float:
    """``h`` for a test with perfect sensitivity and specificity."""
    return 0.0 if ell == 0 else 1.0


def ppp_from_h(s: int, theta: float, h: HFunction) -> float:
    """Positive pool probability from a per-count detection function ``h(s, ell)``.

    Returns the binomial expectation ``sum_ell C(s, ell) theta^ell (1-theta)^(s-ell) h(s, ell)``.
    """
    s = int(s)
    if s < 1:
        raise DomainError("pool size must be >= 1")
    if not 0.0 <= theta <= 1.0:
        raise DomainError("prevalence must lie in [0, 1]")
    ell = np.arange(s + 1)
    log_choose = gammaln(s + 1) - gammaln(ell + 1) - gammaln(s - ell + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = log_choose + ell * np.log(theta) + (s - ell) * np.log1p(-theta)
    # 0 * log(0) terms
    log_w = np.where((ell == 0) & (theta == 0.0), 0.0, log_w)
    log_w = np.where((ell == s) & (theta == 1.0), 0.0, log_w)
    weights = np.exp(log_w)
    hv = np.array([float(h(s, int(k))) for k in ell])
    return float(np.sum(weights * hv))


# ---------------------------------------------------------------------------
# Data and parameter containers
# ---------------------------------------------------------------------------


def _as_int_array(values: ArrayLike, name: str) -> NDArray[np.int64]:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ArgumentError(f"{name} must be one-dimensional")
    if arr.size and not np.all(np.equal(np.mod(arr.astype(float), 1), 0)):
        raise ArgumentError(f"{name} must contain integers")
    return arr.astype(np.int64)


@dataclass(frozen=True, eq=False)
class PooledDataset:
    """Pooled test outcomes grouped into rows of identical pools.

    Row ``i`` holds ``counts[i]`` pools of size ``sizes[i]`` of which
    ``positives[i]`` tested positive.  ``covariates`` is an optional
    ``(rows, m)`` matrix whose first column is the intercept.  ``terms``
    gives, per covariate column, the model term it belongs to (a
    categorical variable expands to several columns of one term).
    """

    sizes: NDArray[np.int64]
    counts: NDArray[np.int64]
    positives: NDArray[np.int64]
    covariates: NDArray[np.float64] | None = None
    covariate_names: tuple[str, ...] = ()
    terms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        sizes = _as_int_array(self.sizes, "sizes")
        counts = _as_int_array(self.counts, "counts")
        positives = _as_int_array(self.positives, "positives")
        if not (sizes.shape == counts.shape == positives.shape):
            raise ArgumentError("sizes, counts and positives must have equal length")
        if np.any(sizes < 1):
            raise ArgumentError(f"pool sizes must be >= 1 (row {int(np.argmax(sizes < 1)) + 1})")
        if np.any(counts < 1):
            raise ArgumentError(f"pool counts must be >= 1 (row {int(np.argmax(counts < 1)) + 1})")
        bad = (positives < 0) | (positives > counts)
        if np.any(bad):
            raise ArgumentError(
                f"positives must satisfy 0 <= y <= n (row {int(np.argmax(bad)) + 1})"
            )
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "positives", positives)

        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 2 or x.shape[0] != sizes.size:
                raise ArgumentError("covariates must be a (rows, m) matrix")
            if not np.all(np.isfinite(x)):
                raise ArgumentError("covariates must be finite")
            names = tuple(self.covariate_names) or (
                (INTERCEPT,) + tuple(f"x{j}" for j in range(1, x.shape[1]))
            )
            if len(names) != x.shape[1]:
                raise ArgumentError("covariate_names length does not match covariates")
            terms = tuple(self.terms) or names
            if len(terms) != x.shape[1]:
                raise ArgumentError("terms length does not match covariates")
            object.__setattr__(self, "covariates", x)
            object.__setattr__(self, "covariate_names", names)
            object.__setattr__(self, "terms", terms)
        else:
            object.__setattr__(self, "covariate_names", ())
            object.__setattr__(self, "terms", ())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PooledDataset):
            return NotImplemented
        same = (
            np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.positives, other.positives)
            and self.covariate_names == other.covariate_names
            and self.terms == other.terms
        )
        if not same:
            return False
        if self.covariates is None or other.covariates is None:
            return self.covariates is None and other.covariates is None
        return np.array_equal(self.covariates, other.covariates)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[Sequence[float]],
        covariates: ArrayLike | None = None,
        covariate_names: Sequence[str] = (),
        terms: Sequence[str] = (),
    ) -> "PooledDataset":
        """Build from ``(pool_size, pool_count, positives)`` triples."""
        rows = [tuple(r) for r in rows]
        if not rows:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
        s, n, y = zip(*rows)
        return cls(
            np.array(s),
            np.array(n),
            np.array(y),
            None if covariates is None else np.asarray(covariates, dtype=float),
            tuple(covariate_names),
            tuple(terms),
        )

    def __len__(self) -> int:
        return int(self.sizes.size)

    @property
    def has_covariates(self) -> bool:
        """True when the data carries covariates beyond a lone intercept."""
        if self.covariates is None:
            return False
        return self.covariates.shape[1] > 1 or not np.all(self.covariates[:, 0] == 1.0)

    @property
    def design_matrix(self) -> NDArray[np.float64]:
        if self.covariates is None:
            return np.ones((len(self), 1))
        return self.covariates

    @property
    def design_names(self) -> tuple[str, ...]:
        return self.covariate_names if self.covariates is not None else (INTERCEPT,)

    @property
    def design_terms(self) -> tuple[str, ...]:
        return self.terms if self.covariates is not None else (INTERCEPT,)

    @property
    def total_pools(self) -> int:
        return int(self.counts.sum())

    @property
    def total_units(self) -> int:
        return int((self.counts * self.sizes).sum())

    @property
    def total_positive(self) -> int:
        return int(self.positives.sum())

    @property
    def distinct_sizes(self) -> NDArray[np.int64]:
        return np.unique(self.sizes)

    def subset(self, mask: ArrayLike) -> "PooledDataset":
        """Rows selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        return PooledDataset(
            self.sizes[mask],
            self.counts[mask],
            self.positives[mask],
            None if self.covariates is None else self.covariates[mask],
            self.covariate_names,
            self.terms,
        )

    def with_positives(self, positives: ArrayLike) -> "PooledDataset":
        return PooledDataset(
            self.sizes, self.counts, positives, self.covariates, self.covariate_names, self.terms
        )


class Parameterization(str, Enum):
    THETA = "theta"
    ETA = "eta"
    BETA = "beta"


@dataclass(frozen=True)
class ModelParams:
    """Model parameters in one of three parameterizations.

    ``values`` holds ``(theta,)``, ``(eta,)`` or the coefficient vector
    ``beta``.  When ``lambda_fixed`` is true the excess intensity ``lam``
    is a known constant and not part of the free-parameter vector.
    """

    kind: Parameterization
    values: tuple[float, ...]
    lam: float = 0.0
    lambda_fixed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Parameterization(self.kind))
        object.__setattr__(self, "values", tuple(float(v) for v in np.atleast_1d(self.values)))
        object.__setattr__(self, "lam", float(self.lam))
        if not self.lam >= -1:
            raise DomainError("excess intensity must satisfy lam >= -1")
        if self.kind is not Parameterization.BETA and len(self.values) != 1:
            raise ArgumentError(f"{self.kind.value} parameterization takes one value")
        if self.kind is Parameterization.THETA and not 0.0 <= self.values[0] <= 1.0:
            raise DomainError("prevalence must lie in [0, 1]")
        if self.kind is Parameterization.ETA and np.isnan(self.values[0]):
            raise DomainError("eta must not be NaN")

    @classmethod
    def from_theta(cls, theta: float, lam: float = 0.0, lambda_fixed: bool = False) -> "ModelParams":
        return cls(Parameterization.THETA, (theta,), lam, lambda_fixed)

    @classmethod
    def from_eta(cls, eta: float, lam: float = 0.0, lambda_fixed: bool = False) -> "ModelParams":
        return cls(Parameterization.ETA, (eta,), lam, lambda_fixed)

    @classmethod
    def from_beta(
        cls, beta: ArrayLike, lam: float = 0.0, lambda_fixed: bool = False
    ) -> "ModelParams":
        return cls(Parameterization.BETA, tuple(np.atleast_1d(beta)), lam, lambda_fixed)

    @property
    def theta(self) -> float:
        if self.kind is Parameterization.THETA:
            return self.values[0]
        if len(self.values) != 1:
            raise ArgumentError("prevalence is covariate dependent for this model")
        return float(icll(self.values[0]))

    @property
    def eta(self) -> float:
        if self.kind is Parameterization.THETA:
            return float(cll(self.values[0]))
        if len(self.values) != 1:
            raise ArgumentError("eta is covariate dependent for this model")
        return self.values[0]

    @property
    def beta(self) -> NDArray[np.float64]:
        if self.kind is Parameterization.THETA:
            return np.array([self.eta])
        return np.array(self.values)

    @property
    def n_free(self) -> int:
        return len(self.values) + (0 if self.lambda_fixed else 1)

    def free_vector(self) -> NDArray[np.float64]:
        """Free parameters in order ``(values..., lam)``; ``lam`` omitted when fixed."""
        v = list(self.values)
        if not self.lambda_fixed:
            v.append(self.lam)
        return np.array(v, dtype=float)

    def with_free_vector(self, vector: ArrayLike) -> "ModelParams":
        vector = np.asarray(vector, dtype=float)
        k = len(self.values)
        lam = self.lam if self.lambda_fixed else float(vector[k])
        return ModelParams(self.kind, tuple(vector[:k]), lam, self.lambda_fixed)

    def to(self, kind: Parameterization | str) -> "ModelParams":
        """Convert between parameterizations (BETA -> THETA/ETA needs one coefficient)."""
        kind = Parameterization(kind)
        if kind is self.kind:
            return self
        if kind is Parameterization.THETA:
            return ModelParams(kind, (self.theta,), self.lam, self.lambda_fixed)
        if kind is Parameterization.ETA:
            return ModelParams(kind, (self.eta,), self.lam, self.lambda_fixed)
        return ModelParams(kind, tuple(self.beta), self.lam, self.lambda_fixed)


# ---------------------------------------------------------------------------
# Mass function, aggregation, sampling
# ---------------------------------------------------------------------------


def log_binom_coef(n: ArrayLike, y: ArrayLike) -> NDArray[np.float64]:
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    return gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)


def linear_predictor(data: PooledDataset, params: ModelParams) -> NDArray[np.float64]:
    """Per-row ``cll(theta_i)``: ``eta`` or ``x_i @ beta``."""
    if params.kind is Parameterization.BETA:
        x = data.design_matrix
        beta = params.beta
        if data.covariates is None and beta.size != 1:
            raise ArgumentError("coefficient vector given but data has no covariates")
        if x.shape[1] != beta.size:
            raise ArgumentError(
                f"coefficient vector has length {beta.size}, data has {x.shape[1]} covariates"
            )
        with np.errstate(invalid="ignore"):
            out = x @ beta
        # -inf intercept with zero-valued other terms
        return np.where(np.isnan(out) & np.isinf(beta[0]), beta[0], out)
    if data.has_covariates:
        raise ArgumentError(f"{params.kind.value} parameterization cannot use covariates")
    return np.full(len(data), params.eta)


def log_cumulative_hazard(data: PooledDataset, params: ModelParams) -> NDArray[np.float64]:
    """``log u_i`` where ``phi_i = 1 - exp(-u_i)``."""
    return linear_predictor(data, params) + (1.0 + params.lam) * np.log(data.sizes)


def pool_probabilities(data: PooledDataset, params: ModelParams) -> NDArray[np.float64]:
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(log_cumulative_hazard(data, params)))


def _kernel_loglik(log_u: NDArray, n: NDArray, y: NDArray) -> float:
    """Sum of ``-(n-y) u + y log1mexp(u)`` skipping ``0 * inf`` products."""
    with np.errstate(over="ignore"):
        u = np.exp(log_u)
    with np.errstate(invalid="ignore"):
        neg = np.where(n - y > 0, -(n - y) * u, 0.0)
        pos = np.where(y > 0, y * log1mexp(u), 0.0)
    return float(np.sum(neg) + np.sum(pos))


def poolbin_log_mass(data: PooledDataset, params: ModelParams) -> float:
    """Log of ``prod_i Bin(y_i | n_i, phi_i)`` including binomial coefficients."""
    if not isinstance(data, PooledDataset):
        raise ArgumentError("data must be a PooledDataset")
    const = float(np.sum(log_binom_coef(data.counts, data.positives)))
    return const + _kernel_loglik(
        log_cumulative_hazard(data, params), data.counts, data.positives
    )


def _row_keys(data: PooledDataset) -> list[tuple]:
    x = data.covariates
    return [
        (int(data.sizes[i]),) + (() if x is None else tuple(x[i].tolist()))
        for i in range(len(data))
    ]


def aggregate(data: PooledDataset) -> PooledDataset:
    """Sum pool and positive counts over rows sharing pool size and covariates.

    Output rows appear in order of first occurrence of each key.
    """
    keys = _row_keys(data)
    order: dict[tuple, int] = {}
    for k in keys:
        order.setdefault(k, len(order))
    if len(order) == len(keys):
        return data
    idx = np.array([order[k] for k in keys])
    first = np.array([keys.index(k) for k in order])
    counts = np.bincount(idx, weights=data.counts, minlength=len(order)).astype(np.int64)
    positives = np.bincount(idx, weights=data.positives, minlength=len(order)).astype(np.int64)
    return PooledDataset(
        data.sizes[first],
        counts,
        positives,
        None if data.covariates is None else data.covariates[first],
        data.covariate_names,
        data.terms,
    )


def n_distinct_cells(data: PooledDataset) -> int:
    return len(set(_row_keys(data)))


def sample(
    design: PooledDataset | Sequence[Sequence],
    params: ModelParams,
    seed: int | np.random.Generator,
) -> PooledDataset:
    """Draw ``y_i ~ Bin(n_i, phi_i)`` for a fixed design.

    ``design`` is either a dataset (its positives are ignored) or a list of
    ``(s, n)`` or ``(s, n, x)`` tuples.  ``seed`` may be an integer or a
    ``numpy.random.Generator``.
    """
    if not isinstance(design, PooledDataset):
        rows = [tuple(r) for r in design]
        xs = [r[2] for r in rows if len(r) > 2 and r[2] is not None]
        if xs and len(xs) != len(rows):
            raise ArgumentError("either all or none of the design rows carry covariates")
        design = PooledDataset.from_rows(
            [(r[0], r[1], 0) for r in rows],
            covariates=np.array(xs, dtype=float) if xs else None,
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    phi = pool_probabilities(design, params)
    y = rng.binomial(design.counts, phi)
    return design.with_positives(y)
