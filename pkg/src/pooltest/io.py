"""CSV ingestion, model specification and JSON/CSV report emission."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from pooltest.distribution import INTERCEPT, PooledDataset
from pooltest.errors import ArgumentError
from pooltest.estimation import FitResult, coefficient_table

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Which CSV columns hold the response, pool counts, sizes and covariates.

    Covariates listed in ``categorical`` are always expanded to indicators;
    others are expanded only when some cell is not a number.
    """

    response: str = "positive"
    pools: str | None = "pools"
    poolsize: str = "poolsize"
    covariates: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    fixed_intensity: bool = False
    level: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 < self.level < 1.0:
            raise ArgumentError("level must lie in (0, 1)")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))


def natural_key(value: str) -> tuple:
    """Sort key comparing digit runs numerically, so ``6-10`` precedes ``11-15``."""
    parts = re.split(r"(\d+)", value)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts if p != "")


def _parse_int(text: str, column: str, row: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise ArgumentError(f"row {row}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value) or value != int(value):
        raise ArgumentError(f"row {row}: column {column!r} must be an integer: {text!r}")
    return int(value)


def _is_number(text: str) -> bool:
    try:
        return math.isfinite(float(text))
    except ValueError:
        return False


def read_table(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ArgumentError(f"{path}: empty file or missing header row")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        rows = [{k: (v or "").strip() for k, v in r.items() if k is not None} for r in reader]
    return header, rows


def dataset_from_records(
    header: Sequence[str], records: Sequence[Mapping[str, str]], spec: ModelSpec
) -> PooledDataset:
    """Build a dataset from string records (row numbers in errors count data rows from 1)."""
    needed = [spec.response, spec.poolsize, *spec.covariates]
    if spec.pools is not None:
        needed.append(spec.pools)
    missing = [c for c in needed if c not in header]
    if missing:
        raise ArgumentError(f"missing column(s): {', '.join(missing)}")
    if not records:
        raise ArgumentError("no data rows")

    y, n, s = [], [], []
    for i, rec in enumerate(records, start=1):
        yi = _parse_int(rec[spec.response], spec.response, i)
        ni = 1 if spec.pools is None else _parse_int(rec[spec.pools], spec.pools, i)
        si = _parse_int(rec[spec.poolsize], spec.poolsize, i)
        if si < 1:
            raise ArgumentError(f"row {i}: pool size must be >= 1, got {si}")
        if ni < 1:
            raise ArgumentError(f"row {i}: pool count must be >= 1, got {ni}")
        if not 0 <= yi <= ni:
            raise ArgumentError(f"row {i}: positives {yi} outside 0..{ni}")
        y.append(yi)
        n.append(ni)
        s.append(si)

    columns = [np.ones(len(records))]
    names = [INTERCEPT]
    terms = [INTERCEPT]
    for cov in spec.covariates:
        cells = [rec[cov] for rec in records]
        if cov not in spec.categorical and all(_is_number(c) for c in cells):
            columns.append(np.array([float(c) for c in cells]))
            names.append(cov)
            terms.append(cov)
            continue
        for i, c in enumerate(cells, start=1):
            if c == "":
                raise ArgumentError(f"row {i}: column {cov!r} is empty")
        levels = sorted(set(cells), key=natural_key)
        for level in levels[1:]:
            columns.append(np.array([1.0 if c == level else 0.0 for c in cells]))
            names.append(f"{cov}{level}")
            terms.append(cov)
    x = np.column_stack(columns) if spec.covariates else None
    return PooledDataset(
        np.array(s),
        np.array(n),
        np.array(y),
        x,
        tuple(names) if x is not None else (),
        tuple(terms) if x is not None else (),
    )


def load_csv(path: str | Path, spec: ModelSpec | None = None) -> PooledDataset:
    """Read a UTF-8 CSV with a header row into a :class:`PooledDataset`.

    Raises:
        ArgumentError: Missing columns or invalid cells, citing the data row.
    """
    spec = spec or ModelSpec()
    header, records = read_table(path)
    return dataset_from_records(header, records, spec)


def dataset_to_csv(data: PooledDataset) -> str:
    """CSV with columns ``positive,pools,poolsize`` then non-intercept covariate columns.

    Numeric covariates are written with ``repr`` precision so a reload is exact.
    """
    extra = [
        (j, name) for j, name in enumerate(data.design_names) if name != INTERCEPT
    ] if data.covariates is not None else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["positive", "pools", "poolsize", *[name for _, name in extra]])
    for i in range(len(data)):
        row = [int(data.positives[i]), int(data.counts[i]), int(data.sizes[i])]
        row += [repr(float(data.covariates[i, j])) for j, _ in extra]
        writer.writerow(row)
    return buf.getvalue()


def write_csv(data: PooledDataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(data), encoding="utf-8")


def roundtrip_spec(data: PooledDataset) -> ModelSpec:
    """Model spec that reloads a file written by :func:`write_csv` (numeric covariates only)."""
    cov = tuple(n for n in data.design_names if n != INTERCEPT) if data.covariates is not None else ()
    return ModelSpec(covariates=cov)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def clean(value: Any) -> Any:
    """Recursively convert numpy scalars/arrays and map non-finite floats to ``None``."""
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (frozenset, set)):
        return sorted(clean(v) for v in value)
    return value


def fit_to_dict(
    fit_result: FitResult,
    t_pvalues: bool = False,
    anova: Iterable[Any] | None = None,
    extra: Mapping[str, Any] | None = None,
) -> dict:
    """Schema-stable dictionary for a fit; non-finite numbers become ``None``."""
    table = coefficient_table(fit_result, t_pvalues)
    out = {
        "schema_version": SCHEMA_VERSION,
        "terms": list(fit_result.terms),
        "estimates": dict(zip(fit_result.terms, fit_result.coef.tolist())),
        "se": dict(zip(fit_result.terms, fit_result.se.tolist())),
        "vcov": None if fit_result.vcov is None else fit_result.vcov.tolist(),
        "loglik": fit_result.loglik,
        "deviance": fit_result.deviance,
        "null_deviance": fit_result.null_deviance,
        "df_residual": fit_result.df_residual,
        "df_null": fit_result.df_null,
        "iterations": fit_result.iterations,
        "converged": fit_result.converged,
        "lambda_fixed": fit_result.lambda_fixed,
        "flags": sorted(f.value for f in fit_result.flags),
        "unavailable_reason": fit_result.unavailable_reason,
        "covariance": fit_result.covariance,
        "p_reference": "t" if t_pvalues else "normal",
        "coefficients": [
            {
                "term": r.term,
                "estimate": r.estimate,
                "se": r.se,
                "statistic": r.statistic,
                "p": r.p_value,
            }
            for r in table
        ],
        "anova": [row.as_dict() for row in anova] if anova is not None else [],
    }
    if extra:
        out.update(extra)
    return clean(out)


def dumps(obj: Any) -> str:
    return json.dumps(clean(obj), indent=2, allow_nan=False)


def error_json(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def fmt(value: Any, digits: int = 6) -> str:
    """Six significant digits for floats; ``NA`` for missing or non-finite values."""
    if value is None:
        return "NA"
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if not math.isfinite(v):
        return "NA"
    return f"{v:.{digits}g}"


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def text_table(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    cells = [list(header)] + [[fmt(v) if not isinstance(v, str) else v for v in r] for r in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        first = r[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join([first, *rest]))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def coefficient_rows(fit_result: FitResult, t_pvalues: bool = False) -> list[list[Any]]:
    return [
        [r.term, r.estimate, r.se, r.statistic, r.p_value]
        for r in coefficient_table(fit_result, t_pvalues)
    ]


COEF_HEADER = ("term", "estimate", "se", "statistic", "p")
ANOVA_HEADER = ("term", "df", "deviance", "resid_df", "resid_dev", "p")


def anova_rows(rows: Iterable[Any]) -> list[list[Any]]:
    return [
        [r.label, r.df_delta, r.deviance_delta, r.residual_df, r.residual_deviance, r.p_value]
        for r in rows
    ]


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _coerce(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    if "," in t:
        return [_coerce(p) for p in t.split(",")]
    return t.strip("\"'")


def parse_config_text(text: str) -> dict:
    """Parse a JSON object, or ``key = value`` lines (``#`` comments, comma lists)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"invalid JSON config: {exc}") from None
        return dict(obj)
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def load_config(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SimulateOptions:
    """Parsed ``simulate`` config; keys mirror :class:`pooltest.simulation.SimConfig`."""

    n_pools: int = 400
    pool_size_law: str = "poisson"
    pool_size: Any = 20.0
    theta: float = 0.0384
    lam: float = 0.0
    replicates: int = 1000
    master_seed: int = 0
    fit_lambda: float | None = 0.0
    study: str = "coverage"
    parameter: str = "theta"
    level: float = 0.95
    extras: dict = field(default_factory=dict)


SIM_KEYS = {
    "n_pools", "pool_size_law", "pool_size", "theta", "lam", "replicates",
    "master_seed", "fit_lambda", "study", "parameter", "level",
}


def simulate_options(cfg: Mapping[str, Any]) -> SimulateOptions:
    unknown = set(cfg) - SIM_KEYS
    if unknown:
        raise ArgumentError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = dict(cfg)
    if "fit_lambda" in kwargs and isinstance(kwargs["fit_lambda"], str):
        if kwargs["fit_lambda"].lower() != "free":
            raise ArgumentError("fit_lambda must be a number, 'free' or none")
        kwargs["fit_lambda"] = None
    return SimulateOptions(**kwargs)
