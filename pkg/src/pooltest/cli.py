"""Command line interface: ``pooltest {fit,diagnose,ppp-plot,design,simulate}``."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence, TextIO

from pooltest import io as pio
from pooltest.diagnostics import (
    diagnostic_table,
    ppp_plot_data,
    sequential_anova,
    wald_test_lambda,
)
from pooltest.distribution import ModelParams, PooledDataset
from pooltest.errors import ArgumentError, PoolTestError, UnavailableError
from pooltest.estimation import FitResult, fit, fit_glm, predict_prevalence
from pooltest.information import DEFAULT_MAX_POOL, optimal_pool_size, prevalence_cutoffs
from pooltest.simulation import (
    PoolSizeLaw,
    SimConfig,
    coverage_study,
    lambda_null_calibration,
    simulate_dataset,
)

SEED_ENV = "POOLTEST_SEED"


def _comma_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--response", default="positive", help="column of positive pool counts")
    p.add_argument("--pools", default="pools", help="column of pool counts ('' for one pool per row)")
    p.add_argument("--poolsize", default="poolsize", help="column of pool sizes")
    p.add_argument("--covariates", type=_comma_list, default=(), help="comma-separated covariate columns")
    p.add_argument(
        "--categorical", type=_comma_list, default=(), help="covariates to treat as categorical"
    )
    p.add_argument(
        "--fixed-intensity", action="store_true", help="fix the excess intensity instead of estimating it"
    )
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="fixed excess intensity value")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--covariance", choices=("observed", "expected"), default="observed")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--errors-json",
        action="store_true",
        default=argparse.SUPPRESS,
        help="report errors as JSON on stderr",
    )
    parser = argparse.ArgumentParser(
        prog="pooltest", description="Pooled testing prevalence estimation and design"
    )
    parser.add_argument("--errors-json", action="store_true", help="report errors as JSON on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the pooled testing model")
    _add_data_args(p)
    p.add_argument("--out", choices=("text", "json", "csv"), default="text")
    p.add_argument("--t-pvalues", action="store_true", help="t reference with residual df")

    p = sub.add_parser("diagnose", parents=[common], help="test against the unconstrained model")
    _add_data_args(p)
    p.add_argument("--out", choices=("text", "json"), default="text")
    p.add_argument("--t-pvalues", action="store_true")

    p = sub.add_parser("ppp-plot", parents=[common], help="emit pool probability plot data")
    _add_data_args(p)
    p.add_argument("--loo", action="store_true", help="add leave-one-size-out curve")
    p.add_argument("--out", choices=("csv", "json"), default="csv")

    p = sub.add_parser("design", parents=[common], help="information-optimal pool size")
    p.add_argument("--theta", type=float, help="anticipated prevalence")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--cost-sample", type=float, default=0.0, help="cost per sampled unit")
    p.add_argument("--cost-test", type=float, default=1.0, help="cost per test")
    p.add_argument("--max-pool", type=int, default=None, help=f"largest pool size (default {DEFAULT_MAX_POOL}; 40 with --table)")
    p.add_argument("--table", action="store_true", help="emit the prevalence cut-off table")

    p = sub.add_parser("simulate", parents=[common], help="seeded simulation studies")
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    return parser


def _spec(args) -> pio.ModelSpec:
    return pio.ModelSpec(
        response=args.response,
        pools=args.pools or None,
        poolsize=args.poolsize,
        covariates=args.covariates,
        categorical=args.categorical,
        fixed_intensity=args.fixed_intensity,
        level=args.level,
    )


def _lambda_fixed(args) -> float | None:
    return args.lam if args.fixed_intensity else None


def _fit(data: PooledDataset, args) -> FitResult:
    func = fit_glm if data.has_covariates else fit
    return func(data, _lambda_fixed(args), args.covariance)


def _deviance_lines(f: FitResult) -> str:
    return (
        f"Null deviance: {pio.fmt(f.null_deviance)} on {f.df_null} degrees of freedom\n"
        f"Residual deviance: {pio.fmt(f.deviance)} on {f.df_residual} degrees of freedom\n"
    )


def cmd_fit(args, out: TextIO) -> int:
    data = pio.load_csv(args.data, _spec(args))
    f = _fit(data, args)
    anova = sequential_anova(data, _lambda_fixed(args))
    extra = {}
    if not data.has_covariates and f.vcov is not None and not f.flags:
        pred = predict_prevalence(f, level=args.level)
        extra["prevalence"] = {
            "theta": pred.theta, "lower": pred.lower, "upper": pred.upper, "level": pred.level
        }
    if args.out == "json":
        out.write(pio.dumps(pio.fit_to_dict(f, args.t_pvalues, anova, extra)) + "\n")
        return 0
    rows = pio.coefficient_rows(f, args.t_pvalues)
    if args.out == "csv":
        out.write(pio.rows_to_csv(pio.COEF_HEADER, rows))
        return 0
    out.write("Coefficients:\n")
    out.write(pio.text_table(pio.COEF_HEADER, rows))
    out.write("\n" + _deviance_lines(f))
    if f.flags:
        out.write("Flags: " + ", ".join(sorted(x.value for x in f.flags)) + "\n")
    if f.unavailable_reason:
        out.write(f"Note: {f.unavailable_reason}\n")
    if "prevalence" in extra:
        p = extra["prevalence"]
        out.write(
            f"Prevalence: {pio.fmt(p['theta'])} "
            f"({pio.fmt(args.level * 100)}% CI {pio.fmt(p['lower'])} to {pio.fmt(p['upper'])})\n"
        )
    out.write("\nAnalysis of deviance (terms added sequentially):\n")
    out.write(pio.text_table(pio.ANOVA_HEADER, pio.anova_rows(anova)))
    return 0


def cmd_diagnose(args, out: TextIO) -> int:
    data = pio.load_csv(args.data, _spec(args))
    f = _fit(data, args)
    actual, unconstrained = diagnostic_table(f, data)
    wald = None
    if f.free_lambda:
        try:
            wald = wald_test_lambda(f, args.t_pvalues)
        except UnavailableError as exc:
            wald = exc
    if args.out == "json":
        payload = {
            "actual": actual.as_dict(),
            "unconstrained": unconstrained.as_dict(),
            "wald_lambda": None
            if wald is None
            else {"unavailable": str(wald)}
            if isinstance(wald, Exception)
            else {"statistic": wald.statistic, "p": wald.p_value, "reference": wald.reference},
        }
        out.write(pio.dumps(payload) + "\n")
        return 0
    header = ("model", "resid_df", "resid_dev", "df", "deviance", "p")
    rows = [
        [r.label, r.residual_df, r.residual_deviance, r.df_delta, r.deviance_delta, r.p_value]
        for r in (actual, unconstrained)
    ]
    out.write(pio.text_table(header, rows))
    if isinstance(wald, Exception):
        out.write(f"\nExcess intensity test unavailable: {wald}\n")
    elif wald is not None:
        out.write(
            f"\nExcess intensity test (lambda = 0): statistic {pio.fmt(wald.statistic)}, "
            f"p-value {pio.fmt(wald.p_value)} ({wald.reference})\n"
        )
    return 0


def cmd_ppp_plot(args, out: TextIO) -> int:
    data = pio.load_csv(args.data, _spec(args))
    f = _fit(data, args)
    plot = ppp_plot_data(f, data, leave_one_out=args.loo, level=args.level)
    out.write(plot.to_csv() if args.out == "csv" else pio.dumps(plot.as_dict()) + "\n")
    return 0


def cmd_design(args, out: TextIO) -> int:
    if args.table:
        table = prevalence_cutoffs(args.max_pool or 40, args.lam, args.cost_sample, args.cost_test)
        out.write(table.to_csv())
        return 0
    if args.theta is None:
        raise ArgumentError("design needs --theta or --table")
    s = optimal_pool_size(
        args.theta, args.lam, args.cost_sample, args.cost_test, args.max_pool or DEFAULT_MAX_POOL
    )
    out.write(f"{s}\n")
    return 0


def _sim_config(opts: pio.SimulateOptions) -> SimConfig:
    law_value = opts.pool_size
    if opts.pool_size_law == "list" and not isinstance(law_value, (list, tuple)):
        law_value = [law_value]
    if opts.pool_size_law == "list":
        law_value = tuple(law_value)
    return SimConfig(
        n_pools=int(opts.n_pools),
        pool_size_law=PoolSizeLaw(opts.pool_size_law, law_value),
        true_params=ModelParams.from_theta(opts.theta, opts.lam),
        replicates=int(opts.replicates),
        master_seed=int(opts.master_seed),
        fit_lambda=opts.fit_lambda,
    )


def cmd_simulate(args, out: TextIO) -> int:
    cfg = pio.load_config(args.config) if args.config else {}
    if args.replicates is not None:
        cfg["replicates"] = args.replicates
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            cfg["master_seed"] = int(env)
        except ValueError:
            raise ArgumentError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    elif args.seed is not None:
        cfg["master_seed"] = args.seed
    opts = pio.simulate_options(cfg)
    config = _sim_config(opts)
    if opts.study == "datasets":
        for r in range(config.replicates):
            text = pio.dataset_to_csv(simulate_dataset(config, r))
            lines = text.splitlines()
            if r == 0:
                out.write("replicate," + lines[0] + "\n")
            for line in lines[1:]:
                out.write(f"{r},{line}\n")
        return 0
    if opts.study == "coverage":
        summary = coverage_study(config, opts.level, opts.parameter).as_dict()
    elif opts.study == "null":
        summary = lambda_null_calibration(config).as_dict()
    else:
        raise ArgumentError("study must be 'coverage', 'null' or 'datasets'")
    summary["master_seed"] = config.master_seed
    out.write(pio.dumps(summary) + "\n")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "ppp-plot": cmd_ppp_plot,
    "design": cmd_design,
    "simulate": cmd_simulate,
}


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except (PoolTestError, OSError) as exc:
        if getattr(args, "errors_json", False):
            err.write(pio.error_json(exc) + "\n")
        else:
            err.write(f"pooltest {args.command}: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
