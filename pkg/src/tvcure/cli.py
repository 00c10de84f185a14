"""Command-line interface: fit, simulate, replicate and predict.

Artifacts are deterministic given the inputs and seed.  Exit codes: 0 on
success, 1 on input validation failure, 2 on numerical failure (diagnostics
are still written where possible).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from .data import DataError, ModelSpec, expand, ingest_csv
from .estimation import ConvergenceError, FitConfig, FitResult, fit
from .model import NumericalError
from .predict import predict_path
from .simulate import SimScenario, generate, replicate as run_replicates

logger = logging.getLogger("tvcure")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _fit_config(args) -> FitConfig:
    if getattr(args, "fit", None):
        return FitConfig(**_read_json(args.fit))
    return FitConfig()


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_fit_artifacts(result: FitResult, outdir: Path, figures: bool) -> None:
    standard_errors = result.standard_errors()
    summary = result.to_dict()
    summary["coefficients"] = result.coefficients()
    summary["standard_errors"] = dict(zip(result.coefficients(), standard_errors))
    _write_json(summary, outdir / "fit.json")

    pd.DataFrame(
        {
            "t": result.baseline_times,
            "f0": result.baseline_density,
            "F0": result.baseline_cumulative,
            "S0": result.baseline_survivor,
        }
    ).to_csv(outdir / "baseline.csv", index=False)
    for term in result.terms:
        pd.DataFrame(
            {
                "x": term.grid,
                "estimate": term.estimate,
                "lower": term.lower,
                "upper": term.upper,
            }
        ).to_csv(outdir / f"term_{term.submodel}_{term.name}.csv", index=False)
    if figures:
        from . import plots

        plots.render_fit(result, outdir)


def cmd_fit(args) -> int:
    outdir = _outdir(args)
    spec = ModelSpec.from_dict(_read_json(args.spec))
    table = ingest_csv(args.data, spec)
    config = _fit_config(args)
    try:
        result = fit(table, spec, config)
    except (ConvergenceError, NumericalError) as err:
        diagnostics = {
            "error": str(err),
            "stage": getattr(err, "stage", "numerical"),
            "score_norm": getattr(err, "score_norm", float("nan")),
            "iterations": getattr(err, "iterations", -1),
        }
        _write_json(diagnostics, outdir / "diagnostics.json")
        logger.error("fit did not converge: %s", err)
        return EXIT_NUMERICAL
    _write_fit_artifacts(result, outdir, figures=not args.no_figures)
    logger.info(
        "fit converged: deviance=%.2f edf=%.2f aic=%.2f", result.deviance, result.edf, result.aic
    )
    return EXIT_OK


def _scenario(args) -> SimScenario:
    scenario = SimScenario.from_dict(_read_json(args.scenario))
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def cmd_simulate(args) -> int:
    outdir = _outdir(args)
    scenario = _scenario(args)
    records = generate(scenario)
    table = expand(records)
    table.to_frame().to_csv(outdir / "data.csv", index=False)
    logger.info(
        "wrote %d person-period rows for %d units", table.n_rows, table.n_units
    )
    return EXIT_OK


def cmd_replicate(args) -> int:
    outdir = _outdir(args)
    scenario = _scenario(args)
    config = _fit_config(args)
    summary = run_replicates(scenario, fit_config=config, threads=args.threads)
    summary.parameters_frame().to_csv(outdir / "summary_parameters.csv", index=False)
    summary.terms_frame().to_csv(outdir / "summary_terms.csv", index=False)
    summary.replicates_frame().to_csv(outdir / "replicates.csv", index=False)
    summary.curves_frame().to_csv(outdir / "replicate_curves.csv", index=False)
    if not args.no_figures:
        from . import plots

        plots.render_replication(summary, outdir)
    failure_rate = summary.n_failed / scenario.replicates
    logger.info(
        "replication finished: %d/%d converged",
        scenario.replicates - summary.n_failed,
        scenario.replicates,
    )
    if failure_rate > 0.10:
        logger.error("%.0f%% of replicates failed to converge", 100 * failure_rate)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_predict(args) -> int:
    outdir = _outdir(args)
    result = FitResult.from_dict(_read_json(args.fit))
    path_frame = pd.read_csv(args.path)
    curves = predict_path(result, path_frame)
    curves.to_csv(outdir / "prediction.csv", index=False)
    if not args.no_figures:
        from . import plots

        plots.render_prediction(curves, outdir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvcure",
        description=(
            "Promotion-time cure survival models with time-varying covariates: "
            "fit, simulate, replicate, predict."
        ),
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    p_fit = commands.add_parser("fit", help="fit a model to a person-period CSV")
    p_fit.add_argument("--data", required=True, help="person-period CSV file")
    p_fit.add_argument("--spec", required=True, help="model specification JSON")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--fit", help="JSON file with FitConfig overrides")
    p_fit.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_fit.set_defaults(handler=cmd_fit)

    p_sim = commands.add_parser("simulate", help="write one synthetic person-period CSV")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, help="override the scenario seed")
    p_sim.set_defaults(handler=cmd_simulate)

    p_rep = commands.add_parser("replicate", help="run the simulation study")
    p_rep.add_argument("--scenario", required=True, help="scenario JSON")
    p_rep.add_argument("--out", required=True, help="output directory")
    p_rep.add_argument("--seed", type=int, help="override the scenario seed")
    p_rep.add_argument("--threads", type=int, default=1, help="parallel fitting processes")
    p_rep.add_argument("--fit", help="JSON file with FitConfig overrides")
    p_rep.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_rep.set_defaults(handler=cmd_replicate)

    p_pred = commands.add_parser("predict", help="curves for a covariate path")
    p_pred.add_argument("--fit", required=True, help="fit.json artifact from the fit command")
    p_pred.add_argument("--path", required=True, help="CSV with columns t and the model covariates")
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_pred.set_defaults(handler=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except (DataError, FileNotFoundError, json.JSONDecodeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, NumericalError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
