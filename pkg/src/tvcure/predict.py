"""Population curves for prescribed covariate paths under a fitted model.

A prediction request supplies one covariate value per month, from month 1 up
to its horizon, for every covariate of the fitted model.  The cumulative
hazard accumulates the exact month-wise increments of the conditional
event-time distribution, so constant-covariate paths reproduce the closed
form of the promotion-time model.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .data import DataError, SurvivalRecord, build_design, expand
from .estimation import FitResult
from .model import survival_path


def predict_path(result: FitResult, path: pd.DataFrame) -> pd.DataFrame:
    """Hazard, cumulative hazard, survival and event-probability curves for
    one covariate path.

    ``path`` must hold a column ``t`` covering months ``1..horizon`` with no
    gaps plus one column for every covariate of the fitted model; the
    horizon may not exceed the fitted baseline horizon.
    """
    if "t" not in path.columns:
        raise DataError("prediction request needs a column 't'")
    months = pd.to_numeric(path["t"], errors="coerce").to_numpy()
    order = np.argsort(months)
    months = months[order]
    horizon = months.size
    if horizon == 0 or not np.array_equal(months, np.arange(1, horizon + 1)):
        raise DataError("prediction request must cover months 1..horizon with no gaps")
    if horizon > result.T:
        raise DataError(
            f"prediction horizon {horizon} exceeds the fitted horizon {result.T}"
        )
    missing = [c for c in result.spec.all_covariates if c not in path.columns]
    if missing:
        raise DataError(f"prediction request lacks model covariates: {missing}")

    values = {}
    for name in result.spec.all_covariates:
        numeric = pd.to_numeric(path[name], errors="coerce").to_numpy(dtype=float)[order]
        if np.any(np.isnan(numeric)):
            raise DataError(f"prediction column {name!r} must be numeric")
        values[name] = numeric
    record = SurvivalRecord("path", horizon, 0, values)
    table = expand([record], dt=result.dt)
    design = build_design(table, result.spec, result.bases)
    eta_quantum = design.X @ result.psi
    eta_timing = (
        design.X_tilde @ result.psi_tilde
        if design.X_tilde.shape[1]
        else np.zeros(horizon)
    )
    base = result.rebuild_baseline()
    hazard, cumulative, survival, event_prob = survival_path(base, eta_quantum, eta_timing)
    return pd.DataFrame(
        {
            "t": np.arange(1, horizon + 1),
            "hazard": hazard,
            "cum_hazard": cumulative,
            "survival": survival,
            "event_prob": event_prob,
        }
    )
