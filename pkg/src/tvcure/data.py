"""Person-period data model, CSV ingestion and design-matrix construction.

Classical survival records (one row per unit) are expanded into one row per
unit-month.  The event flag of a unit is zero on every month except possibly
the last one of its follow-up.  Covariates are assumed constant within a
month, taking the value observed at the start of the month.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .splines import CenteredBasis, build_basis, recenter

logger = logging.getLogger(__name__)

RESERVED_COLUMNS = ("id", "t", "d")


class DataError(ValueError):
    """Raised when input data violate the person-period contract."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One classical survival observation with monthly covariate paths.

    ``covariates`` maps each covariate name to its per-month values for
    months ``1..followup``.
    """

    unit_id: str
    followup: int
    event: int
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        if self.followup < 1:
            raise DataError(f"unit {self.unit_id!r}: follow-up must be >= 1 month")
        if self.event not in (0, 1):
            raise DataError(f"unit {self.unit_id!r}: event indicator must be 0 or 1")
        for name, path in self.covariates.items():
            if len(np.atleast_1d(path)) != self.followup:
                raise DataError(
                    f"unit {self.unit_id!r}: covariate {name!r} path has length "
                    f"{len(np.atleast_1d(path))}, expected {self.followup}"
                )


@dataclass(frozen=True)
class PersonPeriodTable:
    """Expanded unit-month rows with the per-row event indicator.

    Within each unit, months run consecutively from 1 to the unit's
    follow-up length; the event flag is zero everywhere except possibly on
    the final month.  Immutable after construction.
    """

    unit_labels: np.ndarray  # (n_units,) original identifiers
    unit_index: np.ndarray  # (n_rows,) position into unit_labels
    month: np.ndarray  # (n_rows,) 1-based month within unit
    event: np.ndarray  # (n_rows,) 0/1 person-period event flag
    covariates: dict[str, np.ndarray]  # name -> (n_rows,) values
    dt: float = 1.0

    @property
    def n_rows(self) -> int:
        return self.month.size

    @property
    def n_units(self) -> int:
        return self.unit_labels.size

    @property
    def T(self) -> int:
        return int(self.month.max())

    def followups(self) -> np.ndarray:
        """Per-unit follow-up length, in months."""
        out = np.zeros(self.n_units, dtype=int)
        np.maximum.at(out, self.unit_index, self.month)
        return out

    def events(self) -> np.ndarray:
        """Per-unit event indicator (1 if the follow-up ended with the event)."""
        out = np.zeros(self.n_units, dtype=int)
        np.maximum.at(out, self.unit_index, self.event)
        return out

    def collapse(self) -> list[SurvivalRecord]:
        """Invert the expansion, recovering one record per unit."""
        order = np.lexsort((self.month, self.unit_index))
        records = []
        followups = self.followups()
        events = self.events()
        start = 0
        for i, label in enumerate(self.unit_labels):
            stop = start + followups[i]
            rows = order[start:stop]
            paths = {name: vals[rows].copy() for name, vals in self.covariates.items()}
            records.append(
                SurvivalRecord(
                    unit_id=str(label),
                    followup=int(followups[i]),
                    event=int(events[i]),
                    covariates=paths,
                )
            )
            start = stop
        return records

    def to_frame(self) -> pd.DataFrame:
        data = {
            "id": self.unit_labels[self.unit_index],
            "t": self.month,
            "d": self.event,
        }
        data.update(self.covariates)
        return pd.DataFrame(data)


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter each submodel, and how.

    The quantum (long-term) submodel always carries an intercept; the timing
    (short-term) submodel never does.  Additive terms use ``additive_basis_size``
    identifiable columns each, built from one more raw B-spline before
    recentering.  Gaussian priors on the linear coefficients default to mean
    zero with a weak precision.
    """

    quantum_linear: tuple[str, ...] = ()
    quantum_additive: tuple[str, ...] = ()
    timing_linear: tuple[str, ...] = ()
    timing_additive: tuple[str, ...] = ()
    additive_basis_size: int = 10
    baseline_basis_size: int = 10
    penalty_order: int = 2
    quantum_prior_mean: tuple[float, ...] | None = None
    timing_prior_mean: tuple[float, ...] | None = None
    quantum_prior_precision: float = 1e-5
    timing_prior_precision: float = 1e-5

    def __post_init__(self):
        for group in ("quantum_linear", "quantum_additive", "timing_linear", "timing_additive"):
            value = getattr(self, group)
            if not isinstance(value, tuple):
                object.__setattr__(self, group, tuple(value))
        if self.additive_basis_size < 4:
            raise DataError("additive_basis_size must be >= 4")
        if self.baseline_basis_size < 4:
            raise DataError("baseline_basis_size must be >= 4")

    @property
    def p(self) -> int:
        return len(self.quantum_linear)

    @property
    def p_tilde(self) -> int:
        return len(self.timing_linear)

    @property
    def n_quantum_terms(self) -> int:
        return len(self.quantum_additive)

    @property
    def n_timing_terms(self) -> int:
        return len(self.timing_additive)

    @property
    def q(self) -> int:
        return 1 + self.p + self.n_quantum_terms * self.additive_basis_size

    @property
    def q_tilde(self) -> int:
        return self.p_tilde + self.n_timing_terms * self.additive_basis_size

    @property
    def all_covariates(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for name in (
            self.quantum_linear
            + self.quantum_additive
            + self.timing_linear
            + self.timing_additive
        ):
            seen.setdefault(name, None)
        return tuple(seen)

    @property
    def additive_covariates(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for name in self.quantum_additive + self.timing_additive:
            seen.setdefault(name, None)
        return tuple(seen)

    def validate_against(self, table: PersonPeriodTable) -> None:
        missing = [c for c in self.all_covariates if c not in table.covariates]
        if missing:
            raise DataError(f"covariates not present in the data: {missing}")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "quantum": {
                "linear": list(self.quantum_linear),
                "additive": list(self.quantum_additive),
            },
            "timing": {
                "linear": list(self.timing_linear),
                "additive": list(self.timing_additive),
            },
            "additive_basis_size": self.additive_basis_size,
            "baseline_basis_size": self.baseline_basis_size,
            "penalty_order": self.penalty_order,
            "quantum_prior_mean": None
            if self.quantum_prior_mean is None
            else list(self.quantum_prior_mean),
            "timing_prior_mean": None
            if self.timing_prior_mean is None
            else list(self.timing_prior_mean),
            "quantum_prior_precision": self.quantum_prior_precision,
            "timing_prior_precision": self.timing_prior_precision,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        version = doc.get("schema_version", 1)
        if version != 1:
            raise DataError(f"unsupported model spec schema_version {version}")
        quantum = doc.get("quantum", {})
        timing = doc.get("timing", {})
        kwargs = {
            "quantum_linear": tuple(quantum.get("linear", ())),
            "quantum_additive": tuple(quantum.get("additive", ())),
            "timing_linear": tuple(timing.get("linear", ())),
            "timing_additive": tuple(timing.get("additive", ())),
        }
        for key in (
            "additive_basis_size",
            "baseline_basis_size",
            "penalty_order",
            "quantum_prior_precision",
            "timing_prior_precision",
        ):
            if key in doc:
                kwargs[key] = doc[key]
        for key in ("quantum_prior_mean", "timing_prior_mean"):
            if doc.get(key) is not None:
                kwargs[key] = tuple(doc[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class DesignViews:
    """Row-indexed design matrices for the two linear predictors.

    ``X`` stacks the quantum intercept, linear columns and centered spline
    columns for each quantum additive term; ``X_tilde`` the same for the
    timing submodel (without intercept).
    """

    X: np.ndarray
    X_tilde: np.ndarray
    quantum_names: tuple[str, ...]
    timing_names: tuple[str, ...]
    quantum_slices: dict[str, slice]
    timing_slices: dict[str, slice]
    n_clamped: int

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def q_tilde(self) -> int:
        return self.X_tilde.shape[1]


def expand(records: list[SurvivalRecord], dt: float = 1.0) -> PersonPeriodTable:
    """Expand classical records into person-period rows.

    Each record contributes ``followup`` rows; the event flag is placed only
    on the final month when the record ends with the event.
    """
    if dt <= 0:
        raise DataError(f"dt must be positive, got {dt}")
    if not records:
        raise DataError("no records to expand")
    names = list(records[0].covariates)
    for record in records:
        record.validate()
        if list(record.covariates) != names:
            raise DataError(
                f"unit {record.unit_id!r}: covariate names differ from the first record"
            )

    followups = np.array([r.followup for r in records], dtype=int)
    unit_index = np.repeat(np.arange(len(records)), followups)
    month = np.concatenate([np.arange(1, f + 1) for f in followups])
    event = np.zeros(month.size, dtype=np.int8)
    last_rows = np.cumsum(followups) - 1
    event[last_rows] = np.array([r.event for r in records], dtype=np.int8)
    covariates = {
        name: np.concatenate(
            [np.asarray(r.covariates[name], dtype=float) for r in records]
        )
        for name in names
    }
    return PersonPeriodTable(
        unit_labels=np.array([r.unit_id for r in records], dtype=object),
        unit_index=unit_index,
        month=month.astype(np.int32),
        event=event,
        covariates=covariates,
        dt=float(dt),
    )


def ingest_csv(path, spec: ModelSpec, dt: float = 1.0) -> PersonPeriodTable:
    """Read a person-period CSV and validate it against a model spec.

    The file must be UTF-8 with a header row and columns ``id`` (string),
    ``t`` (integer month starting at 1), ``d`` (0/1 event flag) and one
    numeric column per covariate referenced by ``spec``.  Columns that the
    spec does not reference are ignored with a warning.
    """
    frame = pd.read_csv(path, dtype={"id": str})
    for column in RESERVED_COLUMNS:
        if column not in frame.columns:
            raise DataError(f"missing required column {column!r}")
    missing = [c for c in spec.all_covariates if c not in frame.columns]
    if missing:
        raise DataError(f"missing covariate columns: {missing}")
    unknown = [
        c
        for c in frame.columns
        if c not in RESERVED_COLUMNS and c not in spec.all_covariates
    ]
    if unknown:
        logger.warning("ignoring %d unknown column(s): %s", len(unknown), unknown)

    t_numeric = pd.to_numeric(frame["t"], errors="coerce")
    bad_t = frame.index[t_numeric.isna() | (t_numeric != t_numeric.round()) | (t_numeric < 1)]
    if len(bad_t):
        raise DataError(f"column 't' must hold integers >= 1; first bad row {bad_t[0] + 2}")
    d_numeric = pd.to_numeric(frame["d"], errors="coerce")
    bad_d = frame.index[~d_numeric.isin([0, 1])]
    if len(bad_d):
        raise DataError(f"column 'd' must be 0 or 1; first bad row {bad_d[0] + 2}")
    values = {}
    for name in spec.all_covariates:
        numeric = pd.to_numeric(frame[name], errors="coerce")
        bad = frame.index[numeric.isna()]
        if len(bad):
            raise DataError(
                f"column {name!r} must be numeric; first bad row {bad[0] + 2}"
            )
        values[name] = numeric.to_numpy(dtype=float)

    ids = frame["id"].to_numpy()
    labels, first_pos = np.unique(ids, return_index=True)
    labels = labels[np.argsort(first_pos)]  # keep file order of units
    label_pos = {label: i for i, label in enumerate(labels)}
    unit_index = np.fromiter((label_pos[i] for i in ids), dtype=int, count=len(ids))
    month = t_numeric.to_numpy(dtype=np.int32)
    event = d_numeric.to_numpy(dtype=np.int8)

    order = np.lexsort((month, unit_index))
    unit_index = unit_index[order]
    month = month[order]
    event = event[order]
    values = {name: vals[order] for name, vals in values.items()}

    counts = np.bincount(unit_index, minlength=len(labels))
    boundaries = np.concatenate([[0], np.cumsum(counts)])
    for i, label in enumerate(labels):
        months_i = month[boundaries[i] : boundaries[i + 1]]
        if not np.array_equal(months_i, np.arange(1, counts[i] + 1)):
            raise DataError(
                f"unit {label!r}: months must be consecutive 1..t_i, got {months_i.tolist()}"
            )
        events_i = event[boundaries[i] : boundaries[i + 1]]
        if np.any(events_i[:-1] != 0):
            raise DataError(f"unit {label!r}: event flag set before the final month")

    return PersonPeriodTable(
        unit_labels=labels.astype(object),
        unit_index=unit_index,
        month=month,
        event=event,
        covariates=values,
        dt=float(dt),
    )


def build_bases(
    table: PersonPeriodTable, spec: ModelSpec, quadrature_points: int = 1000
) -> dict[str, CenteredBasis]:
    """Centered spline bases for every additive covariate, spanning the
    observed range of that covariate in the training table."""
    bases = {}
    for name in spec.additive_covariates:
        values = table.covariates[name]
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            raise DataError(f"covariate {name!r} is constant; no additive term possible")
        raw = build_basis(lo, hi, spec.additive_basis_size + 1)
        bases[name] = recenter(raw, quadrature_points=quadrature_points)
    return bases


def _assemble(
    table: PersonPeriodTable,
    linear: tuple[str, ...],
    additive: tuple[str, ...],
    bases: dict[str, CenteredBasis],
    intercept: bool,
) -> tuple[np.ndarray, tuple[str, ...], dict[str, slice], int]:
    n = table.n_rows
    columns: list[np.ndarray] = []
    names: list[str] = []
    if intercept:
        columns.append(np.ones((n, 1)))
        names.append("intercept")
    for name in linear:
        columns.append(table.covariates[name][:, None])
        names.append(name)
    slices: dict[str, slice] = {}
    n_clamped = 0
    offset = (1 if intercept else 0) + len(linear)
    for name in additive:
        basis = bases[name]
        _, outside = basis.base.clamp(table.covariates[name])
        n_clamped += outside
        block = basis.eval(table.covariates[name])
        columns.append(block)
        width = block.shape[1]
        slices[name] = slice(offset, offset + width)
        names.extend(f"{name}:s{i + 1}" for i in range(width))
        offset += width
    if columns:
        matrix = np.hstack(columns)
    else:
        matrix = np.zeros((n, 0))
    return matrix, tuple(names), slices, n_clamped


def build_design(
    table: PersonPeriodTable, spec: ModelSpec, bases: dict[str, CenteredBasis]
) -> DesignViews:
    """Evaluate both design matrices row by row for the given table."""
    spec.validate_against(table)
    X, q_names, q_slices, clamped_q = _assemble(
        table, spec.quantum_linear, spec.quantum_additive, bases, intercept=True
    )
    X_tilde, t_names, t_slices, clamped_t = _assemble(
        table, spec.timing_linear, spec.timing_additive, bases, intercept=False
    )
    n_clamped = clamped_q + clamped_t
    if n_clamped:
        logger.warning(
            "%d covariate value(s) fell outside their basis domain and were clamped",
            n_clamped,
        )
    return DesignViews(
        X=X,
        X_tilde=X_tilde,
        quantum_names=q_names,
        timing_names=t_names,
        quantum_slices=q_slices,
        timing_slices=t_slices,
        n_clamped=n_clamped,
    )
